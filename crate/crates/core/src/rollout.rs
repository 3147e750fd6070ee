//! Autoregressive rollout with optional physics-guarded step rejection.
//!
//! Each prediction consumes the latest `H` frames (positions plus the
//! displacement that produced each frame) and yields `L` displacement steps.
//! With the guard enabled, every step is integrated, `M` pairs are vetted on
//! the updated positions, and a step where any vetted pair sits strictly above
//! its threshold is replaced by a zero displacement. The corrected step is what
//! feeds the next window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_feature_row, FeatureWindow, Matrix, FEATURE_COLS_PER_ATOM};
use crate::error::{Error, Result};
use crate::forecaster::{DisplacementModel, PairContext};
use crate::traj::{add, sub, Trajectory, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Zero the whole step on any violation.
    #[default]
    FreezeAll,
    /// Zero only the displacements of atoms in violating pairs.
    FreezeViolating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Number of predicted frames to produce.
    #[serde(rename = "T")]
    pub total_steps: usize,
    /// Steps consumed from each prediction; `None` uses the model horizon.
    #[serde(rename = "L")]
    pub window: Option<usize>,
    pub pii: bool,
    #[serde(rename = "M")]
    pub pairs_per_step: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            window: None,
            pii: true,
            pairs_per_step: 500,
            seed: 0,
            freeze_policy: FreezePolicy::FreezeAll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step index of the emitted frame.
    pub step: i64,
    pub violated: bool,
    pub frozen: bool,
    pub n_pairs_checked: usize,
    /// Highest vetted pair energy before correction.
    pub max_energy: Option<f64>,
    pub key_of_max: Option<(usize, usize)>,
    pub violating_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutLog {
    pub steps: Vec<StepRecord>,
}

impl RolloutLog {
    pub fn frozen_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.frozen).count()
    }

    pub fn violated_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.violated).count()
    }

    /// `step,violated,frozen,n_pairs_checked,max_energy,key_of_max`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,violated,frozen,n_pairs_checked,max_energy,key_of_max\n");
        for r in &self.steps {
            let e = r.max_energy.map(|v| v.to_string()).unwrap_or_default();
            let k = r
                .key_of_max
                .map(|(i, j)| format!("{i}:{j}"))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.violated as u8, r.frozen as u8, r.n_pairs_checked, e, k
            ));
        }
        s
    }
}

fn lag_deltas(history: &Trajectory) -> Vec<Vec<Vec3>> {
    let n = history.n_atoms();
    (0..history.n_frames())
        .map(|k| {
            if k == 0 {
                vec![[0.0; 3]; n]
            } else {
                history
                    .positions(k)
                    .iter()
                    .zip(history.positions(k - 1))
                    .map(|(a, b)| sub(*a, *b))
                    .collect()
            }
        })
        .collect()
}

pub fn rollout(
    model: &dyn DisplacementModel,
    seed_history: &Trajectory,
    pairs: &PairContext,
    cfg: &RolloutConfig,
) -> Result<(Trajectory, RolloutLog)> {
    let h = model.history();
    let horizon = model.horizon();
    let n = seed_history.n_atoms();
    if seed_history.n_frames() < h {
        return Err(Error::TrajectoryTooShort {
            needed: h,
            got: seed_history.n_frames(),
        });
    }
    if pairs.n_atoms() != n {
        return Err(Error::ShapeMismatch(format!(
            "pair context covers {} atoms, trajectory has {n}",
            pairs.n_atoms()
        )));
    }
    let window = cfg.window.unwrap_or(horizon);
    if window == 0 || window > horizon {
        return Err(Error::Config(format!(
            "rollout window {window} must be in 1..={horizon}"
        )));
    }
    if cfg.pii && cfg.pairs_per_step == 0 {
        return Err(Error::Config("rollout: M must be >= 1 with pii enabled".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = seed_history.clone();
    let mut lags = lag_deltas(seed_history);
    let mut log = RolloutLog::default();
    let cols = n * FEATURE_COLS_PER_ATOM;

    while log.steps.len() < cfg.total_steps {
        let len = out.n_frames();
        let mut x = Matrix::zeros(h, cols);
        for r in 0..h {
            let k = len - h + r;
            write_feature_row(x.row_mut(r), out.positions(k), &lags[k]);
        }
        let pred = model.predict(&FeatureWindow(x))?;
        if pred.len() < window || pred.iter().any(|s| s.len() != n) {
            return Err(Error::ShapeMismatch("model prediction shape".into()));
        }
        let take = window.min(cfg.total_steps - log.steps.len());
        for delta in pred.into_iter().take(take) {
            let current = out.positions(out.n_frames() - 1).to_vec();
            let step = out.frame(out.n_frames() - 1).step_index + 1;
            if delta.iter().any(|d| d.iter().any(|c| !c.is_finite())) {
                return Err(Error::NonFinitePrediction { step: log.steps.len() });
            }
            let mut next: Vec<Vec3> = current.iter().zip(&delta).map(|(r, d)| add(*r, *d)).collect();
            let mut used = delta;
            let mut record = StepRecord {
                step,
                violated: false,
                frozen: false,
                n_pairs_checked: 0,
                max_energy: None,
                key_of_max: None,
                violating_pairs: Vec::new(),
            };
            if cfg.pii {
                let vetted = pairs.sample(cfg.pairs_per_step, &mut rng);
                record.n_pairs_checked = vetted.len();
                for &k in &vetted {
                    let e = pairs.energy(k, &next);
                    if record.max_energy.is_none_or(|m| e > m) {
                        record.max_energy = Some(e);
                        record.key_of_max = Some(pairs.pair(k));
                    }
                    if e > pairs.tau(k) {
                        record.violating_pairs.push(pairs.pair(k));
                    }
                }
                record.violated = !record.violating_pairs.is_empty();
                if record.violated {
                    record.frozen = true;
                    match cfg.freeze_policy {
                        FreezePolicy::FreezeAll => {
                            used = vec![[0.0; 3]; n];
                            next = current.clone();
                        }
                        FreezePolicy::FreezeViolating => {
                            // Freezing some atoms can push a vetted pair with one
                            // moving partner over its threshold; repeat until stable.
                            let mut offending = record.violating_pairs.clone();
                            while !offending.is_empty() {
                                for &(i, j) in &offending {
                                    used[i] = [0.0; 3];
                                    used[j] = [0.0; 3];
                                    next[i] = current[i];
                                    next[j] = current[j];
                                }
                                offending = vetted
                                    .iter()
                                    .copied()
                                    .filter(|&k| {
                                        let (i, j) = pairs.pair(k);
                                        (next[i] != current[i] || next[j] != current[j])
                                            && pairs.energy(k, &next) > pairs.tau(k)
                                    })
                                    .map(|k| pairs.pair(k))
                                    .collect();
                            }
                        }
                    }
                }
            }
            if next.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
                return Err(Error::NonFinitePrediction { step: log.steps.len() });
            }
            out.push_positions(next)?;
            lags.push(used);
            log.steps.push(record);
        }
    }
    Ok((out, log))
}

/// One rollout request of a batch.
pub struct RolloutRun<'a> {
    pub key: String,
    pub model: &'a (dyn DisplacementModel + Sync),
    pub cfg: RolloutConfig,
}

pub struct RolloutOutcome {
    pub key: String,
    pub result: Result<(Trajectory, RolloutLog)>,
}

/// Runs independent rollouts from a shared seed history, concurrently.
/// Outcomes come back in request order.
pub fn batch_rollout(
    runs: &[RolloutRun<'_>],
    seed_history: &Trajectory,
    pairs: &PairContext,
) -> Vec<RolloutOutcome> {
    runs.par_iter()
        .map(|run| RolloutOutcome {
            key: run.key.clone(),
            result: rollout(run.model, seed_history, pairs, &run.cfg),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morse::{compute_thresholds, Granularity, MorseParams, MorseTable};

    struct Constant {
        h: usize,
        l: usize,
        delta: Vec<Vec3>,
    }

    impl DisplacementModel for Constant {
        fn history(&self) -> usize {
            self.h
        }
        fn horizon(&self) -> usize {
            self.l
        }
        fn predict(&self, _: &FeatureWindow) -> Result<Vec<Vec<Vec3>>> {
            Ok(vec![self.delta.clone(); self.l])
        }
    }

    /// Pushes atom 1 straight at atom 0 by a fixed step.
    struct Collider {
        step: f64,
    }

    impl DisplacementModel for Collider {
        fn history(&self) -> usize {
            2
        }
        fn horizon(&self) -> usize {
            3
        }
        fn predict(&self, _: &FeatureWindow) -> Result<Vec<Vec<Vec3>>> {
            Ok(vec![vec![[0.0; 3], [-self.step, 0.0, 0.0], [0.0; 3]]; 3])
        }
    }

    fn setup() -> (Trajectory, PairContext, MorseParams) {
        let mut morse = MorseTable::new();
        let p = MorseParams::new(1.0, 1.5, 2.0, 0.0).unwrap();
        morse.insert("A", "A", p);
        let species = vec!["A".to_string(); 3];
        let frames: Vec<Vec<Vec3>> = (0..6)
            .map(|t| {
                let w = 0.05 * (t as f64).sin();
                vec![[0.0; 3], [2.0 + w, 0.0, 0.0], [1.0, 1.8, 0.0]]
            })
            .collect();
        let traj = Trajectory::from_positions(species.clone(), frames, 0, 1.0).unwrap();
        let tau = compute_thresholds(&traj, &morse, Granularity::Species).unwrap();
        let ctx = PairContext::new(&species, &morse, &tau).unwrap();
        (traj, ctx, p)
    }

    #[test]
    fn zero_model_freezes_at_last_seed_frame() {
        let (traj, ctx, _) = setup();
        let model = Constant {
            h: 4,
            l: 2,
            delta: vec![[0.0; 3]; 3],
        };
        let cfg = RolloutConfig {
            total_steps: 7,
            pairs_per_step: 10,
            ..Default::default()
        };
        let (out, log) = rollout(&model, &traj, &ctx, &cfg).unwrap();
        assert_eq!(out.n_frames(), 6 + 7);
        let last = traj.positions(5);
        for t in 6..13 {
            assert_eq!(out.positions(t), last);
        }
        assert_eq!(log.violated_steps(), 0);
        assert_eq!(out.frame(12).step_index, 12);
    }

    #[test]
    fn collapsing_step_is_rejected() {
        let (traj, ctx, p) = setup();
        // Atom 1 sits near 2.0 Å; one step of 1.6 Å puts the pair at ~0.1 d_e.
        let start = traj.positions(5)[1][0];
        let model = Collider { step: start - 0.2 };
        let guarded = RolloutConfig {
            total_steps: 3,
            pairs_per_step: 3,
            ..Default::default()
        };
        let (out, log) = rollout(&model, &traj, &ctx, &guarded).unwrap();
        assert!(log.steps[0].violated && log.steps[0].frozen);
        assert!(log.steps[0].violating_pairs.contains(&(0, 1)));
        assert_eq!(out.positions(6), traj.positions(5));
        let e = log.steps[0].max_energy.unwrap();
        assert!((e - p.energy_at(0.2)).abs() < 1e-9 * e);

        let plain = RolloutConfig {
            pii: false,
            ..guarded
        };
        let (out, log) = rollout(&model, &traj, &ctx, &plain).unwrap();
        assert_eq!(log.violated_steps(), 0);
        let d = crate::morse::pair_distance(out.frame(6), 0, 1).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn freeze_violating_keeps_innocent_atoms_moving() {
        let (traj, ctx, _) = setup();
        struct Mixed;
        impl DisplacementModel for Mixed {
            fn history(&self) -> usize {
                2
            }
            fn horizon(&self) -> usize {
                1
            }
            fn predict(&self, _: &FeatureWindow) -> Result<Vec<Vec<Vec3>>> {
                Ok(vec![vec![[0.0; 3], [-1.8, 0.0, 0.0], [0.0, 0.0, 0.01]]])
            }
        }
        let cfg = RolloutConfig {
            total_steps: 1,
            pairs_per_step: 3,
            freeze_policy: FreezePolicy::FreezeViolating,
            ..Default::default()
        };
        let (out, log) = rollout(&Mixed, &traj, &ctx, &cfg).unwrap();
        assert!(log.steps[0].frozen);
        assert_eq!(out.positions(6)[1], traj.positions(5)[1]);
        assert!((out.positions(6)[2][2] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn truncated_final_window_and_csv() {
        let (traj, ctx, _) = setup();
        let model = Constant {
            h: 2,
            l: 4,
            delta: vec![[0.0; 3]; 3],
        };
        let cfg = RolloutConfig {
            total_steps: 6,
            pairs_per_step: 1,
            seed: 3,
            ..Default::default()
        };
        let (out, log) = rollout(&model, &traj, &ctx, &cfg).unwrap();
        assert_eq!(out.n_frames(), 12);
        assert_eq!(log.steps.len(), 6);
        let csv = log.to_csv();
        assert!(csv.starts_with("step,violated,frozen,n_pairs_checked,max_energy,key_of_max\n6,0,0,1,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn non_finite_prediction_is_reported() {
        let (traj, ctx, _) = setup();
        let model = Constant {
            h: 2,
            l: 2,
            delta: vec![[f64::NAN, 0.0, 0.0]; 3],
        };
        let cfg = RolloutConfig {
            total_steps: 4,
            ..Default::default()
        };
        assert!(matches!(
            rollout(&model, &traj, &ctx, &cfg),
            Err(Error::NonFinitePrediction { step: 0 })
        ));
    }

    #[test]
    fn short_seed_history() {
        let (traj, ctx, _) = setup();
        let model = Constant {
            h: 10,
            l: 2,
            delta: vec![[0.0; 3]; 3],
        };
        assert!(matches!(
            rollout(&model, &traj, &ctx, &RolloutConfig::default()),
            Err(Error::TrajectoryTooShort { needed: 10, got: 6 })
        ));
    }

    #[test]
    fn batch_preserves_order_and_handles_empty() {
        let (traj, ctx, _) = setup();
        assert!(batch_rollout(&[], &traj, &ctx).is_empty());
        let model = Constant {
            h: 2,
            l: 2,
            delta: vec![[0.001; 3]; 3],
        };
        let runs: Vec<RolloutRun> = (0..4)
            .map(|k| RolloutRun {
                key: format!("run{k}"),
                model: &model,
                cfg: RolloutConfig {
                    total_steps: 5,
                    pii: k % 2 == 0,
                    pairs_per_step: 1,
                    seed: k,
                    ..Default::default()
                },
            })
            .collect();
        let out = batch_rollout(&runs, &traj, &ctx);
        let keys: Vec<&str> = out.iter().map(|o| o.key.as_str()).collect();
        assert_eq!(keys, ["run0", "run1", "run2", "run3"]);
        assert!(out.iter().all(|o| o.result.is_ok()));
    }

    proptest::proptest! {
        #[test]
        fn guarded_rollout_never_exceeds_thresholds(
            deltas in proptest::collection::vec(proptest::array::uniform3(-0.3f64..0.3), 3),
            steps in 1usize..60,
            window in 1usize..4,
            seed in proptest::prelude::any::<u64>(),
            violating_only in proptest::prelude::any::<bool>(),
        ) {
            let (traj, ctx, _) = setup();
            let model = Constant { h: 4, l: 3, delta: deltas };
            let cfg = RolloutConfig {
                total_steps: steps,
                window: Some(window),
                pii: true,
                pairs_per_step: ctx.n_pairs(),
                seed,
                freeze_policy: if violating_only {
                    FreezePolicy::FreezeViolating
                } else {
                    FreezePolicy::FreezeAll
                },
            };
            let (out, log) = rollout(&model, &traj, &ctx, &cfg).unwrap();
            proptest::prop_assert_eq!(out.n_frames(), traj.n_frames() + steps);
            proptest::prop_assert_eq!(log.steps.len(), steps);
            for t in traj.n_frames()..out.n_frames() {
                for k in 0..ctx.n_pairs() {
                    proptest::prop_assert!(ctx.energy(k, out.positions(t)) <= ctx.tau(k));
                }
            }
        }
    }
}
