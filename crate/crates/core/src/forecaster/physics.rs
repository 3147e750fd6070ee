//! Morse-energy penalty on predicted displacements.
//!
//! Predicted displacements are integrated from the base positions
//! (`r_{k+1} = r_k + Δ_k`). At every vetted step `M` atom pairs are sampled
//! without replacement (all pairs when `M` covers them). A sampled pair
//! violates when its energy is strictly above its threshold. The penalty is
//! the mean energy over all violating samples, zero when none violate.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morse::{MorseParams, MorseTable, ThresholdTable};
use crate::traj::{norm, sub, Vec3};

/// Which predicted steps the penalty covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsSteps {
    /// Every step of the horizon, positions chained through the window.
    #[default]
    Chained,
    /// Only the first predicted step.
    First,
}

/// Per-pair Morse parameters and thresholds resolved for one species list.
#[derive(Debug, Clone)]
pub struct PairContext {
    n_atoms: usize,
    pairs: Vec<(usize, usize)>,
    params: Vec<MorseParams>,
    taus: Vec<f64>,
}

impl PairContext {
    pub fn new(species: &[String], morse: &MorseTable, thresholds: &ThresholdTable) -> Result<Self> {
        let n = species.len();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        Ok(Self {
            n_atoms: n,
            pairs,
            params: morse.pair_params(species)?,
            taus: thresholds.pair_taus(species)?,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, k: usize) -> (usize, usize) {
        self.pairs[k]
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k]
    }

    pub fn energy(&self, k: usize, positions: &[Vec3]) -> f64 {
        let (i, j) = self.pairs[k];
        self.params[k].energy_at(norm(sub(positions[i], positions[j])))
    }

    /// Pair indices to vet at one step: all of them if `m` covers every pair,
    /// otherwise `m` distinct indices drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        let total = self.pairs.len();
        if m >= total {
            (0..total).collect()
        } else {
            index::sample(rng, total, m).into_vec()
        }
    }

    /// `dE/dr_i` for pair `k` at `positions` (the `r_j` gradient is its negative).
    fn energy_gradient(&self, k: usize, positions: &[Vec3]) -> Vec3 {
        let (i, j) = self.pairs[k];
        let rij = sub(positions[i], positions[j]);
        let d = norm(rij);
        if d == 0.0 {
            return [0.0; 3];
        }
        let s = self.params[k].energy_derivative(d) / d;
        [s * rij[0], s * rij[1], s * rij[2]]
    }
}

/// One sampled pair whose energy exceeded its threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Index of the predicted step within the horizon.
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub energy: f64,
    pub tau: f64,
    pair: usize,
}

/// Positions after each predicted step, `out[l] = base + Δ_0 + ... + Δ_l`.
pub fn chain_positions(base: &[Vec3], deltas: &[Vec<Vec3>]) -> Vec<Vec<Vec3>> {
    let mut cur = base.to_vec();
    deltas
        .iter()
        .map(|step| {
            for (r, d) in cur.iter_mut().zip(step) {
                for c in 0..3 {
                    r[c] += d[c];
                }
            }
            cur.clone()
        })
        .collect()
}

/// Collects violating pairs over the vetted steps of one predicted window.
pub fn find_violations<R: Rng + ?Sized>(
    ctx: &PairContext,
    base: &[Vec3],
    deltas: &[Vec<Vec3>],
    pairs_per_step: usize,
    steps: PhysicsSteps,
    rng: &mut R,
) -> Result<Vec<Violation>> {
    if base.len() != ctx.n_atoms || deltas.iter().any(|d| d.len() != ctx.n_atoms) {
        return Err(Error::ShapeMismatch(format!(
            "physics term expects {} atoms",
            ctx.n_atoms
        )));
    }
    let chained = chain_positions(base, deltas);
    let n_steps = match steps {
        PhysicsSteps::Chained => chained.len(),
        PhysicsSteps::First => chained.len().min(1),
    };
    let mut out = Vec::new();
    for (step, positions) in chained.iter().take(n_steps).enumerate() {
        for k in ctx.sample(pairs_per_step, rng) {
            let e = ctx.energy(k, positions);
            let tau = ctx.taus[k];
            if e > tau {
                let (i, j) = ctx.pairs[k];
                out.push(Violation {
                    step,
                    i,
                    j,
                    energy: e,
                    tau,
                    pair: k,
                });
            }
        }
    }
    Ok(out)
}

/// Penalty value for one predicted window and the violating pairs behind it.
pub fn physics_loss<R: Rng + ?Sized>(
    ctx: &PairContext,
    base: &[Vec3],
    deltas: &[Vec<Vec3>],
    pairs_per_step: usize,
    steps: PhysicsSteps,
    rng: &mut R,
) -> Result<(f64, Vec<Violation>)> {
    let v = find_violations(ctx, base, deltas, pairs_per_step, steps, rng)?;
    let value = if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.energy).sum::<f64>() / v.len() as f64
    };
    Ok((value, v))
}

/// Adds `weight * dE/dΔ` for every violation to `grad_deltas` (`L x N` vectors).
///
/// A step-`l` position depends on every displacement `Δ_s` with `s <= l`.
pub fn accumulate_gradient(
    ctx: &PairContext,
    base: &[Vec3],
    deltas: &[Vec<Vec3>],
    violations: &[Violation],
    weight: f64,
    grad_deltas: &mut [Vec<Vec3>],
) {
    if violations.is_empty() {
        return;
    }
    let chained = chain_positions(base, deltas);
    for v in violations {
        let g = ctx.energy_gradient(v.pair, &chained[v.step]);
        for gs in grad_deltas.iter_mut().take(v.step + 1) {
            for c in 0..3 {
                gs[v.i][c] += weight * g[c];
                gs[v.j][c] -= weight * g[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morse::{compute_thresholds, Granularity};
    use crate::traj::Trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn morse() -> MorseTable {
        let mut t = MorseTable::new();
        t.insert("A", "A", MorseParams::new(1.0, 1.5, 2.0, 0.0).unwrap());
        t
    }

    fn species(n: usize) -> Vec<String> {
        vec!["A".to_string(); n]
    }

    fn equilibrium_frame() -> Vec<Vec3> {
        vec![[0.0; 3], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]
    }

    fn thresholds_from(frames: Vec<Vec<Vec3>>) -> ThresholdTable {
        let n = frames[0].len();
        let traj = Trajectory::from_positions(species(n), frames, 0, 1.0).unwrap();
        compute_thresholds(&traj, &morse(), Granularity::Atom).unwrap()
    }

    #[test]
    fn zero_prediction_has_no_violations() {
        let base = equilibrium_frame();
        let tau = thresholds_from(vec![base.clone()]);
        let ctx = PairContext::new(&species(4), &morse(), &tau).unwrap();
        let deltas = vec![vec![[0.0; 3]; 4]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, v) =
            physics_loss(&ctx, &base, &deltas, 100, PhysicsSteps::Chained, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert!(v.is_empty());
    }

    #[test]
    fn collapsed_pair_costs_its_energy() {
        let base = vec![[0.0; 3], [2.0, 0.0, 0.0]];
        let tau = thresholds_from(vec![base.clone()]);
        let ctx = PairContext::new(&species(2), &morse(), &tau).unwrap();
        // Move atom 1 to 0.1 d_e from atom 0.
        let deltas = vec![vec![[0.0; 3], [0.2 - 2.0, 0.0, 0.0]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, v) =
            physics_loss(&ctx, &base, &deltas, 1, PhysicsSteps::Chained, &mut rng).unwrap();
        let x: f64 = (-1.5f64 * (0.2 - 2.0)).exp();
        let expected = (1.0 - x) * (1.0 - x);
        assert_eq!(v.len(), 1);
        assert!((loss - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn exhaustive_sampling_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Vec<Vec3>> = (0..20)
            .map(|_| {
                (0..4)
                    .map(|i| {
                        [
                            2.0 * i as f64 + rng.random_range(-0.2..0.2),
                            rng.random_range(-0.2..0.2),
                            rng.random_range(-0.2..0.2),
                        ]
                    })
                    .collect()
            })
            .collect();
        let tau = thresholds_from(frames.clone());
        let ctx = PairContext::new(&species(4), &morse(), &tau).unwrap();
        let base = frames[5].clone();
        let deltas: Vec<Vec<Vec3>> = (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        [
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ]
                    })
                    .collect()
            })
            .collect();
        let (loss, v) =
            physics_loss(&ctx, &base, &deltas, 6, PhysicsSteps::Chained, &mut rng).unwrap();

        let p = morse();
        let p = p.get("A", "A").unwrap();
        let mut pos = base.clone();
        let (mut sum, mut count) = (0.0, 0);
        for step in &deltas {
            for a in 0..4 {
                for c in 0..3 {
                    pos[a][c] += step[a][c];
                }
            }
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let d = ((pos[i][0] - pos[j][0]).powi(2)
                        + (pos[i][1] - pos[j][1]).powi(2)
                        + (pos[i][2] - pos[j][2]).powi(2))
                    .sqrt();
                    let e = p.energy_at(d);
                    if e > tau.tau(i, j, "A", "A").unwrap() {
                        sum += e;
                        count += 1;
                    }
                }
            }
        }
        assert!(count > 0);
        assert_eq!(v.len(), count);
        assert!((loss - sum / count as f64).abs() < 1e-12);
    }

    #[test]
    fn first_step_mode_only_vets_first_step() {
        let base = vec![[0.0; 3], [2.0, 0.0, 0.0]];
        let tau = thresholds_from(vec![base.clone()]);
        let ctx = PairContext::new(&species(2), &morse(), &tau).unwrap();
        let deltas = vec![vec![[0.0; 3]; 2], vec![[0.0; 3], [-1.5, 0.0, 0.0]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (first, _) = physics_loss(&ctx, &base, &deltas, 1, PhysicsSteps::First, &mut rng).unwrap();
        let (chained, _) =
            physics_loss(&ctx, &base, &deltas, 1, PhysicsSteps::Chained, &mut rng).unwrap();
        assert_eq!(first, 0.0);
        assert!(chained > 0.0);
    }

    #[test]
    fn equality_is_not_a_violation() {
        let base = vec![[0.0; 3], [1.3, 0.0, 0.0]];
        let tau = thresholds_from(vec![base.clone()]);
        let ctx = PairContext::new(&species(2), &morse(), &tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let deltas = vec![vec![[0.0; 3]; 2]];
        let (_, v) = physics_loss(&ctx, &base, &deltas, 1, PhysicsSteps::Chained, &mut rng).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn sampling_without_replacement() {
        let tau = thresholds_from(vec![vec![[0.0; 3], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0], [6.0, 0.0, 0.0], [8.0, 0.0, 0.0]]]);
        let ctx = PairContext::new(&species(5), &morse(), &tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ctx.sample(7, &mut rng);
        assert_eq!(s.len(), 7);
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 7);
        assert_eq!(ctx.sample(50, &mut rng), (0..10).collect::<Vec<_>>());
    }
}
