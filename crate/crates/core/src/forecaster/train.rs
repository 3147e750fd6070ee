//! Loss, gradient and the Adam training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::ModelParams;
use super::physics::{accumulate_gradient, find_violations, PairContext, PhysicsSteps};
use crate::dataset::{FeatureWindow, Normalizer, TargetWindow};
use crate::error::{Error, Result};
use crate::traj::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Pairs sampled per predicted step for the physics term.
    #[serde(rename = "M")]
    pub pairs_per_step: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub physics_steps: PhysicsSteps,
    /// Multiply the learning rate by this factor after an epoch without
    /// validation improvement.
    pub plateau_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            pairs_per_step: 500,
            batch_size: 16,
            learning_rate: 0.01,
            clip_norm: 1.0,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            physics_steps: PhysicsSteps::Chained,
            plateau_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.pairs_per_step == 0 {
            return bad("M must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("B must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if let Some(f) = self.plateau_decay {
            if !(f > 0.0 && f <= 1.0) {
                return bad("plateau_decay must be in (0, 1]");
            }
        }
        Ok(())
    }
}

/// MSE, physics penalty and their weighted sum for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub phys: f64,
    pub total: f64,
    pub violating_pair_count: usize,
}

/// A window prepared for training: normalized input and target plus the raw
/// positions the prediction is integrated from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub base: Vec<Vec3>,
}

pub fn prepare_samples(
    windows: &[(FeatureWindow, TargetWindow)],
    normalizer: &Normalizer,
) -> Vec<Sample> {
    windows
        .iter()
        .map(|(x, y)| Sample {
            x: normalizer.apply_features(x),
            y: normalizer.apply_targets(y),
            base: x.last_positions(),
        })
        .collect()
}

/// Everything the loss needs besides the model and the batch.
pub struct LossContext<'a> {
    pub pairs: &'a PairContext,
    pub normalizer: &'a Normalizer,
    pub lambda: f64,
    pub pairs_per_step: usize,
    pub physics_steps: PhysicsSteps,
}

fn denormalize(ctx: &LossContext<'_>, pred: &[f64], horizon: usize) -> Vec<Vec<Vec3>> {
    let t = ctx.normalizer.invert_targets(pred, horizon);
    (0..horizon).map(|l| t.step(l)).collect()
}

/// Loss over a batch and, if `grad` is given, its gradient with respect to θ
/// (overwritten).
///
/// The MSE is averaged over every normalized target entry of the batch; the
/// physics term is the mean energy over all violating samples of the batch,
/// computed on de-normalized displacements.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &ModelParams,
    batch: &[&Sample],
    ctx: &LossContext<'_>,
    rng: &mut R,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let horizon = model.arch.horizon;
    let n = model.arch.n_atoms;
    let out_len = model.arch.output_len();
    let mse_scale = 1.0 / (batch.len() * out_len) as f64;

    let mut preds = Vec::with_capacity(batch.len());
    let mut mse = 0.0;
    for s in batch {
        let p = model.forward(&s.x)?;
        if s.y.len() != out_len {
            return Err(Error::ShapeMismatch("target length".into()));
        }
        mse += p
            .iter()
            .zip(&s.y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        preds.push(p);
    }
    mse *= mse_scale;

    let mut violations = Vec::with_capacity(batch.len());
    let mut deltas_all = Vec::with_capacity(batch.len());
    {
        for (s, p) in batch.iter().zip(&preds) {
            let deltas = denormalize(ctx, p, horizon);
            let v = find_violations(
                ctx.pairs,
                &s.base,
                &deltas,
                ctx.pairs_per_step,
                ctx.physics_steps,
                rng,
            )?;
            violations.push(v);
            deltas_all.push(deltas);
        }
    }
    let count: usize = violations.iter().map(Vec::len).sum();
    let phys = if count == 0 {
        0.0
    } else {
        violations
            .iter()
            .flatten()
            .map(|v| v.energy)
            .sum::<f64>()
            / count as f64
    };
    let out = LossBreakdown {
        mse,
        phys,
        total: mse + ctx.lambda * phys,
        violating_pair_count: count,
    };

    if let Some(grad) = grad.as_deref_mut() {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let phys_weight = if count > 0 {
            ctx.lambda / count as f64
        } else {
            0.0
        };
        for (b, (s, p)) in batch.iter().zip(&preds).enumerate() {
            let mut g_out: Vec<f64> = p
                .iter()
                .zip(&s.y)
                .map(|(a, y)| 2.0 * (a - y) * mse_scale)
                .collect();
            if phys_weight > 0.0 && !violations[b].is_empty() {
                let mut g_delta = vec![vec![[0.0; 3]; n]; horizon];
                accumulate_gradient(
                    ctx.pairs,
                    &s.base,
                    &deltas_all[b],
                    &violations[b],
                    phys_weight,
                    &mut g_delta,
                );
                for (l, step) in g_delta.iter().enumerate() {
                    for (i, g) in step.iter().enumerate() {
                        for c in 0..3 {
                            let col = 3 * i + c;
                            g_out[l * 3 * n + col] += g[c] * ctx.normalizer.target_scale(col);
                        }
                    }
                }
            }
            model.backward(&s.x, &g_out, grad)?;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
    }
    Ok(out)
}

/// Gradient of the total loss over a batch, with pair sampling seeded by `seed`.
pub fn gradient(
    model: &ModelParams,
    batch: &[&Sample],
    ctx: &LossContext<'_>,
    seed: u64,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.0; model.theta.len()];
    let lb = batch_loss(model, batch, ctx, &mut rng, Some(&mut g))?;
    Ok((g, lb))
}

/// Scales `g` so its Euclidean norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            theta[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_mse,train_phys,train_total,train_violations,valid_mse,valid_phys,valid_total,valid_violations,learning_rate\n",
        );
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.train.mse,
                e.train.phys,
                e.train.total,
                e.train.violating_pair_count,
                e.valid.mse,
                e.valid.phys,
                e.valid.total,
                e.valid.violating_pair_count,
                e.learning_rate
            ));
        }
        s
    }
}

const VALID_SEED_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// Loss over a whole sample set, in batches of `batch_size`, with pair
/// sampling drawn from a fixed stream so repeated evaluations agree.
pub fn evaluate(
    model: &ModelParams,
    samples: &[Sample],
    ctx: &LossContext<'_>,
    batch_size: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossBreakdown::default();
    let mut phys_sum = 0.0;
    let mut mse_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let lb = batch_loss(model, &batch, ctx, &mut rng, None)?;
        mse_sum += lb.mse * chunk.len() as f64;
        phys_sum += lb.phys * lb.violating_pair_count as f64;
        acc.violating_pair_count += lb.violating_pair_count;
    }
    acc.mse = mse_sum / samples.len() as f64;
    acc.phys = if acc.violating_pair_count > 0 {
        phys_sum / acc.violating_pair_count as f64
    } else {
        0.0
    };
    acc.total = acc.mse + ctx.lambda * acc.phys;
    Ok(acc)
}

/// Adam with global-norm clipping and early stopping on validation loss.
///
/// Returns the parameters from the epoch with the lowest validation loss.
pub fn train(
    init: ModelParams,
    train_samples: &[Sample],
    valid_samples: &[Sample],
    ctx: &LossContext<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingLog)> {
    cfg.validate()?;
    if train_samples.is_empty() || valid_samples.is_empty() {
        return Err(Error::EmptyInput("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init;
    let mut adam = Adam::new(model.theta.len(), cfg.learning_rate);
    let mut grad = vec![0.0; model.theta.len()];
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    let valid_seed = cfg.seed ^ VALID_SEED_SALT;
    let mut best = evaluate(&model, valid_samples, ctx, cfg.batch_size, valid_seed)?.total;
    let mut best_model = model.clone();
    let mut log = TrainingLog::default();
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut phys_weighted = 0.0;
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train_samples[k]).collect();
            let lb = batch_loss(&model, &batch, ctx, &mut rng, Some(&mut grad)).map_err(|e| {
                match e {
                    Error::NonFiniteGradient => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                }
            })?;
            if !lb.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(&mut model.theta, &grad);
            sums.mse += lb.mse;
            sums.total += lb.total;
            phys_weighted += lb.phys * lb.violating_pair_count as f64;
            sums.violating_pair_count += lb.violating_pair_count;
            n_batches += 1;
        }
        let train_lb = LossBreakdown {
            mse: sums.mse / n_batches as f64,
            phys: if sums.violating_pair_count > 0 {
                phys_weighted / sums.violating_pair_count as f64
            } else {
                0.0
            },
            total: sums.total / n_batches as f64,
            violating_pair_count: sums.violating_pair_count,
        };
        let valid_lb = evaluate(&model, valid_samples, ctx, cfg.batch_size, valid_seed)?;
        if !valid_lb.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train: train_lb,
            valid: valid_lb,
            learning_rate: adam.lr,
        });
        if valid_lb.total < best {
            best = valid_lb.total;
            best_model = model.clone();
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if let Some(f) = cfg.plateau_decay {
                adam.lr *= f;
            }
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best_model, log))
}
