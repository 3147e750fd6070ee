//! Forecasting models, the physics-informed loss, training and checkpoints.

pub mod backbone;
pub mod physics;
pub mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backbone::{Architecture, BackboneKind, ModelParams};
pub use physics::{physics_loss, PairContext, PhysicsSteps, Violation};
pub use train::{
    batch_loss, evaluate, gradient, prepare_samples, train, LossBreakdown, LossContext, Sample,
    TrainConfig, TrainingLog,
};

use crate::dataset::{FeatureWindow, Normalizer, WindowSpec};
use crate::error::{Error, Result};
use crate::traj::Vec3;

/// Anything that maps a raw feature window to `L` raw displacement steps.
pub trait DisplacementModel {
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Predicted displacements, one `Vec` of per-atom vectors per horizon step.
    fn predict(&self, features: &FeatureWindow) -> Result<Vec<Vec<Vec3>>>;
}

/// Trained parameters bundled with the normalization they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl DisplacementModel for TrainedModel {
    fn history(&self) -> usize {
        self.params.arch.history
    }

    fn horizon(&self) -> usize {
        self.params.arch.horizon
    }

    fn predict(&self, features: &FeatureWindow) -> Result<Vec<Vec<Vec3>>> {
        let z = self.normalizer.apply_features(features);
        let y = self.params.forward(&z)?;
        let t = self.normalizer.invert_targets(&y, self.horizon());
        Ok((0..self.horizon()).map(|l| t.step(l)).collect())
    }
}

pub const CHECKPOINT_FORMAT: &str = "mdcast-checkpoint/1";

/// Self-describing model checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub species: Vec<String>,
    pub window: WindowSpec,
    pub model: TrainedModel,
    /// Path of the threshold table used during training, if any.
    pub thresholds_ref: Option<String>,
    pub lambda: f64,
}

impl Checkpoint {
    pub fn new(
        species: Vec<String>,
        window: WindowSpec,
        model: TrainedModel,
        thresholds_ref: Option<String>,
        lambda: f64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            species,
            window,
            model,
            thresholds_ref,
            lambda,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format tag `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ck.format
            )));
        }
        let arch = &ck.model.params.arch;
        if ck.model.params.theta.len() != arch.n_params()
            || arch.n_atoms != ck.species.len()
            || ck.model.normalizer.n_atoms() != arch.n_atoms
        {
            return Err(Error::Checkpoint("inconsistent shapes".into()));
        }
        Ok(ck)
    }
}
