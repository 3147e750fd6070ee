use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory too short: need at least {needed} frames, got {got}")]
    TrajectoryTooShort { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("horizon mismatch: prediction has {pred} frames, truth has {truth}")]
    HorizonMismatch { pred: usize, truth: usize },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: frame has {got} atoms, expected {expected}")]
    InconsistentAtomCount {
        path: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },

    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),

    #[error("invalid Morse parameters: {0}")]
    InvalidParams(String),

    #[error("Morse fit diverged after {iterations} iterations (damping {damping:e})")]
    FitDiverged { iterations: usize, damping: f64 },

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("no parameters or threshold for pair {0}")]
    MissingPairParams(String),

    #[error("atom index {index} out of range for {n_atoms} atoms")]
    IndexOutOfRange { index: usize, n_atoms: usize },

    #[error("pair distance requested for atom {0} with itself")]
    SelfPair(usize),

    #[error("simulation blew up at step {step}: {reason}")]
    BlowUp { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("segment `{segment}` has {got} frames, need at least {needed}")]
    SegmentTooShort {
        segment: &'static str,
        got: usize,
        needed: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite prediction at rollout step {step}")]
    NonFinitePrediction { step: usize },

    #[error("no atoms of species `{0}`")]
    NoAtomsOfSpecies(String),

    #[error("fit window {start}..{end} out of range for {n_frames} frames")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        n_frames: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
