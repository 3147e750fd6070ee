//! Configuration, seeding and the end-to-end commands behind the CLI.
//!
//! Every command reads one [`PipelineConfig`] and writes its artifacts under
//! `out_dir/<run_id>/`, next to a snapshot of the resolved configuration.
//! Data artifacts contain no timestamps, so a rerun with the same
//! configuration rewrites identical bytes.
//!
//! Seeds: a block's explicit `seed` wins; otherwise it is
//! `split_seed(seed, stream)` with streams simgen=1, train=2, rollout=3,
//! eval=4. Grid cell `k` of a stream uses `split_seed(stream_seed, k)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_windows, Normalizer, WindowSpec};
use crate::error::{Error, Result};
use crate::forecaster::{
    prepare_samples, train, Architecture, BackboneKind, Checkpoint, DisplacementModel,
    LossContext, ModelParams, PairContext, PhysicsSteps, TrainConfig, TrainedModel, TrainingLog,
};
use crate::metrics::{
    aligned_table, diffusivity, forecast_errors, violations, DiffusivityReport, FitWindow,
    ForecastErrors, MetricsReport, MsdOrigins, ViolationReport,
};
use crate::morse::{
    compute_thresholds, fit_morse, FitReport, Granularity, MorseParams, MorseTable, PairKey,
    ThresholdTable,
};
use crate::rollout::{batch_rollout, rollout, FreezePolicy, RolloutConfig, RolloutLog, RolloutRun};
use crate::simgen::{generate, split_dataset, SimConfig, Thermostat};
use crate::traj::{read_trajectory, write_trajectory, Trajectory, TrajectoryFormat};

pub const STREAM_SIMGEN: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_ROLLOUT: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `parent`.
pub fn split_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(1)))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimgenBlock {
    pub n_atoms: usize,
    pub species_counts: BTreeMap<String, usize>,
    pub box_side: f64,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    pub n_steps: usize,
    pub dt_fs: f64,
    pub thermostat: Thermostat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub cutoff: f64,
    pub masses: BTreeMap<String, f64>,
    pub reflective_walls: bool,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SimgenBlock {
    fn default() -> Self {
        Self {
            n_atoms: 8,
            species_counts: [("A".to_string(), 4), ("B".to_string(), 4)].into(),
            box_side: 10.0,
            temperature_k: 900.0,
            n_steps: 6000,
            dt_fs: 1.0,
            thermostat: Thermostat::Langevin { gamma: 0.01 },
            seed: None,
            cutoff: 10.0,
            masses: BTreeMap::new(),
            reflective_walls: true,
            train_frac: 0.7,
            valid_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorsePairRow {
    pub species_i: String,
    pub species_j: String,
    #[serde(rename = "D_e")]
    pub depth: f64,
    pub a: f64,
    pub d_e: f64,
    #[serde(default)]
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorseBlock {
    /// Parameter CSV; takes precedence over `pairs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_file: Option<PathBuf>,
    pub pairs: Vec<MorsePairRow>,
    pub granularity: Granularity,
    /// `species_i,species_j,d,energy` samples read by `fit-morse`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_file: Option<PathBuf>,
}

impl Default for MorseBlock {
    fn default() -> Self {
        let row = |i: &str, j: &str, depth: f64, a: f64, d_e: f64| MorsePairRow {
            species_i: i.into(),
            species_j: j.into(),
            depth,
            a,
            d_e,
            b: 0.0,
        };
        Self {
            params_file: None,
            pairs: vec![
                row("A", "A", 0.6, 1.4, 2.4),
                row("A", "B", 0.8, 1.6, 2.2),
                row("B", "B", 0.5, 1.3, 2.6),
            ],
            granularity: Granularity::Species,
            samples_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub backbone: BackboneKind,
    pub hidden: [usize; 2],
    pub lambda: f64,
    #[serde(rename = "M")]
    pub pairs_per_step: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub physics_steps: PhysicsSteps,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_decay: Option<f64>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            backbone: BackboneKind::Mixer,
            hidden: [64, 64],
            lambda: t.lambda,
            pairs_per_step: t.pairs_per_step,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: None,
            physics_steps: t.physics_steps,
            plateau_decay: t.plateau_decay,
        }
    }
}

impl TrainBlock {
    pub fn train_config(&self, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda,
            pairs_per_step: self.pairs_per_step,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            physics_steps: self.physics_steps,
            plateau_decay: self.plateau_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Train,
    Valid,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutBlock {
    #[serde(rename = "T")]
    pub total_steps: usize,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub pii: bool,
    #[serde(rename = "M")]
    pub pairs_per_step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub freeze_policy: FreezePolicy,
    /// Segment whose frames seed the rollout and serve as ground truth.
    pub seed_from: Segment,
    /// First frame of the seed history within that segment.
    pub start: usize,
}

impl Default for RolloutBlock {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            total_steps: r.total_steps,
            window: None,
            pii: r.pii,
            pairs_per_step: r.pairs_per_step,
            seed: None,
            freeze_policy: r.freeze_policy,
            seed_from: Segment::Test,
            start: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Train,
    #[default]
    Test,
}

impl ThresholdSource {
    pub fn label(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    #[serde(rename = "M")]
    pub pairs_per_step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threshold_table: ThresholdSource,
    /// MSD fit lags in frames, `fit_start..fit_end`; `fit_end` defaults to a
    /// quarter of the trajectory.
    pub fit_start: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_end: Option<usize>,
    pub msd_origins: MsdOrigins,
    /// λ values trained by `sweep-lambda`.
    pub lambdas: Vec<f64>,
    /// Independent seeds per grid cell for `ablate` and `sweep-lambda`.
    pub replicates: usize,
    /// λ of the physics-trained arm of `ablate`; defaults to `train.lambda`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_lambda: Option<f64>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            pairs_per_step: 500,
            seed: None,
            threshold_table: ThresholdSource::Test,
            fit_start: 1,
            fit_end: None,
            msd_origins: MsdOrigins::Multiple,
            lambdas: vec![0.0, 1e-4, 5e-4, 1e-3],
            replicates: 1,
            ablation_lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub data_format: TrajectoryFormat,
    pub simgen: SimgenBlock,
    pub morse: MorseBlock,
    pub window: WindowSpec,
    pub train: TrainBlock,
    pub rollout: RolloutBlock,
    pub eval: EvalBlock,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            run_id: "default".into(),
            data_format: TrajectoryFormat::Xyz,
            simgen: SimgenBlock::default(),
            morse: MorseBlock::default(),
            window: WindowSpec::default(),
            train: TrainBlock::default(),
            rollout: RolloutBlock::default(),
            eval: EvalBlock::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `block.key=value` (any depth) to a parsed table. Values are TOML
/// literals; anything that does not parse is taken as a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id `{}` is not a plain name", self.run_id)));
        }
        let s = &self.simgen;
        if !(s.train_frac > 0.0 && s.valid_frac > 0.0 && s.train_frac + s.valid_frac < 1.0) {
            return Err(Error::Config(format!(
                "split: simgen.train_frac + simgen.valid_frac must be < 1 with both positive, got {} + {}",
                s.train_frac, s.valid_frac
            )));
        }
        if self.morse.params_file.is_none() && self.morse.pairs.is_empty() {
            return Err(Error::Config("morse: give `pairs` or `params_file`".into()));
        }
        self.train.train_config(self.train.lambda, 0).validate()?;
        if self.rollout.total_steps == 0 {
            return Err(Error::Config("rollout: T must be >= 1".into()));
        }
        if self.rollout.pii && self.rollout.pairs_per_step == 0 {
            return Err(Error::Config("rollout: M must be >= 1 with pii enabled".into()));
        }
        if let Some(l) = self.rollout.window {
            if l == 0 || l > self.window.horizon {
                return Err(Error::Config(format!(
                    "rollout: L must be in 1..={}",
                    self.window.horizon
                )));
            }
        }
        if self.eval.pairs_per_step == 0 {
            return Err(Error::Config("eval: M must be >= 1".into()));
        }
        if self.eval.replicates == 0 {
            return Err(Error::Config("eval: replicates must be >= 1".into()));
        }
        if self.eval.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("eval: lambdas must be >= 0".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    fn stream_seed(&self, explicit: Option<u64>, stream: u64) -> u64 {
        explicit.unwrap_or_else(|| split_seed(self.seed, stream))
    }

    pub fn simgen_seed(&self) -> u64 {
        self.stream_seed(self.simgen.seed, STREAM_SIMGEN)
    }

    pub fn train_seed(&self) -> u64 {
        self.stream_seed(self.train.seed, STREAM_TRAIN)
    }

    pub fn rollout_seed(&self) -> u64 {
        self.stream_seed(self.rollout.seed, STREAM_ROLLOUT)
    }

    pub fn eval_seed(&self) -> u64 {
        self.stream_seed(self.eval.seed, STREAM_EVAL)
    }

    pub fn morse_table(&self) -> Result<MorseTable> {
        if let Some(p) = &self.morse.params_file {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "morse.params_file {} does not exist",
                    p.display()
                )));
            }
            return MorseTable::read_csv(p);
        }
        let mut t = MorseTable::new();
        for r in &self.morse.pairs {
            t.insert(&r.species_i, &r.species_j, MorseParams::new(r.depth, r.a, r.d_e, r.b)?);
        }
        Ok(t)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.simgen;
        Ok(SimConfig {
            n_atoms: s.n_atoms,
            species_counts: s.species_counts.clone(),
            box_side: s.box_side,
            temperature_k: s.temperature_k,
            n_steps: s.n_steps,
            dt_fs: s.dt_fs,
            thermostat: s.thermostat,
            seed: self.simgen_seed(),
            morse: self.morse_table()?,
            cutoff: s.cutoff,
            masses: s.masses.clone(),
            reflective_walls: s.reflective_walls,
        })
    }

    pub fn rollout_config(&self, pii: bool, seed: u64) -> RolloutConfig {
        RolloutConfig {
            total_steps: self.rollout.total_steps,
            window: self.rollout.window,
            pii,
            pairs_per_step: self.rollout.pairs_per_step.max(1),
            seed,
            freeze_policy: self.rollout.freeze_policy,
        }
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Trajectory,
    pub valid: Trajectory,
    pub test: Trajectory,
}

impl DataSplit {
    pub fn segment(&self, s: Segment) -> &Trajectory {
        match s {
            Segment::Train => &self.train,
            Segment::Valid => &self.valid,
            Segment::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_frames: usize,
    pub train_frames: usize,
    pub valid_frames: usize,
    pub test_frames: usize,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub dt_fs: f64,
    pub species: Vec<String>,
    pub files: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist ({hint})", path.display())))
    }
}

/// One configured run: resolved config plus its output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
}

/// Metrics of one rollout against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub errors: ForecastErrors,
    pub violations: ViolationReport,
    pub frozen_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pit: bool,
    pub pif: bool,
    pub mae_delta: f64,
    pub mse_delta: f64,
    pub mae_r: f64,
    pub mse_r: f64,
    pub v_r: f64,
    pub frozen_fraction: f64,
    /// Replicates that finished without error.
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Rollout error against ground truth, guard as configured.
    pub mae_delta: f64,
    pub mse_delta: f64,
    pub v_r: f64,
    /// Teacher-forced error over non-overlapping test windows.
    pub window_mae_delta: f64,
    pub runs: usize,
}

#[derive(Debug)]
pub struct MorseFitOutcome {
    pub table: MorseTable,
    pub reports: Vec<(PairKey, Result<FitReport>)>,
}

impl MorseFitOutcome {
    pub fn partial(&self) -> bool {
        self.reports.iter().any(|(_, r)| r.is_err())
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.cfg.run_dir()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir().join(name)
    }

    fn data_path(&self, segment: &str) -> PathBuf {
        self.path(&format!("data/{segment}.{}", self.cfg.data_format.extension()))
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn snapshot_config(&self) -> Result<()> {
        write_text(&self.path("config.toml"), &self.cfg.to_toml()?)
    }

    pub fn generate_split(&self) -> Result<DataSplit> {
        let traj = generate(&self.cfg.sim_config()?)?;
        let s = &self.cfg.simgen;
        let (train, valid, test) =
            split_dataset(&traj, s.train_frac, s.valid_frac, self.cfg.window.min_frames())?;
        Ok(DataSplit { train, valid, test })
    }

    pub fn gen_data(&self) -> Result<(DataSplit, Manifest)> {
        let data = self.generate_split()?;
        let fmt = self.cfg.data_format;
        let mut files = Vec::new();
        for (name, t) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
            let p = self.data_path(name);
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            write_trajectory(t, &p, fmt)?;
            files.push(format!("data/{name}.{}", fmt.extension()));
        }
        let manifest = Manifest {
            seed: self.cfg.simgen_seed(),
            n_frames: data.train.n_frames() + data.valid.n_frames() + data.test.n_frames(),
            train_frames: data.train.n_frames(),
            valid_frames: data.valid.n_frames(),
            test_frames: data.test.n_frames(),
            train_frac: self.cfg.simgen.train_frac,
            valid_frac: self.cfg.simgen.valid_frac,
            dt_fs: data.train.dt_fs(),
            species: data.train.species().to_vec(),
            files,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_text(&self.path("data/manifest.json"), &(json + "\n"))?;
        self.snapshot_config()?;
        Ok((data, manifest))
    }

    pub fn load_data(&self) -> Result<DataSplit> {
        let fmt = self.cfg.data_format;
        let read = |name: &str| -> Result<Trajectory> {
            let p = self.data_path(name);
            require(&p, "run gen-data first")?;
            read_trajectory(&p, fmt)
        };
        Ok(DataSplit {
            train: read("train")?,
            valid: read("valid")?,
            test: read("test")?,
        })
    }

    /// Fits one Morse curve per species pair from a sample CSV.
    pub fn fit_morse(&self, samples_path: Option<&Path>) -> Result<MorseFitOutcome> {
        let path = samples_path
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.morse.samples_file.clone())
            .ok_or_else(|| Error::Config("fit-morse needs morse.samples_file or --samples".into()))?;
        require(&path, "energy samples")?;
        let groups = read_energy_samples(&path)?;
        let mut table = MorseTable::new();
        let mut reports = Vec::new();
        let mut report_csv = String::from("species_i,species_j,D_e,a,d_e,b,rmse,iterations,converged,status\n");
        for (key, samples) in groups {
            match fit_morse(&samples, None) {
                Ok((p, rep)) => {
                    table.insert(key.first(), key.second(), p);
                    let _ = writeln!(
                        report_csv,
                        "{},{},{},{},{},{},{},{},{},ok",
                        key.first(),
                        key.second(),
                        p.depth,
                        p.steepness,
                        p.r_eq,
                        p.offset,
                        rep.rmse,
                        rep.iterations,
                        rep.converged
                    );
                    reports.push((key, Ok(rep)));
                }
                Err(e) => {
                    let msg = e.to_string().replace(',', ";");
                    let _ = writeln!(report_csv, "{},{},,,,,,,,{msg}", key.first(), key.second());
                    reports.push((key, Err(e)));
                }
            }
        }
        fs::create_dir_all(self.run_dir())?;
        table.write_csv(&self.path("morse_fit.csv"))?;
        write_text(&self.path("morse_fit_report.csv"), &report_csv)?;
        self.snapshot_config()?;
        Ok(MorseFitOutcome { table, reports })
    }

    pub fn threshold_tables(&self, data: &DataSplit) -> Result<(ThresholdTable, ThresholdTable)> {
        let morse = self.cfg.morse_table()?;
        let g = self.cfg.morse.granularity;
        Ok((
            compute_thresholds(&data.train, &morse, g)?,
            compute_thresholds(&data.test, &morse, g)?,
        ))
    }

    pub fn thresholds(&self) -> Result<(ThresholdTable, ThresholdTable)> {
        let data = self.load_data()?;
        let (train, test) = self.threshold_tables(&data)?;
        fs::create_dir_all(self.run_dir())?;
        train.write_csv(&self.path("thresholds_train.csv"))?;
        test.write_csv(&self.path("thresholds_test.csv"))?;
        self.snapshot_config()?;
        Ok((train, test))
    }

    /// Trains one model without writing anything.
    pub fn fit_model(
        &self,
        data: &DataSplit,
        tau_train: &ThresholdTable,
        lambda: f64,
        seed: u64,
    ) -> Result<(TrainedModel, TrainingLog)> {
        let morse = self.cfg.morse_table()?;
        let w = self.cfg.window;
        let train_w = make_windows(&data.train, &w)?;
        let valid_w = make_windows(&data.valid, &w)?;
        let normalizer = if w.normalize {
            Normalizer::fit(&train_w)?
        } else {
            Normalizer::identity(data.train.n_atoms())
        };
        let train_s = prepare_samples(&train_w, &normalizer);
        let valid_s = prepare_samples(&valid_w, &normalizer);
        let pairs = PairContext::new(data.train.species(), &morse, tau_train)?;
        let tc = self.cfg.train.train_config(lambda, seed);
        let ctx = LossContext {
            pairs: &pairs,
            normalizer: &normalizer,
            lambda,
            pairs_per_step: tc.pairs_per_step,
            physics_steps: tc.physics_steps,
        };
        let arch = Architecture::new(
            self.cfg.train.backbone,
            w.history,
            w.horizon,
            data.train.n_atoms(),
            self.cfg.train.hidden,
        )?;
        let init = ModelParams::init(arch, seed);
        let (params, log) = train(init, &train_s, &valid_s, &ctx, &tc)?;
        Ok((TrainedModel { params, normalizer }, log))
    }

    pub fn train(&self) -> Result<(Checkpoint, TrainingLog)> {
        let data = self.load_data()?;
        let (tau_train, _) = self.threshold_tables(&data)?;
        let (model, log) = self.fit_model(&data, &tau_train, self.cfg.train.lambda, self.cfg.train_seed())?;
        fs::create_dir_all(self.run_dir())?;
        tau_train.write_csv(&self.path("thresholds_train.csv"))?;
        let ck = Checkpoint::new(
            data.train.species().to_vec(),
            self.cfg.window,
            model,
            Some("thresholds_train.csv".into()),
            self.cfg.train.lambda,
        );
        ck.save(&self.path("checkpoint.json"))?;
        write_text(&self.path("training_log.csv"), &log.to_csv())?;
        self.snapshot_config()?;
        Ok((ck, log))
    }

    /// Seed history and the ground truth it continues into.
    pub fn rollout_inputs(&self, data: &DataSplit) -> Result<(Trajectory, Trajectory)> {
        let seg = data.segment(self.cfg.rollout.seed_from);
        let h = self.cfg.window.history;
        let start = self.cfg.rollout.start;
        let end = start + h + self.cfg.rollout.total_steps;
        if end > seg.n_frames() {
            return Err(Error::SegmentTooShort {
                segment: match self.cfg.rollout.seed_from {
                    Segment::Train => "train",
                    Segment::Valid => "valid",
                    Segment::Test => "test",
                },
                got: seg.n_frames(),
                needed: end,
            });
        }
        Ok((seg.slice(start, start + h)?, seg.slice(start + h - 1, end)?))
    }

    /// Scores a rollout output (seed history followed by predictions)
    /// against truth starting at the seed's last frame.
    pub fn score_rollout(
        &self,
        pred: &Trajectory,
        truth: &Trajectory,
        tau_eval: &ThresholdTable,
        label: &str,
        log: Option<&RolloutLog>,
    ) -> Result<RolloutScore> {
        let morse = self.cfg.morse_table()?;
        let h = pred.n_frames() + 1 - truth.n_frames();
        if h == 0 || h > pred.n_frames() {
            return Err(Error::HorizonMismatch {
                pred: pred.n_frames(),
                truth: truth.n_frames(),
            });
        }
        let forecast = pred.slice(h - 1, pred.n_frames())?;
        let errors = forecast_errors(&forecast, truth)?;
        let predicted = pred.slice(h, pred.n_frames())?;
        let violations = violations(
            &predicted,
            &morse,
            tau_eval,
            self.cfg.eval.pairs_per_step,
            self.cfg.eval_seed(),
            label,
        )?;
        Ok(RolloutScore {
            errors,
            violations,
            frozen_steps: log.map_or(0, RolloutLog::frozen_steps),
        })
    }

    pub fn rollout(&self, checkpoint: Option<&Path>) -> Result<(Trajectory, RolloutLog)> {
        let ck_path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.path("checkpoint.json"));
        require(&ck_path, "run train first or pass --checkpoint")?;
        let ck = Checkpoint::load(&ck_path)?;
        let data = self.load_data()?;
        if ck.species != data.train.species() {
            return Err(Error::ShapeMismatch("checkpoint species differ from data".into()));
        }
        let (tau_train, _) = self.threshold_tables(&data)?;
        let morse = self.cfg.morse_table()?;
        let pairs = PairContext::new(data.train.species(), &morse, &tau_train)?;
        let (seed_hist, _) = self.rollout_inputs(&data)?;
        let cfg = self.cfg.rollout_config(self.cfg.rollout.pii, self.cfg.rollout_seed());
        let (traj, log) = rollout(&ck.model, &seed_hist, &pairs, &cfg)?;
        fs::create_dir_all(self.run_dir())?;
        write_trajectory(&traj, &self.path(&format!("rollout.{}", self.cfg.data_format.extension())), self.cfg.data_format)?;
        write_text(&self.path("rollout_log.csv"), &log.to_csv())?;
        self.snapshot_config()?;
        Ok((traj, log))
    }

    pub fn evaluate(&self, pred: Option<&Path>, truth: Option<&Path>) -> Result<MetricsReport> {
        let data = self.load_data()?;
        let pred_path = pred
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.path(&format!("rollout.{}", self.cfg.data_format.extension())));
        require(&pred_path, "run rollout first or pass --pred")?;
        let fmt_of = |p: &Path| TrajectoryFormat::from_path(p).unwrap_or(self.cfg.data_format);
        let pred_t = read_trajectory(&pred_path, fmt_of(&pred_path))?;
        let truth_t = match truth {
            Some(p) => {
                require(p, "ground truth")?;
                let full = read_trajectory(p, fmt_of(p))?;
                align_truth(&pred_t, &full, self.cfg.window.history)?
            }
            None => self.rollout_inputs(&data)?.1,
        };
        let (tau_train, tau_test) = self.threshold_tables(&data)?;
        let src = self.cfg.eval.threshold_table;
        let tau = match src {
            ThresholdSource::Train => tau_train,
            ThresholdSource::Test => tau_test,
        };
        let score = self.score_rollout(&pred_t, &truth_t, &tau, src.label(), None)?;
        let mut report = MetricsReport::default();
        report.push_errors(&score.errors);
        report.push_violations(&score.violations, self.cfg.eval_seed());
        write_text(&self.path("metrics.csv"), &report.to_csv())?;
        write_text(&self.path("metrics.txt"), &report.to_text())?;
        self.snapshot_config()?;
        Ok(report)
    }

    /// 2×2 grid of physics-informed training × physics-guarded inference.
    pub fn ablate_with(&self, data: &DataSplit) -> Result<(Vec<AblationRow>, String)> {
        let (tau_train, tau_test) = self.threshold_tables(data)?;
        let tau_eval = match self.cfg.eval.threshold_table {
            ThresholdSource::Train => &tau_train,
            ThresholdSource::Test => &tau_test,
        };
        let label = self.cfg.eval.threshold_table.label();
        let lambda = self.cfg.eval.ablation_lambda.unwrap_or(self.cfg.train.lambda);
        let morse = self.cfg.morse_table()?;
        let pairs = PairContext::new(data.train.species(), &morse, &tau_train)?;
        let (seed_hist, truth) = self.rollout_inputs(data)?;
        let reps = self.cfg.eval.replicates;
        let jobs: Vec<(usize, f64)> = (0..reps).flat_map(|r| [(r, 0.0), (r, lambda)]).collect();
        let models: Vec<Result<TrainedModel>> = jobs
            .par_iter()
            .map(|&(r, lam)| {
                let seed = split_seed(self.cfg.train_seed(), r as u64);
                self.fit_model(data, &tau_train, lam, seed).map(|(m, _)| m)
            })
            .collect();

        let mut detail = String::from(
            "replicate,pit,pif,mae_delta,mse_delta,mae_r,mse_r,V_n,V_r,frozen_steps,status\n",
        );
        let mut acc: Vec<(f64, f64, f64, f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0); 4];
        for r in 0..reps {
            let rseed = split_seed(self.cfg.rollout_seed(), r as u64);
            let mut runs = Vec::new();
            let mut cells = Vec::new();
            for (m_idx, pit) in [(2 * r, false), (2 * r + 1, true)] {
                for pif in [false, true] {
                    let cell = 2 * usize::from(pit) + usize::from(pif);
                    match &models[m_idx] {
                        Ok(m) => {
                            runs.push(RolloutRun {
                                key: format!("r{r}-pit{}-pif{}", pit as u8, pif as u8),
                                model: m,
                                cfg: self.cfg.rollout_config(pif, rseed),
                            });
                            cells.push((cell, pit, pif));
                        }
                        Err(e) => {
                            let _ = writeln!(detail, "{r},{},{},,,,,,,,{}", pit as u8, pif as u8, csv_safe(e));
                        }
                    }
                }
            }
            let outcomes = batch_rollout(&runs, &seed_hist, &pairs);
            for ((cell, pit, pif), out) in cells.into_iter().zip(outcomes) {
                let scored = out.result.and_then(|(traj, log)| {
                    self.score_rollout(&traj, &truth, tau_eval, label, Some(&log))
                });
                match scored {
                    Ok(s) => {
                        let frozen = s.frozen_steps as f64 / self.cfg.rollout.total_steps as f64;
                        let a = &mut acc[cell];
                        a.0 += s.errors.mae_delta;
                        a.1 += s.errors.mse_delta;
                        a.2 += s.errors.mae_r;
                        a.3 += s.errors.mse_r;
                        a.4 += s.violations.v_r;
                        a.5 += frozen;
                        a.6 += 1;
                        let _ = writeln!(
                            detail,
                            "{r},{},{},{},{},{},{},{},{},{},ok",
                            pit as u8,
                            pif as u8,
                            s.errors.mae_delta,
                            s.errors.mse_delta,
                            s.errors.mae_r,
                            s.errors.mse_r,
                            s.violations.v_n,
                            s.violations.v_r,
                            s.frozen_steps
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(detail, "{r},{},{},,,,,,,,{}", pit as u8, pif as u8, csv_safe(&e));
                    }
                }
            }
        }
        let rows = acc
            .iter()
            .enumerate()
            .map(|(cell, a)| {
                let n = a.6.max(1) as f64;
                let nan_if_empty = |v: f64| if a.6 == 0 { f64::NAN } else { v / n };
                AblationRow {
                    pit: cell >= 2,
                    pif: cell % 2 == 1,
                    mae_delta: nan_if_empty(a.0),
                    mse_delta: nan_if_empty(a.1),
                    mae_r: nan_if_empty(a.2),
                    mse_r: nan_if_empty(a.3),
                    v_r: nan_if_empty(a.4),
                    frozen_fraction: nan_if_empty(a.5),
                    runs: a.6,
                }
            })
            .collect();
        Ok((rows, detail))
    }

    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        let data = self.load_data()?;
        let (rows, detail) = self.ablate_with(&data)?;
        write_text(&self.path("ablation.csv"), &ablation_csv(&rows))?;
        write_text(&self.path("ablation_runs.csv"), &detail)?;
        self.snapshot_config()?;
        Ok(rows)
    }

    /// Mean teacher-forced errors over non-overlapping windows of `traj`.
    pub fn window_errors(&self, model: &dyn DisplacementModel, traj: &Trajectory) -> Result<ForecastErrors> {
        let w = WindowSpec::new(model.history(), model.horizon(), model.horizon())?;
        let windows = make_windows(traj, &w)?;
        let mut sum = ForecastErrors { mse_delta: 0.0, mae_delta: 0.0, mse_r: 0.0, mae_r: 0.0 };
        for (k, (x, _)) in windows.iter().enumerate() {
            let last = k * w.stride + w.history - 1;
            let truth = traj.slice(last, last + w.horizon + 1)?;
            let deltas = model.predict(x)?;
            let mut pred = truth.slice(0, 1)?;
            for d in deltas {
                let cur = pred.positions(pred.n_frames() - 1).to_vec();
                pred.push_positions(cur.iter().zip(&d).map(|(r, d)| crate::traj::add(*r, *d)).collect())?;
            }
            let e = forecast_errors(&pred, &truth)?;
            sum.mse_delta += e.mse_delta;
            sum.mae_delta += e.mae_delta;
            sum.mse_r += e.mse_r;
            sum.mae_r += e.mae_r;
        }
        let n = windows.len() as f64;
        Ok(ForecastErrors {
            mse_delta: sum.mse_delta / n,
            mae_delta: sum.mae_delta / n,
            mse_r: sum.mse_r / n,
            mae_r: sum.mae_r / n,
        })
    }

    pub fn sweep_lambda_with(&self, data: &DataSplit) -> Result<Vec<SweepRow>> {
        let (tau_train, tau_test) = self.threshold_tables(data)?;
        let tau_eval = match self.cfg.eval.threshold_table {
            ThresholdSource::Train => &tau_train,
            ThresholdSource::Test => &tau_test,
        };
        let label = self.cfg.eval.threshold_table.label();
        let morse = self.cfg.morse_table()?;
        let pairs = PairContext::new(data.train.species(), &morse, &tau_train)?;
        let (seed_hist, truth) = self.rollout_inputs(data)?;
        let lambdas = &self.cfg.eval.lambdas;
        let reps = self.cfg.eval.replicates;
        let jobs: Vec<(usize, usize)> = (0..lambdas.len())
            .flat_map(|i| (0..reps).map(move |r| (i, r)))
            .collect();
        let cells: Vec<Result<(ForecastErrors, f64, f64)>> = jobs
            .par_iter()
            .map(|&(i, r)| {
                let seed = split_seed(self.cfg.train_seed(), r as u64);
                let (m, _) = self.fit_model(data, &tau_train, lambdas[i], seed)?;
                let w = self.window_errors(&m, &data.test)?;
                let rseed = split_seed(self.cfg.rollout_seed(), r as u64);
                let cfg = self.cfg.rollout_config(self.cfg.rollout.pii, rseed);
                let (traj, log) = rollout(&m, &seed_hist, &pairs, &cfg)?;
                let s = self.score_rollout(&traj, &truth, tau_eval, label, Some(&log))?;
                Ok((s.errors, s.violations.v_r, w.mae_delta))
            })
            .collect();
        let mut rows = Vec::new();
        for (i, &lambda) in lambdas.iter().enumerate() {
            let ok: Vec<&(ForecastErrors, f64, f64)> = cells[i * reps..(i + 1) * reps]
                .iter()
                .filter_map(|c| c.as_ref().ok())
                .collect();
            let n = ok.len() as f64;
            let mean = |f: &dyn Fn(&(ForecastErrors, f64, f64)) -> f64| -> f64 {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|c| f(c)).sum::<f64>() / n
                }
            };
            rows.push(SweepRow {
                lambda,
                mae_delta: mean(&|c| c.0.mae_delta),
                mse_delta: mean(&|c| c.0.mse_delta),
                v_r: mean(&|c| c.1),
                window_mae_delta: mean(&|c| c.2),
                runs: ok.len(),
            });
        }
        Ok(rows)
    }

    pub fn sweep_lambda(&self) -> Result<Vec<SweepRow>> {
        let data = self.load_data()?;
        let rows = self.sweep_lambda_with(&data)?;
        write_text(&self.path("sweep_lambda.csv"), &sweep_csv(&rows))?;
        self.snapshot_config()?;
        Ok(rows)
    }

    pub fn diffusivity_of(&self, traj: &Trajectory) -> Result<Vec<DiffusivityReport>> {
        let e = &self.cfg.eval;
        let end = e.fit_end.unwrap_or((traj.n_frames() / 4).max(e.fit_start + 2));
        let fit = FitWindow { start: e.fit_start, end };
        let mut out = vec![diffusivity(traj, None, fit, e.msd_origins)?];
        for s in traj.distinct_species() {
            out.push(diffusivity(traj, Some(&s), fit, e.msd_origins)?);
        }
        Ok(out)
    }

    pub fn diffusivity(&self, trajectory: Option<&Path>) -> Result<Vec<DiffusivityReport>> {
        let traj = match trajectory {
            Some(p) => {
                require(p, "trajectory")?;
                read_trajectory(p, TrajectoryFormat::from_path(p).unwrap_or(self.cfg.data_format))?
            }
            None => self.load_data()?.test,
        };
        let reports = self.diffusivity_of(&traj)?;
        let mut csv = String::from(
            "species,n_atoms,D_A2_per_fs,D_m2_per_s,slope,intercept,r_squared,fit_start,fit_end\n",
        );
        for r in &reports {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                r.species,
                r.n_atoms,
                r.d_a2_per_fs,
                r.d_m2_per_s,
                r.slope,
                r.intercept,
                r.r_squared,
                r.fit.start,
                r.fit.end
            );
            write_text(&self.path(&format!("msd_{}.csv", r.species)), &r.msd_csv())?;
        }
        write_text(&self.path("diffusivity.csv"), &csv)?;
        self.snapshot_config()?;
        Ok(reports)
    }
}

fn csv_safe(e: &Error) -> String {
    e.to_string().replace([',', '\n'], ";")
}

/// Picks the truth frames matching a rollout output by step index, starting
/// at the last seed frame.
fn align_truth(pred: &Trajectory, full: &Trajectory, history: usize) -> Result<Trajectory> {
    if history == 0 || pred.n_frames() <= history {
        return Err(Error::TrajectoryTooShort {
            needed: history + 1,
            got: pred.n_frames(),
        });
    }
    let anchor = pred.frame(history - 1).step_index;
    let first = full.first_step().ok_or_else(|| Error::EmptyInput("truth".into()))?;
    let offset = anchor - first;
    let len = pred.n_frames() - history + 1;
    if offset < 0 || offset as usize + len > full.n_frames() {
        return Err(Error::HorizonMismatch {
            pred: len - 1,
            truth: full.n_frames().saturating_sub((offset.max(0) as usize) + 1),
        });
    }
    full.slice(offset as usize, offset as usize + len)
}

fn read_energy_samples(path: &Path) -> Result<BTreeMap<PairKey, Vec<(f64, f64)>>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (ci, cj, cd, ce) = (idx("species_i")?, idx("species_j")?, idx("d")?, idx("energy")?);
    let mut out: BTreeMap<PairKey, Vec<(f64, f64)>> = BTreeMap::new();
    for (k, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(parse_err(k + 1, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        let num = |c: usize| {
            f[c].parse::<f64>()
                .map_err(|_| parse_err(k + 1, format!("`{}` is not a number", f[c])))
        };
        out.entry(PairKey::new(f[ci], f[cj]))
            .or_default()
            .push((num(cd)?, num(ce)?));
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("pit,pif,mae_delta,mse_delta,mae_r,mse_r,V_r,frozen_fraction,runs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.pit as u8, r.pif as u8, r.mae_delta, r.mse_delta, r.mae_r, r.mse_r, r.v_r, r.frozen_fraction, r.runs
        );
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                yn(r.pit),
                yn(r.pif),
                format!("{:.6e}", r.mae_delta),
                format!("{:.6e}", r.mse_delta),
                format!("{:.4e}", r.v_r),
                r.runs.to_string(),
            ]
        })
        .collect();
    aligned_table(&["PIT", "PIF", "MAE_delta", "MSE_delta", "V_r", "runs"], &body)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,mae_delta,mse_delta,V_r,window_mae_delta,runs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.lambda, r.mae_delta, r.mse_delta, r.v_r, r.window_mae_delta, r.runs
        );
    }
    s
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.lambda),
                format!("{:.6e}", r.mae_delta),
                format!("{:.4e}", r.v_r),
                format!("{:.6e}", r.window_mae_delta),
                r.runs.to_string(),
            ]
        })
        .collect();
    aligned_table(&["lambda", "MAE_delta", "V_r", "window_MAE_delta", "runs"], &body)
}
