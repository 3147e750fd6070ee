//! C ABI for mdcast.
//!
//! Objects cross the boundary as opaque handles created by `mdcast_*_new`,
//! `*_read` or `*_load` functions and released with the matching `*_free`.
//! Every fallible call returns an [`MdcastStatus`]; on failure a message is
//! available from [`mdcast_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mdcast::forecaster::{Checkpoint, PairContext, TrainedModel};
use mdcast::metrics::{diffusivity, forecast_errors, violations, FitWindow, MsdOrigins};
use mdcast::morse::{compute_thresholds, fit_morse, Granularity, MorseParams, MorseTable, ThresholdTable};
use mdcast::rollout::{rollout, FreezePolicy, RolloutConfig};
use mdcast::traj::{read_trajectory, write_trajectory, Trajectory, TrajectoryFormat};
use mdcast::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdcastStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    ShapeMismatch = 5,
    FitFailed = 6,
    MissingPair = 7,
    Config = 8,
    Runtime = 9,
    Panic = 10,
}

/// Threshold granularity.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdcastGranularity {
    Species = 0,
    Atom = 1,
}

/// Opaque trajectory handle.
pub struct MdcastTrajectory(Trajectory);

/// Opaque Morse parameter table.
pub struct MdcastMorseTable(MorseTable);

/// Opaque per-pair energy threshold table.
pub struct MdcastThresholds(ThresholdTable);

/// Opaque trained forecaster.
pub struct MdcastModel(TrainedModel);

/// Displacement and position errors of a forecast.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MdcastForecastErrors {
    pub mse_delta: f64,
    pub mae_delta: f64,
    pub mse_r: f64,
    pub mae_r: f64,
}

/// Morse parameters `E(d) = depth (1 - exp(-steepness (d - r_eq)))^2 + offset`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MdcastMorseParams {
    pub depth: f64,
    pub steepness: f64,
    pub r_eq: f64,
    pub offset: f64,
}

/// Rollout settings. `window == 0` uses the model horizon.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MdcastRolloutOptions {
    pub total_steps: usize,
    pub window: usize,
    pub pii: bool,
    pub pairs_per_step: usize,
    pub seed: u64,
    /// Freeze only violating atoms instead of the whole frame.
    pub freeze_violating_only: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> MdcastStatus {
    match e {
        Error::Io(_) => MdcastStatus::Io,
        Error::Parse { .. } | Error::InconsistentAtomCount { .. } | Error::Checkpoint(_) => MdcastStatus::Parse,
        Error::ShapeMismatch(_)
        | Error::HorizonMismatch { .. }
        | Error::TrajectoryTooShort { .. }
        | Error::SegmentTooShort { .. } => MdcastStatus::ShapeMismatch,
        Error::FitDiverged { .. } | Error::DegenerateSamples(_) => MdcastStatus::FitFailed,
        Error::MissingPairParams(_) => MdcastStatus::MissingPair,
        Error::Config(_) => MdcastStatus::Config,
        Error::InvalidParams(_)
        | Error::NonPositiveDistance(_)
        | Error::IndexOutOfRange { .. }
        | Error::SelfPair(_)
        | Error::InvalidTrajectory(_)
        | Error::EmptyInput(_)
        | Error::NoAtomsOfSpecies(_)
        | Error::WindowOutOfRange { .. } => MdcastStatus::InvalidArgument,
        _ => MdcastStatus::Runtime,
    }
}

struct Fail(MdcastStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MdcastStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MdcastStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MdcastStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdcastStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MdcastStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn format_of(path: &str) -> TrajectoryFormat {
    TrajectoryFormat::from_path(Path::new(path)).unwrap_or_default()
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next mdcast call on the same thread.
#[no_mangle]
pub extern "C" fn mdcast_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdcast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- trajectories ----

/// Builds a trajectory from `n_frames * n_atoms * 3` positions in Å,
/// frame-major. `species` holds `n_atoms` NUL-terminated labels.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_new(
    species: *const *const c_char,
    n_atoms: usize,
    positions: *const f64,
    n_frames: usize,
    dt_fs: f64,
    out_traj: *mut *mut MdcastTrajectory,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_traj, "out_traj")?;
        if species.is_null() {
            return Err(null("species"));
        }
        if positions.is_null() {
            return Err(null("positions"));
        }
        if n_atoms == 0 {
            return Err(invalid("n_atoms must be positive"));
        }
        let labels = (0..n_atoms)
            .map(|i| str_arg(*species.add(i), "species label").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let flat = std::slice::from_raw_parts(positions, n_frames * n_atoms * 3);
        let frames = flat
            .chunks_exact(n_atoms * 3)
            .map(|f| f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        let t = Trajectory::from_positions(labels, frames, 0, dt_fs)?;
        *slot = Box::into_raw(Box::new(MdcastTrajectory(t)));
        Ok(())
    })
}

/// Reads an extended-XYZ (`.xyz`) or CSV (`.csv`) trajectory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_traj` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_read(
    path: *const c_char,
    out_traj: *mut *mut MdcastTrajectory,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_traj, "out_traj")?;
        let p = str_arg(path, "path")?;
        let t = read_trajectory(Path::new(p), format_of(p))?;
        *slot = Box::into_raw(Box::new(MdcastTrajectory(t)));
        Ok(())
    })
}

/// Writes a trajectory; the format follows the file extension.
///
/// # Safety
/// `traj` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_write(
    traj: *const MdcastTrajectory,
    path: *const c_char,
) -> MdcastStatus {
    guard(|| {
        let t = obj(traj, "traj")?;
        let p = str_arg(path, "path")?;
        write_trajectory(&t.0, Path::new(p), format_of(p))?;
        Ok(())
    })
}

/// Number of frames, or 0 for NULL.
///
/// # Safety
/// `traj` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_n_frames(traj: *const MdcastTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.n_frames())
}

/// Number of atoms, or 0 for NULL.
///
/// # Safety
/// `traj` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_n_atoms(traj: *const MdcastTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.n_atoms())
}

/// Copies frame `frame` into `out_xyz` (`n_atoms * 3` doubles).
///
/// # Safety
/// `out_xyz` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_positions(
    traj: *const MdcastTrajectory,
    frame: usize,
    out_xyz: *mut f64,
    len: usize,
) -> MdcastStatus {
    guard(|| {
        let t = obj(traj, "traj")?;
        if out_xyz.is_null() {
            return Err(null("out_xyz"));
        }
        if frame >= t.0.n_frames() {
            return Err(invalid(format!("frame {frame} out of range for {} frames", t.0.n_frames())));
        }
        if len < t.0.n_atoms() * 3 {
            return Err(invalid(format!("buffer holds {len} doubles, need {}", t.0.n_atoms() * 3)));
        }
        let dst = std::slice::from_raw_parts_mut(out_xyz, len);
        for (k, p) in t.0.positions(frame).iter().enumerate() {
            dst[3 * k..3 * k + 3].copy_from_slice(p);
        }
        Ok(())
    })
}

/// # Safety
/// `traj` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdcast_trajectory_free(traj: *mut MdcastTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

// ---- Morse ----

/// Empty Morse table.
#[no_mangle]
pub extern "C" fn mdcast_morse_table_new() -> *mut MdcastMorseTable {
    Box::into_raw(Box::new(MdcastMorseTable(MorseTable::new())))
}

/// Reads `species_i,species_j,D_e,a,d_e,b` rows.
///
/// # Safety
/// `path` must be NUL-terminated and `out_table` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_morse_table_read(
    path: *const c_char,
    out_table: *mut *mut MdcastMorseTable,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_table, "out_table")?;
        let p = str_arg(path, "path")?;
        let t = MorseTable::read_csv(Path::new(p))?;
        *slot = Box::into_raw(Box::new(MdcastMorseTable(t)));
        Ok(())
    })
}

/// Sets parameters for an unordered species pair.
///
/// # Safety
/// `table` must be a live handle; labels NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mdcast_morse_table_set(
    table: *mut MdcastMorseTable,
    species_i: *const c_char,
    species_j: *const c_char,
    params: MdcastMorseParams,
) -> MdcastStatus {
    guard(|| {
        let t = out(table, "table")?;
        let a = str_arg(species_i, "species_i")?;
        let b = str_arg(species_j, "species_j")?;
        let p = MorseParams::new(params.depth, params.steepness, params.r_eq, params.offset)?;
        t.0.insert(a, b, p);
        Ok(())
    })
}

/// Pair energy at distance `d` Å.
///
/// # Safety
/// `table` must be a live handle; labels NUL-terminated; `out_energy` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_morse_energy(
    table: *const MdcastMorseTable,
    species_i: *const c_char,
    species_j: *const c_char,
    d: f64,
    out_energy: *mut f64,
) -> MdcastStatus {
    guard(|| {
        let t = obj(table, "table")?;
        let slot = out(out_energy, "out_energy")?;
        let a = str_arg(species_i, "species_i")?;
        let b = str_arg(species_j, "species_j")?;
        *slot = mdcast::morse::morse_energy(t.0.get(a, b)?, d)?;
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdcast_morse_table_free(table: *mut MdcastMorseTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Least-squares Morse fit to `n` (distance, energy) samples.
///
/// # Safety
/// `d` and `energy` must hold `n` doubles; out pointers writable (`out_rmse` may be NULL).
#[no_mangle]
pub unsafe extern "C" fn mdcast_fit_morse(
    d: *const f64,
    energy: *const f64,
    n: usize,
    out_params: *mut MdcastMorseParams,
    out_rmse: *mut f64,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        if d.is_null() {
            return Err(null("d"));
        }
        if energy.is_null() {
            return Err(null("energy"));
        }
        let ds = std::slice::from_raw_parts(d, n);
        let es = std::slice::from_raw_parts(energy, n);
        let samples: Vec<(f64, f64)> = ds.iter().copied().zip(es.iter().copied()).collect();
        let (p, rep) = fit_morse(&samples, None)?;
        *slot = MdcastMorseParams {
            depth: p.depth,
            steepness: p.steepness,
            r_eq: p.r_eq,
            offset: p.offset,
        };
        if let Some(r) = out_rmse.as_mut() {
            *r = rep.rmse;
        }
        Ok(())
    })
}

// ---- thresholds ----

/// Per-pair maximum energy over `traj`.
///
/// # Safety
/// Handles must be live; `out_thresholds` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_thresholds_compute(
    traj: *const MdcastTrajectory,
    table: *const MdcastMorseTable,
    granularity: MdcastGranularity,
    out_thresholds: *mut *mut MdcastThresholds,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_thresholds, "out_thresholds")?;
        let t = obj(traj, "traj")?;
        let m = obj(table, "table")?;
        let g = match granularity {
            MdcastGranularity::Species => Granularity::Species,
            MdcastGranularity::Atom => Granularity::Atom,
        };
        let th = compute_thresholds(&t.0, &m.0, g)?;
        *slot = Box::into_raw(Box::new(MdcastThresholds(th)));
        Ok(())
    })
}

/// Threshold for atoms `i`, `j` of the given species.
///
/// # Safety
/// `thresholds` must be live; labels NUL-terminated; `out_tau` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_thresholds_get(
    thresholds: *const MdcastThresholds,
    i: usize,
    j: usize,
    species_i: *const c_char,
    species_j: *const c_char,
    out_tau: *mut f64,
) -> MdcastStatus {
    guard(|| {
        let th = obj(thresholds, "thresholds")?;
        let slot = out(out_tau, "out_tau")?;
        let a = str_arg(species_i, "species_i")?;
        let b = str_arg(species_j, "species_j")?;
        *slot = th.0.tau(i, j, a, b)?;
        Ok(())
    })
}

/// Writes the table as `key,tau` CSV.
///
/// # Safety
/// `thresholds` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mdcast_thresholds_write(
    thresholds: *const MdcastThresholds,
    path: *const c_char,
) -> MdcastStatus {
    guard(|| {
        let th = obj(thresholds, "thresholds")?;
        let p = str_arg(path, "path")?;
        th.0.write_csv(Path::new(p))?;
        Ok(())
    })
}

/// Reads a `key,tau` CSV.
///
/// # Safety
/// `path` must be NUL-terminated and `out_thresholds` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_thresholds_read(
    path: *const c_char,
    out_thresholds: *mut *mut MdcastThresholds,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_thresholds, "out_thresholds")?;
        let p = str_arg(path, "path")?;
        let th = ThresholdTable::read_csv(Path::new(p))?;
        *slot = Box::into_raw(Box::new(MdcastThresholds(th)));
        Ok(())
    })
}

/// # Safety
/// `thresholds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdcast_thresholds_free(thresholds: *mut MdcastThresholds) {
    if !thresholds.is_null() {
        drop(Box::from_raw(thresholds));
    }
}

// ---- model and rollout ----

/// Loads a JSON checkpoint written by `mdcast train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_model_load(
    path: *const c_char,
    out_model: *mut *mut MdcastModel,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(p))?;
        *slot = Box::into_raw(Box::new(MdcastModel(ck.model)));
        Ok(())
    })
}

/// History length H, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdcast_model_history(model: *const MdcastModel) -> usize {
    use mdcast::forecaster::DisplacementModel;
    model.as_ref().map_or(0, |m| m.0.history())
}

/// Horizon length L, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdcast_model_horizon(model: *const MdcastModel) -> usize {
    use mdcast::forecaster::DisplacementModel;
    model.as_ref().map_or(0, |m| m.0.horizon())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdcast_model_free(model: *mut MdcastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Default rollout options.
#[no_mangle]
pub extern "C" fn mdcast_rollout_options_default() -> MdcastRolloutOptions {
    let d = RolloutConfig::default();
    MdcastRolloutOptions {
        total_steps: d.total_steps,
        window: 0,
        pii: d.pii,
        pairs_per_step: d.pairs_per_step,
        seed: d.seed,
        freeze_violating_only: false,
    }
}

/// Autoregressive rollout from the last `H` frames of `seed_history`. The
/// output holds the seed frames followed by `total_steps` predicted frames.
/// `thresholds` is the rejection table. `out_frozen` (may be NULL)
/// receives the number of frozen steps.
///
/// # Safety
/// Handles must be live; `out_traj` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_rollout(
    model: *const MdcastModel,
    seed_history: *const MdcastTrajectory,
    table: *const MdcastMorseTable,
    thresholds: *const MdcastThresholds,
    options: MdcastRolloutOptions,
    out_traj: *mut *mut MdcastTrajectory,
    out_frozen: *mut usize,
) -> MdcastStatus {
    guard(|| {
        let slot = out(out_traj, "out_traj")?;
        let m = obj(model, "model")?;
        let h = obj(seed_history, "seed_history")?;
        let mt = obj(table, "table")?;
        let th = obj(thresholds, "thresholds")?;
        let pairs = PairContext::new(h.0.species(), &mt.0, &th.0)?;
        let cfg = RolloutConfig {
            total_steps: options.total_steps,
            window: (options.window > 0).then_some(options.window),
            pii: options.pii,
            pairs_per_step: options.pairs_per_step,
            seed: options.seed,
            freeze_policy: if options.freeze_violating_only {
                FreezePolicy::FreezeViolating
            } else {
                FreezePolicy::FreezeAll
            },
        };
        let (traj, log) = rollout(&m.0, &h.0, &pairs, &cfg)?;
        if let Some(f) = out_frozen.as_mut() {
            *f = log.frozen_steps();
        }
        *slot = Box::into_raw(Box::new(MdcastTrajectory(traj)));
        Ok(())
    })
}

// ---- metrics ----

/// Errors of `pred` against `truth`; frame 0 is the shared anchor.
///
/// # Safety
/// Handles must be live; `out_errors` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_forecast_errors(
    pred: *const MdcastTrajectory,
    truth: *const MdcastTrajectory,
    out_errors: *mut MdcastForecastErrors,
) -> MdcastStatus {
    guard(|| {
        let p = obj(pred, "pred")?;
        let t = obj(truth, "truth")?;
        let slot = out(out_errors, "out_errors")?;
        let e = forecast_errors(&p.0, &t.0)?;
        *slot = MdcastForecastErrors {
            mse_delta: e.mse_delta,
            mae_delta: e.mae_delta,
            mse_r: e.mse_r,
            mae_r: e.mae_r,
        };
        Ok(())
    })
}

/// Violation count and rate over frames `1..` of `traj`, sampling
/// `pairs_per_step` pairs per step.
///
/// # Safety
/// Handles must be live; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_violations(
    traj: *const MdcastTrajectory,
    table: *const MdcastMorseTable,
    thresholds: *const MdcastThresholds,
    pairs_per_step: usize,
    seed: u64,
    out_count: *mut usize,
    out_rate: *mut f64,
) -> MdcastStatus {
    guard(|| {
        let t = obj(traj, "traj")?;
        let m = obj(table, "table")?;
        let th = obj(thresholds, "thresholds")?;
        let n = out(out_count, "out_count")?;
        let r = out(out_rate, "out_rate")?;
        let rep = violations(&t.0, &m.0, &th.0, pairs_per_step, seed, "custom")?;
        *n = rep.v_n;
        *r = rep.v_r;
        Ok(())
    })
}

/// Diffusion coefficient (Å²/fs) from a multi-origin MSD fitted over lags
/// `fit_start..fit_end`. `species` may be NULL for all atoms.
///
/// # Safety
/// `traj` must be live; `species` NULL or NUL-terminated; `out_d` writable.
#[no_mangle]
pub unsafe extern "C" fn mdcast_diffusivity(
    traj: *const MdcastTrajectory,
    species: *const c_char,
    fit_start: usize,
    fit_end: usize,
    out_d: *mut f64,
) -> MdcastStatus {
    guard(|| {
        let t = obj(traj, "traj")?;
        let slot = out(out_d, "out_d")?;
        let s = if species.is_null() { None } else { Some(str_arg(species, "species")?) };
        let fit = FitWindow { start: fit_start, end: fit_end };
        *slot = diffusivity(&t.0, s, fit, MsdOrigins::Multiple)?.d_a2_per_fs;
        Ok(())
    })
}
