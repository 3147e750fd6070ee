use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mdcast_ffi::*;

fn last_error() -> String {
    let p = mdcast_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Two atoms drifting apart along x, one frame per fs.
fn pair_traj(n_frames: usize) -> *mut MdcastTrajectory {
    let a = c("A");
    let b = c("B");
    let species = [a.as_ptr(), b.as_ptr()];
    let mut pos = Vec::new();
    for t in 0..n_frames {
        pos.extend_from_slice(&[0.0, 0.0, 0.0, 2.0 + 0.01 * t as f64, 0.0, 0.0]);
    }
    let mut out = ptr::null_mut();
    let s = unsafe { mdcast_trajectory_new(species.as_ptr(), 2, pos.as_ptr(), n_frames, 1.0, &mut out) };
    assert_eq!(s, MdcastStatus::Ok);
    out
}

fn table() -> *mut MdcastMorseTable {
    let t = mdcast_morse_table_new();
    let p = MdcastMorseParams { depth: 0.5, steepness: 1.2, r_eq: 2.2, offset: 0.0 };
    for (a, b) in [("A", "A"), ("A", "B"), ("B", "B")] {
        let s = unsafe { mdcast_morse_table_set(t, c(a).as_ptr(), c(b).as_ptr(), p) };
        assert_eq!(s, MdcastStatus::Ok);
    }
    t
}

#[test]
fn trajectory_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("t.xyz").to_str().unwrap());
    let t = pair_traj(5);
    unsafe {
        assert_eq!(mdcast_trajectory_n_frames(t), 5);
        assert_eq!(mdcast_trajectory_n_atoms(t), 2);
        assert_eq!(mdcast_trajectory_write(t, path.as_ptr()), MdcastStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mdcast_trajectory_read(path.as_ptr(), &mut back), MdcastStatus::Ok);
        let mut xyz = [0.0; 6];
        assert_eq!(mdcast_trajectory_positions(back, 4, xyz.as_mut_ptr(), 6), MdcastStatus::Ok);
        assert!((xyz[3] - 2.04).abs() < 1e-12);
        assert_eq!(
            mdcast_trajectory_positions(back, 5, xyz.as_mut_ptr(), 6),
            MdcastStatus::InvalidArgument
        );
        assert!(last_error().contains("out of range"));
        mdcast_trajectory_free(back);
        mdcast_trajectory_free(t);
    }
}

#[test]
fn null_handles_report_null_pointer() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(mdcast_trajectory_read(ptr::null(), &mut out), MdcastStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(mdcast_trajectory_n_frames(ptr::null()), 0);
        mdcast_trajectory_free(ptr::null_mut());
        mdcast_morse_table_free(ptr::null_mut());
        mdcast_thresholds_free(ptr::null_mut());
        mdcast_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_io_error_and_success_clears_message() {
    let mut out = ptr::null_mut();
    unsafe {
        let s = mdcast_trajectory_read(c("/nonexistent/x.xyz").as_ptr(), &mut out);
        assert_eq!(s, MdcastStatus::Io);
        assert!(out.is_null());
        let t = pair_traj(2);
        assert!(mdcast_last_error().is_null());
        mdcast_trajectory_free(t);
    }
}

#[test]
fn morse_fit_recovers_parameters() {
    let (de, a, re, b) = (0.7, 1.4, 2.3, -0.2);
    let d: Vec<f64> = (0..20).map(|k| 1.6 + 0.15 * k as f64).collect();
    let e: Vec<f64> = d.iter().map(|x| de * (1.0 - (-a * (x - re)).exp()).powi(2) + b).collect();
    let mut p = MdcastMorseParams::default();
    let mut rmse = f64::NAN;
    let s = unsafe { mdcast_fit_morse(d.as_ptr(), e.as_ptr(), d.len(), &mut p, &mut rmse) };
    assert_eq!(s, MdcastStatus::Ok);
    for (got, want) in [(p.depth, de), (p.steepness, a), (p.r_eq, re), (p.offset, b)] {
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(rmse < 1e-9);

    let flat = [2.0; 6];
    let s = unsafe { mdcast_fit_morse(flat.as_ptr(), e.as_ptr(), 6, &mut p, ptr::null_mut()) };
    assert_eq!(s, MdcastStatus::FitFailed);
}

#[test]
fn energy_and_invalid_params() {
    let t = table();
    let mut e = f64::NAN;
    unsafe {
        assert_eq!(mdcast_morse_energy(t, c("B").as_ptr(), c("A").as_ptr(), 2.2, &mut e), MdcastStatus::Ok);
        assert_eq!(e, 0.0);
        assert_eq!(
            mdcast_morse_energy(t, c("A").as_ptr(), c("C").as_ptr(), 2.2, &mut e),
            MdcastStatus::MissingPair
        );
        let bad = MdcastMorseParams { depth: -1.0, steepness: 1.0, r_eq: 1.0, offset: 0.0 };
        assert_eq!(
            mdcast_morse_table_set(t, c("A").as_ptr(), c("A").as_ptr(), bad),
            MdcastStatus::InvalidArgument
        );
        mdcast_morse_table_free(t);
    }
}

#[test]
fn thresholds_bound_reference_and_metrics_agree() {
    let traj = pair_traj(30);
    let t = table();
    unsafe {
        let mut th = ptr::null_mut();
        assert_eq!(
            mdcast_thresholds_compute(traj, t, MdcastGranularity::Species, &mut th),
            MdcastStatus::Ok
        );
        let mut tau = 0.0;
        assert_eq!(mdcast_thresholds_get(th, 0, 1, c("A").as_ptr(), c("B").as_ptr(), &mut tau), MdcastStatus::Ok);
        let want = (0..30)
            .map(|t| 2.0 + 0.01 * t as f64)
            .map(|d: f64| 0.5 * (1.0 - (-1.2 * (d - 2.2)).exp()).powi(2))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((tau - want).abs() < 1e-12, "{tau} vs {want}");

        let (mut n, mut r) = (99, f64::NAN);
        assert_eq!(mdcast_violations(traj, t, th, 10, 0, &mut n, &mut r), MdcastStatus::Ok);
        assert_eq!(n, 0);
        assert_eq!(r, 0.0);

        let mut err = MdcastForecastErrors::default();
        assert_eq!(mdcast_forecast_errors(traj, traj, &mut err), MdcastStatus::Ok);
        assert_eq!(err.mae_r, 0.0);

        let mut d = f64::NAN;
        assert_eq!(mdcast_diffusivity(traj, c("A").as_ptr(), 1, 10, &mut d), MdcastStatus::Ok);
        assert_eq!(d, 0.0);

        mdcast_thresholds_free(th);
        mdcast_morse_table_free(t);
        mdcast_trajectory_free(traj);
    }
}

#[test]
fn model_load_reports_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    std::fs::write(&p, "{ not json").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { mdcast_model_load(c(p.to_str().unwrap()).as_ptr(), &mut m) };
    assert_ne!(s, MdcastStatus::Ok);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn rollout_options_default_is_guarded() {
    let o = mdcast_rollout_options_default();
    assert!(o.pii);
    assert_eq!(o.window, 0);
    assert!(!o.freeze_violating_only);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(mdcast_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_parses_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mdcast.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["mdcast_rollout", "mdcast_fit_morse", "MDCAST_STATUS_NULL_POINTER", "mdcast_last_error"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(status) = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .status()
        else {
            eprintln!("{cc} not available, skipping compile check");
            continue;
        };
        assert!(status.success(), "{cc} rejected the header");
    }
}

#[test]
fn rollout_through_checkpoint() {
    use mdcast::pipeline::{Pipeline, PipelineConfig};
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
seed = 5
out_dir = "{}"
[simgen]
n_atoms = 4
species_counts = {{ A = 2, B = 2 }}
n_steps = 400
[window]
H = 4
L = 2
[train]
backbone = "linear"
max_epochs = 2
"#,
        dir.path().display()
    );
    let p = Pipeline::new(PipelineConfig::from_toml_str(&text, &[]).unwrap()).unwrap();
    let (data, _) = p.gen_data().unwrap();
    p.train().unwrap();
    let run = p.run_dir();
    let seed_path = c(run.join("data/test.xyz").to_str().unwrap());
    let ck = c(run.join("checkpoint.json").to_str().unwrap());
    let t = mdcast_morse_table_new();
    for row in &p.cfg.morse.pairs {
        let prm = MdcastMorseParams { depth: row.depth, steepness: row.a, r_eq: row.d_e, offset: row.b };
        unsafe { mdcast_morse_table_set(t, c(&row.species_i).as_ptr(), c(&row.species_j).as_ptr(), prm) };
    }
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mdcast_model_load(ck.as_ptr(), &mut model), MdcastStatus::Ok, "{}", last_error());
        assert_eq!(mdcast_model_history(model), 4);
        assert_eq!(mdcast_model_horizon(model), 2);
        let train_path = c(run.join("data/train.xyz").to_str().unwrap());
        let mut train = ptr::null_mut();
        assert_eq!(mdcast_trajectory_read(train_path.as_ptr(), &mut train), MdcastStatus::Ok);
        let mut th = ptr::null_mut();
        assert_eq!(mdcast_thresholds_compute(train, t, MdcastGranularity::Species, &mut th), MdcastStatus::Ok);
        let mut seed = ptr::null_mut();
        assert_eq!(mdcast_trajectory_read(seed_path.as_ptr(), &mut seed), MdcastStatus::Ok);
        let mut opts = mdcast_rollout_options_default();
        opts.total_steps = 50;
        opts.pairs_per_step = 6;
        let mut out = ptr::null_mut();
        let mut frozen = usize::MAX;
        assert_eq!(mdcast_rollout(model, seed, t, th, opts, &mut out, &mut frozen), MdcastStatus::Ok, "{}", last_error());
        assert_eq!(mdcast_trajectory_n_frames(out), mdcast_trajectory_n_frames(seed) + 50);
        assert!(frozen <= 50);
        let (mut n, mut r) = (usize::MAX, f64::NAN);
        assert_eq!(mdcast_violations(out, t, th, 6, 1, &mut n, &mut r), MdcastStatus::Ok);
        assert_eq!(n, 0, "guarded rollout violated the rejection table");
        assert_eq!(data.test.n_atoms(), mdcast_trajectory_n_atoms(out));
        for h in [out, seed, train] {
            mdcast_trajectory_free(h);
        }
        mdcast_thresholds_free(th);
        mdcast_model_free(model);
        mdcast_morse_table_free(t);
    }
}
