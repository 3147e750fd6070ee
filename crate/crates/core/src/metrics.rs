//! Forecast accuracy, physical-violation counts and diffusivity.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::PairContext;
use crate::morse::{MorseTable, ThresholdTable};
use crate::traj::{norm, norm2, sub, Trajectory};

/// 1 Å²/fs in m²/s.
pub const A2_PER_FS_TO_M2_PER_S: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastErrors {
    pub mse_delta: f64,
    pub mae_delta: f64,
    pub mse_r: f64,
    pub mae_r: f64,
}

/// Errors over a forecast of `L` steps.
///
/// Both trajectories hold `L + 1` frames; frame 0 is the anchor the forecast
/// starts from and is excluded from the position errors. Norms are per-atom
/// Euclidean, averaged over `L · N`.
pub fn forecast_errors(pred: &Trajectory, truth: &Trajectory) -> Result<ForecastErrors> {
    if pred.n_atoms() != truth.n_atoms() {
        return Err(Error::ShapeMismatch(format!(
            "pred has {} atoms, truth has {}",
            pred.n_atoms(),
            truth.n_atoms()
        )));
    }
    if pred.n_frames() != truth.n_frames() {
        return Err(Error::HorizonMismatch {
            pred: pred.n_frames().saturating_sub(1),
            truth: truth.n_frames().saturating_sub(1),
        });
    }
    if pred.n_frames() < 2 {
        return Err(Error::TrajectoryTooShort {
            needed: 2,
            got: pred.n_frames(),
        });
    }
    let n = pred.n_atoms();
    let l = pred.n_frames() - 1;
    let (mut sd, mut ad, mut sr, mut ar) = (0.0, 0.0, 0.0, 0.0);
    for t in 1..=l {
        let (p0, p1) = (pred.positions(t - 1), pred.positions(t));
        let (q0, q1) = (truth.positions(t - 1), truth.positions(t));
        for i in 0..n {
            let e = sub(sub(p1[i], p0[i]), sub(q1[i], q0[i]));
            sd += norm2(e);
            ad += norm(e);
            let e = sub(p1[i], q1[i]);
            sr += norm2(e);
            ar += norm(e);
        }
    }
    let c = (l * n) as f64;
    Ok(ForecastErrors {
        mse_delta: sd / c,
        mae_delta: ad / c,
        mse_r: sr / c,
        mae_r: ar / c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub v_n: usize,
    pub v_r: f64,
    pub per_step: Vec<usize>,
    /// Steps evaluated.
    pub horizon: usize,
    /// Pairs checked per step.
    pub pairs_per_step: usize,
    pub threshold_table: String,
}

pub fn violation_rate(v_n: usize, horizon: usize, pairs_per_step: usize) -> f64 {
    if horizon == 0 || pairs_per_step == 0 {
        return 0.0;
    }
    v_n as f64 / (horizon * pairs_per_step) as f64
}

/// Counts sampled pairs strictly above threshold in every frame of `traj`.
/// `M` is clamped to the number of pairs.
pub fn violations(
    traj: &Trajectory,
    morse: &MorseTable,
    thresholds: &ThresholdTable,
    pairs_per_step: usize,
    seed: u64,
    table_label: &str,
) -> Result<ViolationReport> {
    if pairs_per_step == 0 {
        return Err(Error::Config("violations: M must be >= 1".into()));
    }
    let ctx = PairContext::new(traj.species(), morse, thresholds)?;
    let m = pairs_per_step.min(ctx.n_pairs());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_step: Vec<usize> = (0..traj.n_frames())
        .map(|t| {
            let pos = traj.positions(t);
            ctx.sample(m, &mut rng)
                .into_iter()
                .filter(|&k| ctx.energy(k, pos) > ctx.tau(k))
                .count()
        })
        .collect();
    let v_n = per_step.iter().sum();
    Ok(ViolationReport {
        v_n,
        v_r: violation_rate(v_n, per_step.len(), m),
        horizon: per_step.len(),
        pairs_per_step: m,
        per_step,
        threshold_table: table_label.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsdOrigins {
    /// Average over every available time origin.
    #[default]
    Multiple,
    /// Origin at frame 0 only.
    Single,
}

/// Lag range `start..end` (in frames) used for the linear fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitWindow {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityReport {
    pub species: String,
    pub n_atoms: usize,
    /// `(t_fs, msd_A2)` for lags `0..n_frames`.
    pub msd: Vec<(f64, f64)>,
    pub fit: FitWindow,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub d_a2_per_fs: f64,
    pub d_m2_per_s: f64,
}

impl DiffusivityReport {
    pub fn msd_csv(&self) -> String {
        let mut s = String::from("t_fs,msd_A2\n");
        for (t, m) in &self.msd {
            let _ = writeln!(s, "{t},{m}");
        }
        s
    }
}

pub fn msd_curve(traj: &Trajectory, atoms: &[usize], origins: MsdOrigins) -> Vec<f64> {
    let t_len = traj.n_frames();
    (0..t_len)
        .map(|lag| {
            let n_orig = match origins {
                MsdOrigins::Multiple => t_len - lag,
                MsdOrigins::Single => 1,
            };
            let mut acc = 0.0;
            for t0 in 0..n_orig {
                let (a, b) = (traj.positions(t0), traj.positions(t0 + lag));
                for &i in atoms {
                    acc += norm2(sub(b[i], a[i]));
                }
            }
            acc / (n_orig * atoms.len()) as f64
        })
        .collect()
}

/// Least-squares line through `(x, y)`; returns slope, intercept, R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let r = b - (slope * a + intercept);
        ss_res += r * r;
        ss_tot += (b - my) * (b - my);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Einstein-relation diffusivity for one species, or all atoms when
/// `species` is `None`.
pub fn diffusivity(
    traj: &Trajectory,
    species: Option<&str>,
    fit: FitWindow,
    origins: MsdOrigins,
) -> Result<DiffusivityReport> {
    let (label, atoms) = match species {
        Some(s) => (s.to_string(), traj.atoms_of(s)),
        None => ("all".to_string(), (0..traj.n_atoms()).collect()),
    };
    if atoms.is_empty() {
        return Err(Error::NoAtomsOfSpecies(label));
    }
    if fit.end > traj.n_frames() || fit.start + 2 > fit.end {
        return Err(Error::WindowOutOfRange {
            start: fit.start,
            end: fit.end,
            n_frames: traj.n_frames(),
        });
    }
    let dt = traj.dt_fs();
    let curve = msd_curve(traj, &atoms, origins);
    let xs: Vec<f64> = (fit.start..fit.end).map(|k| k as f64 * dt).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &curve[fit.start..fit.end]);
    let d = slope / 6.0;
    Ok(DiffusivityReport {
        species: label,
        n_atoms: atoms.len(),
        msd: curve.iter().enumerate().map(|(k, m)| (k as f64 * dt, *m)).collect(),
        fit,
        slope,
        intercept,
        r_squared,
        d_a2_per_fs: d,
        d_m2_per_s: d * A2_PER_FS_TO_M2_PER_S,
    })
}

/// One report per distinct species, in sorted order.
pub fn diffusivity_by_species(
    traj: &Trajectory,
    fit: FitWindow,
    origins: MsdOrigins,
) -> Result<Vec<DiffusivityReport>> {
    traj.distinct_species()
        .iter()
        .map(|s| diffusivity(traj, Some(s), fit, origins))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub units: String,
    pub threshold_table: String,
    pub m: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push_errors(&mut self, e: &ForecastErrors) {
        for (name, v, u) in [
            ("mse_delta", e.mse_delta, "A^2"),
            ("mae_delta", e.mae_delta, "A"),
            ("mse_r", e.mse_r, "A^2"),
            ("mae_r", e.mae_r, "A"),
        ] {
            self.rows.push(MetricRow {
                metric: name.into(),
                value: v,
                units: u.into(),
                threshold_table: String::new(),
                m: None,
                seed: None,
            });
        }
    }

    pub fn push_violations(&mut self, v: &ViolationReport, seed: u64) {
        for (name, val, u) in [("V_n", v.v_n as f64, "count"), ("V_r", v.v_r, "fraction")] {
            self.rows.push(MetricRow {
                metric: name.into(),
                value: val,
                units: u.into(),
                threshold_table: v.threshold_table.clone(),
                m: Some(v.pairs_per_step),
                seed: Some(seed),
            });
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,units,threshold_table,M,seed\n");
        for r in &self.rows {
            let m = r.m.map(|v| v.to_string()).unwrap_or_default();
            let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.metric, r.value, r.units, r.threshold_table, m, seed
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.metric.clone(),
                    format!("{:.6e}", r.value),
                    r.units.clone(),
                    r.threshold_table.clone(),
                ]
            })
            .collect();
        aligned_table(&["metric", "value", "units", "table"], &rows)
    }
}

/// Left-aligned plain-text table.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |cells: Vec<&str>, s: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        s.push_str(parts.join("  ").trim_end());
        s.push('\n');
    };
    line(header.to_vec(), &mut s);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut s);
    }
    s
}
