//! Supervised windows over a trajectory.
//!
//! Feature row for step `k` holds, per atom and in atom-major order,
//! `[Px, Py, Pz, Δx, Δy, Δz]` where `Δ` is the displacement that led into
//! step `k` (`r_k - r_{k-1}`, zero for the first frame). A window whose last
//! feature row is step `e` targets the next `L` displacements
//! `Δ_e .. Δ_{e+L-1}` with `Δ_k = r_{k+1} - r_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{sub, Trajectory, Vec3};

/// Columns per atom in a feature row.
pub const FEATURE_COLS_PER_ATOM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(rename = "H")]
    pub history: usize,
    #[serde(rename = "L")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Z-score features and targets with train statistics.
    #[serde(default = "default_normalize")]
    pub normalize: bool,
}

fn default_stride() -> usize {
    1
}

fn default_normalize() -> bool {
    true
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history: 64,
            horizon: 16,
            stride: 1,
            normalize: true,
        }
    }
}

impl WindowSpec {
    pub fn new(history: usize, horizon: usize, stride: usize) -> Result<Self> {
        let spec = Self {
            history,
            horizon,
            stride,
            normalize: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window: H, L and stride must be at least 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Minimum number of frames that yields one window.
    pub fn min_frames(&self) -> usize {
        self.history + self.horizon
    }

    pub fn window_count(&self, n_frames: usize) -> usize {
        if n_frames < self.min_frames() {
            0
        } else {
            (n_frames - self.min_frames()) / self.stride + 1
        }
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `H x 6N` input window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow(pub Matrix);

/// `L x 3N` displacement window.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWindow(pub Matrix);

impl FeatureWindow {
    pub fn n_atoms(&self) -> usize {
        self.0.cols / FEATURE_COLS_PER_ATOM
    }

    /// Positions stored in the last row.
    pub fn last_positions(&self) -> Vec<Vec3> {
        let row = self.0.row(self.0.rows - 1);
        row.chunks_exact(FEATURE_COLS_PER_ATOM)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

impl TargetWindow {
    pub fn step(&self, l: usize) -> Vec<Vec3> {
        self.0
            .row(l)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

/// Writes one feature row for `positions` and the displacement that led to them.
pub fn write_feature_row(out: &mut [f64], positions: &[Vec3], lag_delta: &[Vec3]) {
    for (i, (p, d)) in positions.iter().zip(lag_delta).enumerate() {
        let c = &mut out[i * FEATURE_COLS_PER_ATOM..(i + 1) * FEATURE_COLS_PER_ATOM];
        c[..3].copy_from_slice(p);
        c[3..].copy_from_slice(d);
    }
}

pub fn make_windows(
    traj: &Trajectory,
    spec: &WindowSpec,
) -> Result<Vec<(FeatureWindow, TargetWindow)>> {
    spec.validate()?;
    let t = traj.n_frames();
    if t < spec.min_frames() {
        return Err(Error::TrajectoryTooShort {
            needed: spec.min_frames(),
            got: t,
        });
    }
    let n = traj.n_atoms();
    let zero = vec![[0.0; 3]; n];
    let lag = |k: usize| -> Vec<Vec3> {
        if k == 0 {
            zero.clone()
        } else {
            traj.positions(k)
                .iter()
                .zip(traj.positions(k - 1))
                .map(|(a, b)| sub(*a, *b))
                .collect()
        }
    };

    let count = spec.window_count(t);
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * spec.stride;
        let mut x = Matrix::zeros(spec.history, n * FEATURE_COLS_PER_ATOM);
        for h in 0..spec.history {
            let k = start + h;
            write_feature_row(x.row_mut(h), traj.positions(k), &lag(k));
        }
        let last = start + spec.history - 1;
        let mut y = Matrix::zeros(spec.horizon, 3 * n);
        for l in 0..spec.horizon {
            let row = y.row_mut(l);
            let a = traj.positions(last + l);
            let b = traj.positions(last + l + 1);
            for i in 0..n {
                row[3 * i..3 * i + 3].copy_from_slice(&sub(b[i], a[i]));
            }
        }
        out.push((FeatureWindow(x), TargetWindow(y)));
    }
    Ok(out)
}

const SIGMA_FLOOR: f64 = 1e-8;

/// Per-column z-score statistics of the feature matrix.
///
/// Targets share the statistics of the matching displacement columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Pass-through statistics (mean 0, std 1) for `n_atoms`.
    pub fn identity(n_atoms: usize) -> Self {
        Self {
            mean: vec![0.0; n_atoms * FEATURE_COLS_PER_ATOM],
            std: vec![1.0; n_atoms * FEATURE_COLS_PER_ATOM],
        }
    }

    pub fn fit(windows: &[(FeatureWindow, TargetWindow)]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::EmptyInput("no windows to fit the normalizer".into()))?;
        let cols = first.0 .0.cols;
        let mut sum = vec![0.0; cols];
        let mut count = 0usize;
        for (x, _) in windows {
            if x.0.cols != cols {
                return Err(Error::ShapeMismatch("windows differ in width".into()));
            }
            for r in 0..x.0.rows {
                for (s, v) in sum.iter_mut().zip(x.0.row(r)) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; cols];
        for (x, _) in windows {
            for r in 0..x.0.rows {
                for ((v, m), x) in var.iter_mut().zip(&mean).zip(x.0.row(r)) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(SIGMA_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn n_atoms(&self) -> usize {
        self.mean.len() / FEATURE_COLS_PER_ATOM
    }

    /// Feature column holding displacement component `c` of atom `i`.
    #[inline]
    fn delta_col(target_col: usize) -> usize {
        let (i, c) = (target_col / 3, target_col % 3);
        i * FEATURE_COLS_PER_ATOM + 3 + c
    }

    pub fn apply_features(&self, x: &FeatureWindow) -> Vec<f64> {
        let cols = self.mean.len();
        x.0.data
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let c = k % cols;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    pub fn invert_features(&self, z: &[f64], rows: usize) -> FeatureWindow {
        let cols = self.mean.len();
        let data = z
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let c = k % cols;
                v * self.std[c] + self.mean[c]
            })
            .collect();
        FeatureWindow(Matrix { rows, cols, data })
    }

    pub fn apply_targets(&self, y: &TargetWindow) -> Vec<f64> {
        let cols = y.0.cols;
        y.0.data
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let f = Self::delta_col(k % cols);
                (v - self.mean[f]) / self.std[f]
            })
            .collect()
    }

    pub fn invert_targets(&self, z: &[f64], rows: usize) -> TargetWindow {
        let cols = 3 * self.n_atoms();
        let data = z
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let f = Self::delta_col(k % cols);
                v * self.std[f] + self.mean[f]
            })
            .collect();
        TargetWindow(Matrix { rows, cols, data })
    }

    /// Standard deviation applied to target column `col`.
    pub fn target_scale(&self, col: usize) -> f64 {
        self.std[Self::delta_col(col)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_traj(n_atoms: usize, n_frames: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n_frames)
            .map(|_| {
                (0..n_atoms)
                    .map(|_| [rng.random(), rng.random(), rng.random()])
                    .collect()
            })
            .collect();
        let species = (0..n_atoms).map(|_| "A".to_string()).collect();
        Trajectory::from_positions(species, frames, 0, 1.0).unwrap()
    }

    #[test]
    fn window_count_example() {
        let traj = random_traj(2, 10, 0);
        let w = make_windows(&traj, &WindowSpec::new(4, 2, 1).unwrap()).unwrap();
        assert_eq!(w.len(), 5);
    }

    #[test]
    fn zero_lag_only_at_trajectory_start() {
        let traj = random_traj(3, 12, 1);
        let w = make_windows(&traj, &WindowSpec::new(3, 2, 1).unwrap()).unwrap();
        let lag_block = |x: &FeatureWindow| -> Vec<f64> {
            x.0.row(0)
                .chunks(6)
                .flat_map(|c| c[3..].to_vec())
                .collect()
        };
        assert!(lag_block(&w[0].0).iter().all(|v| *v == 0.0));
        assert!(lag_block(&w[1].0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn windows_match_slicing_oracle() {
        let traj = random_traj(2, 9, 2);
        let (h, l) = (3, 2);
        let w = make_windows(&traj, &WindowSpec::new(h, l, 1).unwrap()).unwrap();
        assert_eq!(w.len(), 9 - h - l + 1);
        let p = |t: usize, i: usize, c: usize| traj.positions(t)[i][c];
        for (s, (x, y)) in w.iter().enumerate() {
            for row in 0..h {
                let t = s + row;
                for i in 0..2 {
                    for c in 0..3 {
                        assert_eq!(x.0.get(row, 6 * i + c), p(t, i, c));
                        let lag = if t == 0 { 0.0 } else { p(t, i, c) - p(t - 1, i, c) };
                        assert_eq!(x.0.get(row, 6 * i + 3 + c), lag);
                    }
                }
            }
            for row in 0..l {
                let t = s + h - 1 + row;
                for i in 0..2 {
                    for c in 0..3 {
                        assert_eq!(y.0.get(row, 3 * i + c), p(t + 1, i, c) - p(t, i, c));
                    }
                }
            }
        }
    }

    #[test]
    fn too_short() {
        let traj = random_traj(2, 5, 3);
        assert!(matches!(
            make_windows(&traj, &WindowSpec::new(4, 2, 1).unwrap()),
            Err(Error::TrajectoryTooShort { needed: 6, got: 5 })
        ));
        assert!(WindowSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn constant_column_is_floored() {
        let frames = vec![vec![[1.0, 2.0, 3.0], [0.0; 3]]; 8];
        let traj =
            Trajectory::from_positions(vec!["A".into(), "A".into()], frames, 0, 1.0).unwrap();
        let w = make_windows(&traj, &WindowSpec::new(2, 1, 1).unwrap()).unwrap();
        let norm = Normalizer::fit(&w).unwrap();
        assert!(norm.std.iter().all(|s| *s == SIGMA_FLOOR));
        assert!(norm.apply_features(&w[3].0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let windows: Vec<(FeatureWindow, TargetWindow)> = (0..2000)
            .map(|_| {
                let data = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
                (
                    FeatureWindow(Matrix { rows: 1, cols: 12, data }),
                    TargetWindow(Matrix::zeros(1, 6)),
                )
            })
            .collect();
        let norm = Normalizer::fit(&windows).unwrap();
        let z: Vec<Vec<f64>> = windows.iter().map(|(x, _)| norm.apply_features(x)).collect();
        for c in 0..12 {
            let m: f64 = z.iter().map(|r| r[c]).sum::<f64>() / z.len() as f64;
            let v: f64 = z.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-2);
            assert!((v.sqrt() - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let traj = random_traj(3, 30, 5);
        let w = make_windows(&traj, &WindowSpec::new(4, 3, 2).unwrap()).unwrap();
        let norm = Normalizer::fit(&w).unwrap();
        let (x, y) = &w[4];
        let back = norm.invert_features(&norm.apply_features(x), x.0.rows);
        for (a, b) in back.0.data.iter().zip(&x.0.data) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = norm.invert_targets(&norm.apply_targets(y), y.0.rows);
        for (a, b) in back.0.data.iter().zip(&y.0.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalizer_ignores_held_out_frames() {
        let traj = random_traj(2, 40, 6);
        let spec = WindowSpec::new(3, 2, 1).unwrap();
        let train = traj.slice(0, 30).unwrap();
        let before = Normalizer::fit(&make_windows(&train, &spec).unwrap()).unwrap();

        let mut frames: Vec<Vec<Vec3>> =
            (0..40).map(|t| traj.positions(t).to_vec()).collect();
        for f in frames.iter_mut().skip(30) {
            f[0] = [100.0, -50.0, 7.0];
        }
        let perturbed =
            Trajectory::from_positions(traj.species().to_vec(), frames, 0, 1.0).unwrap();
        let after =
            Normalizer::fit(&make_windows(&perturbed.slice(0, 30).unwrap(), &spec).unwrap())
                .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_normalizer_input() {
        assert!(matches!(Normalizer::fit(&[]), Err(Error::EmptyInput(_))));
    }

    proptest::proptest! {
        #[test]
        fn window_count_formula(t in 2usize..40, h in 1usize..8, l in 1usize..8, stride in 1usize..5) {
            let traj = random_traj(2, t, 7);
            let spec = WindowSpec::new(h, l, stride).unwrap();
            match make_windows(&traj, &spec) {
                Ok(w) => {
                    proptest::prop_assert!(t >= h + l);
                    proptest::prop_assert_eq!(w.len(), (t - h - l) / stride + 1);
                }
                Err(_) => proptest::prop_assert!(t < h + l),
            }
        }
    }
}
