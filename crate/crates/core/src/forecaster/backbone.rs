//! Forecasting backbones over a flat parameter vector, with hand-written
//! reverse-mode gradients.
//!
//! All backbones map a normalized `H x 6N` feature window (row-major) to a
//! normalized `L x 3N` displacement window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FEATURE_COLS_PER_ATOM;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Single affine map from flattened features to flattened targets.
    Linear,
    /// Two hidden layers with GELU activations.
    Mlp,
    /// Residual time mixing, residual channel mixing, then a separable
    /// time/channel projection onto the horizon.
    Mixer,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            "mixer" => Ok(Self::Mixer),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: BackboneKind,
    pub history: usize,
    pub horizon: usize,
    pub n_atoms: usize,
    /// Hidden widths for the MLP; ignored by the other backbones.
    pub hidden: [usize; 2],
}

/// Parameter block: offset into θ plus its shape.
#[derive(Debug, Clone, Copy)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    pub fn new(
        backbone: BackboneKind,
        history: usize,
        horizon: usize,
        n_atoms: usize,
        hidden: [usize; 2],
    ) -> Result<Self> {
        if history == 0 || horizon == 0 || n_atoms < 2 {
            return Err(Error::Config(format!(
                "architecture needs H, L >= 1 and at least 2 atoms (H={history}, L={horizon}, N={n_atoms})"
            )));
        }
        if backbone == BackboneKind::Mlp && hidden.contains(&0) {
            return Err(Error::Config("mlp hidden widths must be positive".into()));
        }
        Ok(Self {
            backbone,
            history,
            horizon,
            n_atoms,
            hidden,
        })
    }

    pub fn channels_in(&self) -> usize {
        FEATURE_COLS_PER_ATOM * self.n_atoms
    }

    pub fn channels_out(&self) -> usize {
        3 * self.n_atoms
    }

    pub fn input_len(&self) -> usize {
        self.history * self.channels_in()
    }

    pub fn output_len(&self) -> usize {
        self.horizon * self.channels_out()
    }

    /// Parameter blocks in storage order, each tagged with its fan-in/fan-out
    /// for initialization (`None` for biases).
    fn blocks(&self) -> Vec<(Block, Option<(usize, usize)>)> {
        let mut offset = 0;
        let mut out = Vec::new();
        let mut push = |rows: usize, cols: usize, fans: Option<(usize, usize)>| {
            let b = Block { offset, rows, cols };
            offset += b.len();
            out.push((b, fans));
        };
        let (inp, outp) = (self.input_len(), self.output_len());
        match self.backbone {
            BackboneKind::Linear => {
                push(outp, inp, Some((inp, outp)));
                push(1, outp, None);
            }
            BackboneKind::Mlp => {
                let [h1, h2] = self.hidden;
                push(h1, inp, Some((inp, h1)));
                push(1, h1, None);
                push(h2, h1, Some((h1, h2)));
                push(1, h2, None);
                push(outp, h2, Some((h2, outp)));
                push(1, outp, None);
            }
            BackboneKind::Mixer => {
                let (h, l, c, o) = (
                    self.history,
                    self.horizon,
                    self.channels_in(),
                    self.channels_out(),
                );
                push(h, h, Some((h, h)));
                push(1, h, None);
                push(c, c, Some((c, c)));
                push(1, c, None);
                push(l, h, Some((h, l)));
                push(o, c, Some((c, o)));
                push(l, o, None);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(b, _)| b.len()).sum()
    }
}

/// Architecture plus flat parameter vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// `out[r] = sum_c w[r][c] * x[c] + b[r]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates gradients of an affine layer; returns the input gradient if requested.
fn affine_backward(
    w: &[f64],
    x: &[f64],
    g_out: &[f64],
    g_w: &mut [f64],
    g_b: &mut [f64],
    g_x: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (r, g) in g_out.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        g_b[r] += g;
        let gw = &mut g_w[r * cols..(r + 1) * cols];
        for (gw, xv) in gw.iter_mut().zip(x) {
            *gw += g * xv;
        }
    }
    if let Some(g_x) = g_x {
        for (r, g) in g_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            for (gx, wv) in g_x.iter_mut().zip(row) {
                *gx += g * wv;
            }
        }
    }
}

/// Intermediate values of the mixer forward pass.
struct MixerCache {
    t: Vec<f64>,
    u: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; arch.n_params()];
        for (block, fans) in arch.blocks() {
            if let Some((fan_in, fan_out)) = fans {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut theta[block.range()] {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        Self { arch, theta }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let theta = vec![0.0; arch.n_params()];
        Self { arch, theta }
    }

    fn block(&self, k: usize) -> Block {
        self.arch.blocks()[k].0
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} inputs (H={} x {}), got {}",
                self.arch.input_len(),
                self.arch.history,
                self.arch.channels_in(),
                x.len()
            )));
        }
        if self.theta.len() != self.arch.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "θ has {} entries, architecture needs {}",
                self.theta.len(),
                self.arch.n_params()
            )));
        }
        Ok(())
    }

    /// Maps a normalized, flattened feature window to a normalized, flattened
    /// `L x 3N` prediction.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self.arch.backbone {
            BackboneKind::Linear => {
                let (w, b) = (self.block(0), self.block(1));
                let mut y = vec![0.0; self.arch.output_len()];
                affine(&self.theta[w.range()], &self.theta[b.range()], x, &mut y);
                y
            }
            BackboneKind::Mlp => self.mlp_forward(x).3,
            BackboneKind::Mixer => {
                let (cache, y) = self.mixer_forward(x);
                drop(cache);
                y
            }
        })
    }

    /// Accumulates `d(loss)/dθ` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if g_out.len() != self.arch.output_len() || grad.len() != self.theta.len() {
            return Err(Error::ShapeMismatch("gradient buffer sizes".into()));
        }
        match self.arch.backbone {
            BackboneKind::Linear => {
                let (w, b) = (self.block(0), self.block(1));
                let (gw, gb) = grad.split_at_mut(b.offset);
                affine_backward(&self.theta[w.range()], x, g_out, &mut gw[w.range()], gb, None);
            }
            BackboneKind::Mlp => self.mlp_backward(x, g_out, grad),
            BackboneKind::Mixer => self.mixer_backward(x, g_out, grad),
        }
        Ok(())
    }

    fn mlp_forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let [h1, h2] = self.arch.hidden;
        let th = &self.theta;
        let b = |k| self.block(k).range();
        let mut z1 = vec![0.0; h1];
        affine(&th[b(0)], &th[b(1)], x, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|v| gelu(*v)).collect();
        let mut z2 = vec![0.0; h2];
        affine(&th[b(2)], &th[b(3)], &a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|v| gelu(*v)).collect();
        let mut y = vec![0.0; self.arch.output_len()];
        affine(&th[b(4)], &th[b(5)], &a2, &mut y);
        (z1, z2, a2, y)
    }

    fn mlp_backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) {
        let [h1, h2] = self.arch.hidden;
        let th = &self.theta;
        let (z1, z2, a2, _) = self.mlp_forward(x);
        let a1: Vec<f64> = z1.iter().map(|v| gelu(*v)).collect();
        let blk: Vec<Block> = (0..6).map(|k| self.block(k)).collect();

        let mut g_a2 = vec![0.0; h2];
        {
            let (gw, gb) = (blk[4].range(), blk[5].range());
            let (lo, hi) = grad.split_at_mut(gb.start);
            affine_backward(&th[gw.clone()], &a2, g_out, &mut lo[gw], &mut hi[..blk[5].len()], Some(&mut g_a2));
        }
        let g_z2: Vec<f64> = g_a2.iter().zip(&z2).map(|(g, z)| g * gelu_grad(*z)).collect();
        let mut g_a1 = vec![0.0; h1];
        {
            let (gw, gb) = (blk[2].range(), blk[3].range());
            let (lo, hi) = grad.split_at_mut(gb.start);
            affine_backward(&th[gw.clone()], &a1, &g_z2, &mut lo[gw], &mut hi[..blk[3].len()], Some(&mut g_a1));
        }
        let g_z1: Vec<f64> = g_a1.iter().zip(&z1).map(|(g, z)| g * gelu_grad(*z)).collect();
        {
            let (gw, gb) = (blk[0].range(), blk[1].range());
            let (lo, hi) = grad.split_at_mut(gb.start);
            affine_backward(&th[gw.clone()], x, &g_z1, &mut lo[gw], &mut hi[..blk[1].len()], None);
        }
    }

    fn mixer_forward(&self, x: &[f64]) -> (MixerCache, Vec<f64>) {
        let (h, l, c, o) = (
            self.arch.history,
            self.arch.horizon,
            self.arch.channels_in(),
            self.arch.channels_out(),
        );
        let th = &self.theta;
        let at = &th[self.block(0).range()];
        let bt = &th[self.block(1).range()];
        let bc = &th[self.block(2).range()];
        let cc = &th[self.block(3).range()];
        let p = &th[self.block(4).range()];
        let q = &th[self.block(5).range()];
        let bias = &th[self.block(6).range()];

        // Time mixing: T = A X + b 1ᵀ, U = X + gelu(T).
        let mut t = vec![0.0; h * c];
        for r in 0..h {
            for k in 0..h {
                let a = at[r * h + k];
                if a == 0.0 {
                    continue;
                }
                let src = &x[k * c..(k + 1) * c];
                for (dst, s) in t[r * c..(r + 1) * c].iter_mut().zip(src) {
                    *dst += a * s;
                }
            }
            for dst in &mut t[r * c..(r + 1) * c] {
                *dst += bt[r];
            }
        }
        let u: Vec<f64> = x.iter().zip(&t).map(|(xv, tv)| xv + gelu(*tv)).collect();

        // Channel mixing: S = U Bᵀ + 1 cᵀ, V = U + gelu(S).
        let mut s = vec![0.0; h * c];
        for r in 0..h {
            let urow = &u[r * c..(r + 1) * c];
            affine(bc, cc, urow, &mut s[r * c..(r + 1) * c]);
        }
        let v: Vec<f64> = u.iter().zip(&s).map(|(uv, sv)| uv + gelu(*sv)).collect();

        // Projection: Z = P V (L x C), Y = Z Qᵀ + bias (L x O).
        let mut z = vec![0.0; l * c];
        for r in 0..l {
            for k in 0..h {
                let a = p[r * h + k];
                let src = &v[k * c..(k + 1) * c];
                for (dst, s) in z[r * c..(r + 1) * c].iter_mut().zip(src) {
                    *dst += a * s;
                }
            }
        }
        let mut y = vec![0.0; l * o];
        for r in 0..l {
            affine(q, &bias[r * o..(r + 1) * o], &z[r * c..(r + 1) * c], &mut y[r * o..(r + 1) * o]);
        }
        (MixerCache { t, u, s, v, z }, y)
    }

    fn mixer_backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) {
        let (h, l, c, o) = (
            self.arch.history,
            self.arch.horizon,
            self.arch.channels_in(),
            self.arch.channels_out(),
        );
        let (cache, _) = self.mixer_forward(x);
        let th = &self.theta;
        let blk: Vec<Block> = (0..7).map(|k| self.block(k)).collect();
        let bc = &th[blk[2].range()];
        let p = &th[blk[4].range()];
        let q = &th[blk[5].range()];

        // Y = Z Qᵀ + bias
        let mut g_z = vec![0.0; l * c];
        for r in 0..l {
            let gy = &g_out[r * o..(r + 1) * o];
            for (k, g) in gy.iter().enumerate() {
                grad[blk[6].offset + r * o + k] += g;
                if *g == 0.0 {
                    continue;
                }
                let zrow = &cache.z[r * c..(r + 1) * c];
                let gq = &mut grad[blk[5].offset + k * c..blk[5].offset + (k + 1) * c];
                for (gq, zv) in gq.iter_mut().zip(zrow) {
                    *gq += g * zv;
                }
                let qrow = &q[k * c..(k + 1) * c];
                for (gz, qv) in g_z[r * c..(r + 1) * c].iter_mut().zip(qrow) {
                    *gz += g * qv;
                }
            }
        }
        // Z = P V
        let mut g_v = vec![0.0; h * c];
        for r in 0..l {
            let gz = &g_z[r * c..(r + 1) * c];
            for k in 0..h {
                let vrow = &cache.v[k * c..(k + 1) * c];
                grad[blk[4].offset + r * h + k] += gz.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                let pv = p[r * h + k];
                for (gv, g) in g_v[k * c..(k + 1) * c].iter_mut().zip(gz) {
                    *gv += pv * g;
                }
            }
        }
        // V = U + gelu(S), S = U Bᵀ + 1 cᵀ
        let g_s: Vec<f64> = g_v
            .iter()
            .zip(&cache.s)
            .map(|(g, s)| g * gelu_grad(*s))
            .collect();
        let mut g_u = g_v.clone();
        for r in 0..h {
            let urow = &cache.u[r * c..(r + 1) * c];
            let gsrow = &g_s[r * c..(r + 1) * c];
            let (lo, hi) = grad.split_at_mut(blk[3].offset);
            affine_backward(
                bc,
                urow,
                gsrow,
                &mut lo[blk[2].range()],
                &mut hi[..blk[3].len()],
                Some(&mut g_u[r * c..(r + 1) * c]),
            );
        }
        // U = X + gelu(T), T = A X + b 1ᵀ
        let g_t: Vec<f64> = g_u
            .iter()
            .zip(&cache.t)
            .map(|(g, t)| g * gelu_grad(*t))
            .collect();
        for r in 0..h {
            let gt = &g_t[r * c..(r + 1) * c];
            grad[blk[1].offset + r] += gt.iter().sum::<f64>();
            for k in 0..h {
                let xrow = &x[k * c..(k + 1) * c];
                grad[blk[0].offset + r * h + k] += gt.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}
