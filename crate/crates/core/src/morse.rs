//! Morse pair potential: evaluation, least-squares fitting and per-pair
//! energy thresholds.
//!
//! `E(d) = D_e (1 - exp(-a (d - d_e)))^2 + b`, energies in eV, lengths in Å.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{norm, sub, Frame, Trajectory};

/// Unordered species pair, stored with the lexicographically smaller label first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey(String, String);

impl PairKey {
    pub fn new(a: &str, b: &str) -> Self {
        if a <= b {
            Self(a.to_string(), b.to_string())
        } else {
            Self(b.to_string(), a.to_string())
        }
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn second(&self) -> &str {
        &self.1
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorseParams {
    /// Well depth `D_e`, eV.
    pub depth: f64,
    /// Steepness `a`, 1/Å.
    pub steepness: f64,
    /// Equilibrium distance `d_e`, Å.
    pub r_eq: f64,
    /// Energy offset `b`, eV.
    pub offset: f64,
}

impl MorseParams {
    pub fn new(depth: f64, steepness: f64, r_eq: f64, offset: f64) -> Result<Self> {
        let p = Self {
            depth,
            steepness,
            r_eq,
            offset,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.depth > 0.0
            && self.steepness > 0.0
            && self.r_eq > 0.0
            && self.depth.is_finite()
            && self.steepness.is_finite()
            && self.r_eq.is_finite()
            && self.offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{self:?}")))
        }
    }

    /// Energy at distance `d` without the positivity check. Finite for any finite `d`.
    #[inline]
    pub fn energy_at(&self, d: f64) -> f64 {
        let u = 1.0 - (-self.steepness * (d - self.r_eq)).exp();
        self.depth * u * u + self.offset
    }

    /// `dE/dd`.
    #[inline]
    pub fn energy_derivative(&self, d: f64) -> f64 {
        let x = (-self.steepness * (d - self.r_eq)).exp();
        2.0 * self.depth * self.steepness * (1.0 - x) * x
    }

    /// Dissociation limit `D_e + b`.
    pub fn asymptote(&self) -> f64 {
        self.depth + self.offset
    }
}

pub fn morse_energy(params: &MorseParams, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDistance(d));
    }
    Ok(params.energy_at(d))
}

/// Morse parameters per species pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MorseTable {
    pairs: BTreeMap<PairKey, MorseParams>,
}

impl MorseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, params: MorseParams) {
        self.pairs.insert(PairKey::new(a, b), params);
    }

    pub fn get(&self, a: &str, b: &str) -> Result<&MorseParams> {
        let key = PairKey::new(a, b);
        self.pairs
            .get(&key)
            .ok_or_else(|| Error::MissingPairParams(key.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PairKey, &MorseParams)> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_r_eq(&self) -> f64 {
        self.pairs.values().map(|p| p.r_eq).fold(0.0, f64::max)
    }

    pub fn min_r_eq(&self) -> f64 {
        self.pairs
            .values()
            .map(|p| p.r_eq)
            .fold(f64::INFINITY, f64::min)
    }

    /// Resolves parameters for every atom pair `i < j` of a species list,
    /// row-major over the upper triangle. Fails on the first uncovered pair.
    pub fn pair_params(&self, species: &[String]) -> Result<Vec<MorseParams>> {
        let n = species.len();
        let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(*self.get(&species[i], &species[j])?);
            }
        }
        Ok(out)
    }

    /// Reads `species_i,species_j,D_e,a,d_e,b`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut table = Self::new();
        let mut seen_header = false;
        for (idx, line) in reader.lines().enumerate() {
            let n = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if !seen_header {
                if f != ["species_i", "species_j", "D_e", "a", "d_e", "b"] {
                    return Err(csv_err(path, n, "expected header `species_i,species_j,D_e,a,d_e,b`"));
                }
                seen_header = true;
                continue;
            }
            if f.len() != 6 {
                return Err(csv_err(path, n, "expected 6 fields"));
            }
            let num = |k: usize| -> Result<f64> {
                f[k].parse()
                    .map_err(|_| csv_err(path, n, &format!("invalid number `{}`", f[k])))
            };
            let params = MorseParams::new(num(2)?, num(3)?, num(4)?, num(5)?)
                .map_err(|e| csv_err(path, n, &e.to_string()))?;
            table.insert(f[0], f[1], params);
        }
        if !seen_header {
            return Err(csv_err(path, 1, "missing header"));
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "species_i,species_j,D_e,a,d_e,b")?;
        for (k, p) in &self.pairs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k.first(),
                k.second(),
                p.depth,
                p.steepness,
                p.r_eq,
                p.offset
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

pub fn pair_distance(frame: &Frame, i: usize, j: usize) -> Result<f64> {
    let n = frame.n_atoms();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange {
                index: idx,
                n_atoms: n,
            });
        }
    }
    if i == j {
        return Err(Error::SelfPair(i));
    }
    Ok(norm(sub(frame.positions[i], frame.positions[j])))
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e10;
const MAX_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-12;
const DEPTH_FLOOR: f64 = 1e-6;

/// Internal coordinates: `[ln D_e, ln a, ln d_e, b]`.
fn to_internal(p: &MorseParams) -> [f64; 4] {
    [p.depth.ln(), p.steepness.ln(), p.r_eq.ln(), p.offset]
}

fn from_internal(q: &[f64; 4]) -> MorseParams {
    MorseParams {
        depth: q[0].exp(),
        steepness: q[1].exp(),
        r_eq: q[2].exp(),
        offset: q[3],
    }
}

fn sum_sq(samples: &[(f64, f64)], p: &MorseParams) -> f64 {
    samples
        .iter()
        .map(|&(d, e)| {
            let r = p.energy_at(d) - e;
            r * r
        })
        .sum()
}

/// Residual Jacobian row with respect to the internal coordinates.
fn jacobian_row(p: &MorseParams, d: f64) -> [f64; 4] {
    let x = (-p.steepness * (d - p.r_eq)).exp();
    let u = 1.0 - x;
    [
        p.depth * u * u,
        p.steepness * 2.0 * p.depth * u * (d - p.r_eq) * x,
        p.r_eq * (-2.0 * p.depth * u * p.steepness * x),
        1.0,
    ]
}

/// Solves the symmetric positive definite 4x4 system by Cholesky.
fn solve_spd4(a: &[[f64; 4]; 4], rhs: &[f64; 4]) -> Option<[f64; 4]> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; 4];
    for i in 0..4 {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (rhs[i] - s) / l[i][i];
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let s: f64 = (i + 1..4).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Default starting point read off the sampled curve.
pub fn initial_guess(samples: &[(f64, f64)]) -> MorseParams {
    let (d_min, e_min) = samples
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |acc, (d, e)| {
            if e < acc.1 {
                (d, e)
            } else {
                acc
            }
        });
    let e_max = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    MorseParams {
        depth: (e_max - e_min).max(DEPTH_FLOOR),
        steepness: 1.0,
        r_eq: d_min,
        offset: e_min,
    }
}

/// Damped Gauss-Newton (Levenberg-Marquardt) fit of a Morse curve to
/// `(distance, energy)` samples.
///
/// Positivity of `D_e`, `a`, `d_e` is kept by optimizing their logarithms.
/// The damping is multiplied by 10 after a rejected step and divided by 10
/// after an accepted one; a step is accepted only if it lowers the sum of
/// squared residuals.
pub fn fit_morse(
    samples: &[(f64, f64)],
    init: Option<MorseParams>,
) -> Result<(MorseParams, FitReport)> {
    if let Some(&(d, _)) = samples.iter().find(|(d, _)| !(*d > 0.0)) {
        return Err(Error::NonPositiveDistance(d));
    }
    if samples.iter().any(|(d, e)| !d.is_finite() || !e.is_finite()) {
        return Err(Error::DegenerateSamples("non-finite sample".into()));
    }
    let mut distinct: Vec<f64> = samples.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 5 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 5 distinct distances, got {}",
            distinct.len()
        )));
    }

    let start = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => initial_guess(samples),
    };
    let mut q = to_internal(&start);
    let mut params = start;
    let mut cost = sum_sq(samples, &params);
    let mut damping = INITIAL_DAMPING;
    let mut iterations = 0;
    let mut accepted_any = false;
    let mut converged = false;

    'outer: while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for &(d, e) in samples {
            let row = jacobian_row(&params, d);
            let r = params.energy_at(d) - e;
            for a in 0..4 {
                jtr[a] += row[a] * r;
                for b in 0..4 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        if cost == 0.0 {
            converged = true;
            break;
        }

        loop {
            let mut lhs = jtj;
            for (a, row) in lhs.iter_mut().enumerate() {
                row[a] += damping * jtj[a][a].max(1e-12);
            }
            let rhs = jtr.map(|g| -g);
            let trial = solve_spd4(&lhs, &rhs).map(|step| {
                let mut t = q;
                for a in 0..4 {
                    t[a] += step[a];
                }
                t
            });
            if let Some(t) = trial {
                let cand = from_internal(&t);
                let cand_cost = sum_sq(samples, &cand);
                if cand_cost.is_finite() && cand_cost < cost && cand.validate().is_ok() {
                    let rel = (cost - cand_cost) / cost;
                    q = t;
                    params = cand;
                    cost = cand_cost;
                    damping = (damping / 10.0).max(1e-15);
                    accepted_any = true;
                    if rel < REL_TOL {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            damping *= 10.0;
            if damping > MAX_DAMPING {
                if !accepted_any {
                    return Err(Error::FitDiverged {
                        iterations,
                        damping,
                    });
                }
                // Even a vanishing gradient step no longer lowers the cost.
                converged = true;
                break 'outer;
            }
        }
    }

    if params.depth <= DEPTH_FLOOR {
        converged = false;
    }
    let rmse = (cost / samples.len() as f64).sqrt();
    Ok((
        params,
        FitReport {
            rmse,
            iterations,
            converged,
        },
    ))
}

// ---------------------------------------------------------------------------
// Thresholds

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One threshold per unordered species pair.
    #[default]
    Species,
    /// One threshold per atom-index pair, with species entries as fallback.
    Atom,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "species" => Ok(Self::Species),
            "atom" => Ok(Self::Atom),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Maximum observed pair energy per key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub granularity: Granularity,
    per_atom: BTreeMap<(usize, usize), f64>,
    per_species: BTreeMap<PairKey, f64>,
}

impl ThresholdTable {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            ..Default::default()
        }
    }

    pub fn set_species(&mut self, a: &str, b: &str, tau: f64) {
        self.per_species.insert(PairKey::new(a, b), tau);
    }

    pub fn set_atoms(&mut self, i: usize, j: usize, tau: f64) {
        self.per_atom.insert((i.min(j), i.max(j)), tau);
    }

    pub fn species_entries(&self) -> impl Iterator<Item = (&PairKey, f64)> {
        self.per_species.iter().map(|(k, v)| (k, *v))
    }

    pub fn atom_entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.per_atom.iter().map(|(k, v)| (*k, *v))
    }

    /// Threshold for atoms `i`, `j` with the given species. Per-atom entries
    /// take precedence when the table is atom-granular.
    pub fn tau(&self, i: usize, j: usize, species_i: &str, species_j: &str) -> Result<f64> {
        if self.granularity == Granularity::Atom {
            if let Some(t) = self.per_atom.get(&(i.min(j), i.max(j))) {
                return Ok(*t);
            }
        }
        let key = PairKey::new(species_i, species_j);
        self.per_species
            .get(&key)
            .copied()
            .ok_or_else(|| Error::MissingPairParams(format!("{key} (atoms {i}:{j})")))
    }

    /// Resolves thresholds for every atom pair `i < j`, row-major upper triangle.
    pub fn pair_taus(&self, species: &[String]) -> Result<Vec<f64>> {
        let n = species.len();
        let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.tau(i, j, &species[i], &species[j])?);
            }
        }
        Ok(out)
    }

    /// Writes `key,tau` rows; species keys first, then atom keys.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "key,tau")?;
        for (k, t) in &self.per_species {
            writeln!(w, "{k},{t}")?;
        }
        if self.granularity == Granularity::Atom {
            for ((i, j), t) in &self.per_atom {
                writeln!(w, "{i}:{j},{t}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `key,tau` file. The table is atom-granular if any `i:j` key is present.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut table = Self::new(Granularity::Species);
        let mut seen_header = false;
        for (idx, line) in reader.lines().enumerate() {
            let n = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                if line != "key,tau" {
                    return Err(csv_err(path, n, "expected header `key,tau`"));
                }
                seen_header = true;
                continue;
            }
            let (key, tau) = line
                .split_once(',')
                .ok_or_else(|| csv_err(path, n, "expected `key,tau`"))?;
            let tau: f64 = tau
                .trim()
                .parse()
                .map_err(|_| csv_err(path, n, &format!("invalid tau `{tau}`")))?;
            if !tau.is_finite() {
                return Err(csv_err(path, n, "tau must be finite"));
            }
            if let Some((i, j)) = key.split_once(':') {
                let i: usize = i.parse().map_err(|_| csv_err(path, n, "invalid atom index"))?;
                let j: usize = j.parse().map_err(|_| csv_err(path, n, "invalid atom index"))?;
                table.granularity = Granularity::Atom;
                table.set_atoms(i, j, tau);
            } else if let Some((a, b)) = key.split_once('-') {
                table.set_species(a, b, tau);
            } else {
                return Err(csv_err(path, n, &format!("invalid key `{key}`")));
            }
        }
        if !seen_header {
            return Err(csv_err(path, 1, "missing header"));
        }
        Ok(table)
    }
}

/// Maximum Morse energy per pair over every frame of `traj`.
///
/// Species entries are always filled; atom entries too when `granularity`
/// is [`Granularity::Atom`].
pub fn compute_thresholds(
    traj: &Trajectory,
    morse: &MorseTable,
    granularity: Granularity,
) -> Result<ThresholdTable> {
    let species = traj.species();
    let n = traj.n_atoms();
    let params = morse.pair_params(species)?;
    let mut per_pair = vec![f64::NEG_INFINITY; params.len()];
    for frame in traj.frames() {
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let d = norm(sub(frame.positions[i], frame.positions[j]));
                let e = morse_energy(&params[k], d)?;
                if e > per_pair[k] {
                    per_pair[k] = e;
                }
                k += 1;
            }
        }
    }
    let mut table = ThresholdTable::new(granularity);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let tau = per_pair[k];
            k += 1;
            if !tau.is_finite() {
                continue;
            }
            if granularity == Granularity::Atom {
                table.set_atoms(i, j, tau);
            }
            let key = PairKey::new(&species[i], &species[j]);
            let slot = table.per_species.entry(key).or_insert(f64::NEG_INFINITY);
            if tau > *slot {
                *slot = tau;
            }
        }
    }
    Ok(table)
}
