//! Classical Morse-pair molecular dynamics used as the reference data source.
//!
//! Units: Å, fs, eV, amu, K. Forces are analytic Morse gradients truncated at
//! a cutoff. Integration is velocity Verlet, or BAOAB splitting when a
//! Langevin thermostat is selected. There are no periodic images; optional
//! reflective walls keep atoms inside `[0, box_side]^3`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morse::{MorseParams, MorseTable};
use crate::traj::{norm, sub, Trajectory, Vec3};

/// Boltzmann constant, eV/K.
pub const KB_EV_PER_K: f64 = 8.617_333_262e-5;
/// Converts eV/(Å·amu) to Å/fs².
pub const ACCEL_UNIT: f64 = 9.648_533_212e-3;
/// Mass used for species without an explicit entry, amu.
pub const DEFAULT_MASS_AMU: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Thermostat {
    None,
    /// Friction `gamma` in 1/fs.
    Langevin { gamma: f64 },
    /// Rescale velocities to the target temperature every `interval` steps.
    VelocityRescale { interval: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_atoms: usize,
    pub species_counts: BTreeMap<String, usize>,
    pub box_side: f64,
    pub temperature_k: f64,
    pub n_steps: usize,
    pub dt_fs: f64,
    pub thermostat: Thermostat,
    pub seed: u64,
    pub morse: MorseTable,
    pub cutoff: f64,
    pub masses: BTreeMap<String, f64>,
    pub reflective_walls: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.species_counts.values().sum();
        let fail = |m: String| Err(Error::Config(m));
        if total != self.n_atoms {
            return fail(format!(
                "n_atoms is {} but species_counts sum to {total}",
                self.n_atoms
            ));
        }
        if self.n_atoms < 2 {
            return fail("n_atoms must be at least 2".into());
        }
        if self.n_steps < 2 {
            return fail("n_steps must be at least 2".into());
        }
        if !(self.dt_fs > 0.0) {
            return fail("dt_fs must be positive".into());
        }
        if !(self.temperature_k > 0.0) {
            return fail("temperature_K must be positive".into());
        }
        if !(self.box_side > 0.0) {
            return fail("box_side must be positive".into());
        }
        if !(self.cutoff > self.morse.max_r_eq()) {
            return fail(format!(
                "cutoff {} must exceed the largest d_e {}",
                self.cutoff,
                self.morse.max_r_eq()
            ));
        }
        for m in self.masses.values() {
            if !(*m > 0.0) {
                return fail("masses must be positive".into());
            }
        }
        match self.thermostat {
            Thermostat::Langevin { gamma } if !(gamma > 0.0) => {
                fail("langevin gamma must be positive".into())
            }
            Thermostat::VelocityRescale { interval: 0 } => {
                fail("velocity_rescale interval must be at least 1".into())
            }
            _ => Ok(()),
        }
    }

    fn mass_of(&self, species: &str) -> f64 {
        self.masses.get(species).copied().unwrap_or(DEFAULT_MASS_AMU)
    }
}

/// A running Morse system.
#[derive(Debug, Clone)]
pub struct Simulation {
    species: Vec<String>,
    masses: Vec<f64>,
    pair_params: Vec<MorseParams>,
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    forces: Vec<Vec3>,
    potential: f64,
    cutoff: f64,
    dt_fs: f64,
    thermostat: Thermostat,
    target_temperature: f64,
    walls: Option<f64>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Simulation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        species: Vec<String>,
        masses: Vec<f64>,
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        morse: &MorseTable,
        cutoff: f64,
        dt_fs: f64,
        thermostat: Thermostat,
        target_temperature: f64,
        walls: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = species.len();
        if masses.len() != n || positions.len() != n || velocities.len() != n {
            return Err(Error::ShapeMismatch(
                "species, masses, positions and velocities must have equal length".into(),
            ));
        }
        let pair_params = morse.pair_params(&species)?;
        let mut sim = Self {
            species,
            masses,
            pair_params,
            positions,
            velocities,
            forces: vec![[0.0; 3]; n],
            potential: 0.0,
            cutoff,
            dt_fs,
            thermostat,
            target_temperature,
            walls,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        };
        sim.potential = sim.compute_forces();
        Ok(sim)
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    pub fn forces(&self) -> &[Vec3] {
        &self.forces
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    /// Potential energy measured from the dissociation limit of each pair
    /// inside the cutoff, eV.
    pub fn potential_energy(&self) -> f64 {
        self.potential
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
            .sum::<f64>()
            / ACCEL_UNIT
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy()
    }

    /// Instantaneous kinetic temperature over 3N degrees of freedom.
    pub fn temperature(&self) -> f64 {
        2.0 * self.kinetic_energy() / (3.0 * self.positions.len() as f64 * KB_EV_PER_K)
    }

    /// Recomputes forces for the current positions, returning the potential.
    fn compute_forces(&mut self) -> f64 {
        let n = self.positions.len();
        for f in self.forces.iter_mut() {
            *f = [0.0; 3];
        }
        let mut potential = 0.0;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let p = &self.pair_params[k];
                k += 1;
                let rij = sub(self.positions[i], self.positions[j]);
                let d = norm(rij);
                if d >= self.cutoff || d == 0.0 {
                    continue;
                }
                potential += p.energy_at(d) - p.asymptote();
                let scale = -p.energy_derivative(d) / d;
                for c in 0..3 {
                    let f = scale * rij[c];
                    self.forces[i][c] += f;
                    self.forces[j][c] -= f;
                }
            }
        }
        potential
    }

    fn kick(&mut self, dt: f64) {
        for ((v, f), m) in self.velocities.iter_mut().zip(&self.forces).zip(&self.masses) {
            let s = dt * ACCEL_UNIT / m;
            for c in 0..3 {
                v[c] += s * f[c];
            }
        }
    }

    fn drift(&mut self, dt: f64) {
        for (x, v) in self.positions.iter_mut().zip(self.velocities.iter_mut()) {
            for c in 0..3 {
                x[c] += dt * v[c];
            }
            if let Some(side) = self.walls {
                for c in 0..3 {
                    if x[c] < 0.0 {
                        x[c] = -x[c];
                        v[c] = -v[c];
                    } else if x[c] > side {
                        x[c] = 2.0 * side - x[c];
                        v[c] = -v[c];
                    }
                }
            }
        }
    }

    fn ornstein_uhlenbeck(&mut self, gamma: f64, dt: f64) {
        let c1 = (-gamma * dt).exp();
        let kt = KB_EV_PER_K * self.target_temperature;
        for (v, m) in self.velocities.iter_mut().zip(&self.masses) {
            let c2 = ((1.0 - c1 * c1) * kt * ACCEL_UNIT / m).sqrt();
            for c in v.iter_mut() {
                let xi: f64 = StandardNormal.sample(&mut self.rng);
                *c = c1 * *c + c2 * xi;
            }
        }
    }

    /// Advances one time step.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.dt_fs;
        match self.thermostat {
            Thermostat::Langevin { gamma } => {
                self.kick(0.5 * dt);
                self.drift(0.5 * dt);
                self.ornstein_uhlenbeck(gamma, dt);
                self.drift(0.5 * dt);
                self.potential = self.compute_forces();
                self.kick(0.5 * dt);
            }
            Thermostat::None | Thermostat::VelocityRescale { .. } => {
                self.kick(0.5 * dt);
                self.drift(dt);
                self.potential = self.compute_forces();
                self.kick(0.5 * dt);
            }
        }
        self.step += 1;
        if let Thermostat::VelocityRescale { interval } = self.thermostat {
            if self.step % interval == 0 {
                let t = self.temperature();
                if t > 0.0 {
                    let s = (self.target_temperature / t).sqrt();
                    for v in self.velocities.iter_mut() {
                        for c in v.iter_mut() {
                            *c *= s;
                        }
                    }
                }
            }
        }
        if !self.potential.is_finite() {
            return Err(Error::BlowUp {
                step: self.step,
                reason: "non-finite energy".into(),
            });
        }
        if self
            .positions
            .iter()
            .any(|p| p.iter().any(|c| !(c.abs() <= 1e6)))
        {
            return Err(Error::BlowUp {
                step: self.step,
                reason: "position beyond 1e6 Å".into(),
            });
        }
        Ok(())
    }
}

/// Jittered cubic lattice centred in the box, with species shuffled over sites.
fn initial_state(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<String>, Vec<Vec3>)> {
    let n = cfg.n_atoms;
    let spacing = cfg.morse.max_r_eq();
    let per_side = (n as f64).cbrt().ceil() as usize;
    let extent = (per_side - 1) as f64 * spacing;
    if extent >= cfg.box_side {
        return Err(Error::Config(format!(
            "box_side {} too small for a {per_side}^3 lattice at spacing {spacing}",
            cfg.box_side
        )));
    }
    let origin = 0.5 * (cfg.box_side - extent);
    let jitter = 0.05 * spacing;
    let min_sep = 0.5 * cfg.morse.min_r_eq();

    let mut species: Vec<String> = cfg
        .species_counts
        .iter()
        .flat_map(|(s, &c)| std::iter::repeat_n(s.clone(), c))
        .collect();
    species.shuffle(rng);

    for _attempt in 0..1000 {
        let mut positions = Vec::with_capacity(n);
        'fill: for ix in 0..per_side {
            for iy in 0..per_side {
                for iz in 0..per_side {
                    if positions.len() == n {
                        break 'fill;
                    }
                    let mut p = [0.0; 3];
                    for (c, idx) in [ix, iy, iz].into_iter().enumerate() {
                        let g: f64 = StandardNormal.sample(rng);
                        p[c] = (origin + idx as f64 * spacing + jitter * g)
                            .clamp(0.0, cfg.box_side);
                    }
                    positions.push(p);
                }
            }
        }
        let ok = (0..n).all(|i| {
            (i + 1..n).all(|j| norm(sub(positions[i], positions[j])) >= min_sep)
        });
        if ok {
            return Ok((species, positions));
        }
    }
    Err(Error::Config("could not place atoms without overlap".into()))
}

fn maxwell_boltzmann(
    masses: &[f64],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec3> {
    let kt = KB_EV_PER_K * temperature;
    let mut v: Vec<Vec3> = masses
        .iter()
        .map(|m| {
            let s = (kt * ACCEL_UNIT / m).sqrt();
            let mut out = [0.0; 3];
            for c in out.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *c = s * g;
            }
            out
        })
        .collect();
    let total_mass: f64 = masses.iter().sum();
    let mut p = [0.0; 3];
    for (vi, m) in v.iter().zip(masses) {
        for c in 0..3 {
            p[c] += m * vi[c];
        }
    }
    for vi in v.iter_mut() {
        for c in 0..3 {
            vi[c] -= p[c] / total_mass;
        }
    }
    v
}

/// Runs a simulation and records every step, `n_steps` frames in total.
pub fn generate(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (species, positions) = initial_state(cfg, &mut rng)?;
    let masses: Vec<f64> = species.iter().map(|s| cfg.mass_of(s)).collect();
    let velocities = maxwell_boltzmann(&masses, cfg.temperature_k, &mut rng);
    let mut sim = Simulation::new(
        species.clone(),
        masses,
        positions,
        velocities,
        &cfg.morse,
        cfg.cutoff,
        cfg.dt_fs,
        cfg.thermostat,
        cfg.temperature_k,
        cfg.reflective_walls.then_some(cfg.box_side),
        cfg.seed ^ 0x5EED_0F_7E5,
    )?;
    let mut frames = Vec::with_capacity(cfg.n_steps);
    frames.push(sim.positions().to_vec());
    for _ in 1..cfg.n_steps {
        sim.step()?;
        frames.push(sim.positions().to_vec());
    }
    Trajectory::from_positions(species, frames, 0, cfg.dt_fs)
}

/// Contiguous train/valid/test split in time order.
///
/// Segment lengths are `round(T * train_frac)`, `round(T * valid_frac)` and
/// the remainder. Every segment must hold at least `min_len` frames.
pub fn split_dataset(
    traj: &Trajectory,
    train_frac: f64,
    valid_frac: f64,
    min_len: usize,
) -> Result<(Trajectory, Trajectory, Trajectory)> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::Config(format!(
            "split: fractions must be positive with sum < 1, got {train_frac} + {valid_frac}"
        )));
    }
    let t = traj.n_frames();
    let n_train = (t as f64 * train_frac).round() as usize;
    let n_valid = (t as f64 * valid_frac).round() as usize;
    let n_test = t.saturating_sub(n_train + n_valid);
    for (segment, got) in [("train", n_train), ("valid", n_valid), ("test", n_test)] {
        if got < min_len || got == 0 {
            return Err(Error::SegmentTooShort {
                segment,
                got,
                needed: min_len.max(1),
            });
        }
    }
    Ok((
        traj.slice(0, n_train)?,
        traj.slice(n_train, n_train + n_valid)?,
        traj.slice(n_train + n_valid, t)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::Frame;
    use rand::Rng;

    fn table(depth: f64, a: f64, r_eq: f64) -> MorseTable {
        let mut t = MorseTable::new();
        t.insert("A", "A", MorseParams::new(depth, a, r_eq, 0.0).unwrap());
        t
    }

    fn config(n: usize, steps: usize, thermostat: Thermostat) -> SimConfig {
        SimConfig {
            n_atoms: n,
            species_counts: [("A".to_string(), n)].into_iter().collect(),
            box_side: 12.0,
            temperature_k: 300.0,
            n_steps: steps,
            dt_fs: 0.5,
            thermostat,
            seed: 9,
            morse: table(0.5, 1.5, 2.5),
            cutoff: 10.0,
            masses: BTreeMap::new(),
            reflective_walls: false,
        }
    }

    #[test]
    fn equilibrium_pair_is_stationary() {
        let morse = table(1.0, 1.2, 2.0);
        let mut sim = Simulation::new(
            vec!["A".into(), "A".into()],
            vec![10.0, 10.0],
            vec![[0.0; 3], [2.0, 0.0, 0.0]],
            vec![[0.0; 3]; 2],
            &morse,
            8.0,
            1.0,
            Thermostat::None,
            300.0,
            None,
            0,
        )
        .unwrap();
        for _ in 0..100 {
            sim.step().unwrap();
        }
        assert!(sim.positions()[0].iter().all(|c| c.abs() < 1e-6));
        assert!((sim.positions()[1][0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn morse_forces_sum_to_zero_and_match_gradient() {
        let cfg = config(8, 2, Thermostat::None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (species, positions) = initial_state(&cfg, &mut rng).unwrap();
        let morse = cfg.morse.clone();
        let sim = Simulation::new(
            species.clone(),
            vec![20.0; 8],
            positions.clone(),
            vec![[0.0; 3]; 8],
            &morse,
            cfg.cutoff,
            cfg.dt_fs,
            Thermostat::None,
            300.0,
            None,
            0,
        )
        .unwrap();
        let mut total = [0.0; 3];
        for f in sim.forces() {
            for c in 0..3 {
                total[c] += f[c];
            }
        }
        assert!(total.iter().all(|c| c.abs() < 1e-9), "{total:?}");

        // Force is minus the gradient of the potential.
        let h = 1e-6;
        for i in [0, 3, 7] {
            for c in 0..3 {
                let mut plus = positions.clone();
                plus[i][c] += h;
                let mut minus = positions.clone();
                minus[i][c] -= h;
                let e = |p: Vec<Vec3>| {
                    Simulation::new(
                        species.clone(),
                        vec![20.0; 8],
                        p,
                        vec![[0.0; 3]; 8],
                        &morse,
                        cfg.cutoff,
                        cfg.dt_fs,
                        Thermostat::None,
                        300.0,
                        None,
                        0,
                    )
                    .unwrap()
                    .potential_energy()
                };
                let fd = -(e(plus) - e(minus)) / (2.0 * h);
                let an = sim.forces()[i][c];
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-2), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = config(8, 50, Thermostat::Langevin { gamma: 0.01 });
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_frames(), 50);
        let mut other = cfg.clone();
        other.seed = 10;
        assert_ne!(generate(&other).unwrap(), a);
    }

    #[test]
    fn initial_atoms_do_not_overlap() {
        let cfg = config(27, 2, Thermostat::None);
        let traj = generate(&cfg).unwrap();
        let f = traj.frame(0);
        for i in 0..27 {
            for j in i + 1..27 {
                assert!(crate::morse::pair_distance(f, i, j).unwrap() >= 0.5 * 2.5);
            }
        }
    }

    #[test]
    fn velocity_rescale_holds_temperature() {
        let mut cfg = config(8, 2, Thermostat::VelocityRescale { interval: 2 });
        cfg.temperature_k = 600.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (species, positions) = initial_state(&cfg, &mut rng).unwrap();
        let masses = vec![DEFAULT_MASS_AMU; 8];
        let velocities = maxwell_boltzmann(&masses, 600.0, &mut rng);
        let mut sim = Simulation::new(
            species,
            masses,
            positions,
            velocities,
            &cfg.morse,
            cfg.cutoff,
            cfg.dt_fs,
            cfg.thermostat,
            600.0,
            Some(cfg.box_side),
            0,
        )
        .unwrap();
        for _ in 0..200 {
            sim.step().unwrap();
        }
        for _ in 0..1000 {
            sim.step().unwrap();
            let t = sim.temperature();
            assert!((t - 600.0).abs() <= 0.15 * 600.0, "T = {t}");
        }
    }

    #[test]
    fn langevin_free_particles_diffuse() {
        // Two atoms beyond the cutoff from each other behave as free particles.
        let morse = table(0.5, 1.5, 2.5);
        let gamma = 0.05;
        let temp = 600.0;
        let mass = 10.0;
        let dt = 1.0;
        let n_steps = 20_000;
        let mut msd_slope = 0.0;
        let runs = 8;
        for seed in 0..runs {
            let mut sim = Simulation::new(
                vec!["A".into(), "A".into()],
                vec![mass; 2],
                vec![[0.0; 3], [1e4, 0.0, 0.0]],
                vec![[0.0; 3]; 2],
                &morse,
                10.0,
                dt,
                Thermostat::Langevin { gamma },
                temp,
                None,
                seed,
            )
            .unwrap();
            let mut frames = Vec::new();
            for _ in 0..n_steps {
                sim.step().unwrap();
                frames.push(sim.positions().to_vec());
            }
            // Multi-origin MSD at two lags well past the ballistic regime.
            let msd = |lag: usize| -> f64 {
                let mut acc = 0.0;
                let mut count = 0;
                for k in 0..n_steps - lag {
                    for i in 0..2 {
                        acc += crate::traj::norm2(sub(frames[k + lag][i], frames[k][i]));
                        count += 1;
                    }
                }
                acc / count as f64
            };
            let (l1, l2) = (200, 400);
            msd_slope += (msd(l2) - msd(l1)) / ((l2 - l1) as f64 * dt);
        }
        msd_slope /= runs as f64;
        // Einstein: MSD = 6 D t with D = kT / (m gamma).
        let d = KB_EV_PER_K * temp * ACCEL_UNIT / (mass * gamma);
        let expected = 6.0 * d;
        assert!(msd_slope > 0.0);
        assert!(
            (msd_slope - expected).abs() <= 0.25 * expected,
            "slope {msd_slope} vs {expected}"
        );
    }

    #[test]
    fn energy_is_conserved_without_thermostat() {
        let cfg = config(8, 2000, Thermostat::None);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (species, positions) = initial_state(&cfg, &mut rng).unwrap();
        let masses = vec![DEFAULT_MASS_AMU; 8];
        let velocities = maxwell_boltzmann(&masses, cfg.temperature_k, &mut rng);
        let mut sim = Simulation::new(
            species, masses, positions, velocities, &cfg.morse, cfg.cutoff, 0.5,
            Thermostat::None, 300.0, None, 0,
        )
        .unwrap();
        let depth = sim.potential_energy().abs();
        let e0 = sim.total_energy();
        for _ in 0..2000 {
            sim.step().unwrap();
            assert!((sim.total_energy() - e0).abs() < 0.01 * depth);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let morse = table(1.0, 1.0, 2.0);
        let mut sim = Simulation::new(
            vec!["A".into(), "A".into()],
            vec![1.0, 1.0],
            vec![[0.0; 3], [5.0, 0.0, 0.0]],
            vec![[0.0; 3], [1e6, 0.0, 0.0]],
            &morse,
            8.0,
            1.0,
            Thermostat::None,
            300.0,
            None,
            0,
        )
        .unwrap();
        assert!(matches!(sim.step(), Err(Error::BlowUp { step: 1, .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(8, 10, Thermostat::None);
        cfg.n_atoms = 9;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = config(8, 10, Thermostat::None);
        cfg.cutoff = 2.0;
        assert!(generate(&cfg).is_err());
        let cfg = config(8, 10, Thermostat::VelocityRescale { interval: 0 });
        assert!(generate(&cfg).is_err());
    }

    fn dummy(n_frames: usize) -> Trajectory {
        let frames = (0..n_frames)
            .map(|t| Frame::new(t as i64, vec![[t as f64, 0.0, 0.0], [0.0; 3]]))
            .collect();
        Trajectory::new(vec!["A".into(), "A".into()], frames, 1.0).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let (a, b, c) = split_dataset(&dummy(1000), 0.8, 0.1, 1).unwrap();
        assert_eq!((a.n_frames(), b.n_frames(), c.n_frames()), (800, 100, 100));
        assert_eq!(b.first_step(), Some(800));
        assert_eq!(c.first_step(), Some(900));
    }

    #[test]
    fn split_reproduces_published_ratios() {
        let total = 7819.0;
        let (a, b, c) = split_dataset(&dummy(7819), 5967.0 / total, 852.0 / total, 80).unwrap();
        assert_eq!((a.n_frames(), b.n_frames(), c.n_frames()), (5967, 852, 1000));
    }

    #[test]
    fn split_guards() {
        assert!(matches!(
            split_dataset(&dummy(200), 0.8, 0.1, 64 + 16),
            Err(Error::SegmentTooShort { segment: "valid", .. })
        ));
        assert!(matches!(
            split_dataset(&dummy(100), 0.8, 0.3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn thermal_velocities_have_no_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let masses: Vec<f64> = (0..16).map(|_| rng.random_range(5.0..50.0)).collect();
        let v = maxwell_boltzmann(&masses, 800.0, &mut rng);
        for c in 0..3 {
            let p: f64 = v.iter().zip(&masses).map(|(vi, m)| m * vi[c]).sum();
            assert!(p.abs() < 1e-12);
        }
    }
}
