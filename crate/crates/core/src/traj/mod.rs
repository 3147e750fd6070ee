//! Trajectory data model and displacement algebra.
//!
//! A [`Trajectory`] is an ordered list of [`Frame`]s sharing one species list.
//! Displacements are raw frame-to-frame differences; no periodic images are
//! applied anywhere in this crate.

mod io;

pub use io::{read_trajectory, write_trajectory, TrajectoryFormat};

use crate::error::{Error, Result};

/// Cartesian 3-vector in ångström (or ångström per step for displacements).
pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn norm2(a: Vec3) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

/// Positions of all atoms at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub step_index: i64,
    pub positions: Vec<Vec3>,
}

impl Frame {
    pub fn new(step_index: i64, positions: Vec<Vec3>) -> Self {
        Self {
            step_index,
            positions,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    fn check_finite(&self) -> Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidTrajectory(format!(
                    "non-finite coordinate for atom {i} at step {}",
                    self.step_index
                )));
            }
        }
        Ok(())
    }
}

/// Ordered frames with a fixed species list and time step.
///
/// Frames have unit-stride step indices, at least two atoms, and finite
/// coordinates. The constructor enforces all of this.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    species: Vec<String>,
    frames: Vec<Frame>,
    dt_fs: f64,
}

impl Trajectory {
    pub fn new(species: Vec<String>, frames: Vec<Frame>, dt_fs: f64) -> Result<Self> {
        if !(dt_fs > 0.0 && dt_fs.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "dt_fs must be positive, got {dt_fs}"
            )));
        }
        if species.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "need at least 2 atoms, got {}",
                species.len()
            )));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.n_atoms() != species.len() {
                return Err(Error::ShapeMismatch(format!(
                    "frame {k} has {} atoms, species list has {}",
                    f.n_atoms(),
                    species.len()
                )));
            }
            f.check_finite()?;
            if k > 0 && f.step_index != frames[k - 1].step_index + 1 {
                return Err(Error::InvalidTrajectory(format!(
                    "step index {} follows {}; frames must have unit stride",
                    f.step_index,
                    frames[k - 1].step_index
                )));
            }
        }
        Ok(Self {
            species,
            frames,
            dt_fs,
        })
    }

    /// Builds a trajectory from raw position frames numbered from `first_step`.
    pub fn from_positions(
        species: Vec<String>,
        positions: Vec<Vec<Vec3>>,
        first_step: i64,
        dt_fs: f64,
    ) -> Result<Self> {
        let frames = positions
            .into_iter()
            .enumerate()
            .map(|(k, p)| Frame::new(first_step + k as i64, p))
            .collect();
        Self::new(species, frames, dt_fs)
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn positions(&self, t: usize) -> &[Vec3] {
        &self.frames[t].positions
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt_fs(&self) -> f64 {
        self.dt_fs
    }

    pub fn first_step(&self) -> Option<i64> {
        self.frames.first().map(|f| f.step_index)
    }

    /// Contiguous sub-trajectory of frames `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{end} of {} frames",
                self.frames.len()
            )));
        }
        Ok(Self {
            species: self.species.clone(),
            frames: self.frames[start..end].to_vec(),
            dt_fs: self.dt_fs,
        })
    }

    /// Appends a frame whose step index continues the sequence.
    pub fn push_positions(&mut self, positions: Vec<Vec3>) -> Result<()> {
        if positions.len() != self.n_atoms() {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} atoms, trajectory has {}",
                positions.len(),
                self.n_atoms()
            )));
        }
        let step = self.frames.last().map_or(0, |f| f.step_index + 1);
        let frame = Frame::new(step, positions);
        frame.check_finite()?;
        self.frames.push(frame);
        Ok(())
    }

    /// Indices of atoms carrying the given species label.
    pub fn atoms_of(&self, species: &str) -> Vec<usize> {
        self.species
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_str() == species)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct species labels in first-occurrence order.
    pub fn distinct_species(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.species {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }
}

/// Per-step atomic displacements, `deltas[t][i] = r[t+1][i] - r[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSeries {
    pub deltas: Vec<Vec<Vec3>>,
}

impl DisplacementSeries {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

pub fn compute_displacements(traj: &Trajectory) -> Result<DisplacementSeries> {
    if traj.n_frames() < 2 {
        return Err(Error::TrajectoryTooShort {
            needed: 2,
            got: traj.n_frames(),
        });
    }
    let deltas = traj
        .frames()
        .windows(2)
        .map(|w| {
            w[1].positions
                .iter()
                .zip(&w[0].positions)
                .map(|(&next, &cur)| sub(next, cur))
                .collect()
        })
        .collect();
    Ok(DisplacementSeries { deltas })
}

/// Integrates displacements forward from `initial`.
///
/// Frame 0 of the result is `initial`; frame `t + 1` is `initial` plus the
/// running sum of the first `t + 1` deltas.
pub fn reconstruct_positions(
    initial: &Frame,
    species: Vec<String>,
    deltas: &DisplacementSeries,
    dt_fs: f64,
) -> Result<Trajectory> {
    let n = initial.n_atoms();
    let mut frames = Vec::with_capacity(deltas.len() + 1);
    frames.push(initial.clone());
    let mut current = initial.positions.clone();
    for (k, step) in deltas.deltas.iter().enumerate() {
        if step.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "delta frame {k} has {} atoms, initial frame has {n}",
                step.len()
            )));
        }
        for (r, d) in current.iter_mut().zip(step) {
            *r = add(*r, *d);
        }
        frames.push(Frame::new(initial.step_index + k as i64 + 1, current.clone()));
    }
    Trajectory::new(species, frames, dt_fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_species() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    fn random_walk(n_atoms: usize, n_frames: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<Vec3> = (0..n_atoms)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let mut frames = vec![pos.clone()];
        for _ in 1..n_frames {
            for p in pos.iter_mut() {
                for c in p.iter_mut() {
                    *c += rng.random_range(-0.1..0.1);
                }
            }
            frames.push(pos.clone());
        }
        let species = (0..n_atoms).map(|i| format!("S{}", i % 2)).collect();
        Trajectory::from_positions(species, frames, 0, 1.0).unwrap()
    }

    #[test]
    fn displacement_of_single_step() {
        let traj = Trajectory::from_positions(
            two_species(),
            vec![
                vec![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]],
                vec![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]],
            ],
            0,
            1.0,
        )
        .unwrap();
        let d = compute_displacements(&traj).unwrap();
        assert_eq!(d.deltas, vec![vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]]);
    }

    #[test]
    fn constant_trajectory_has_zero_deltas() {
        let frame = vec![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let traj =
            Trajectory::from_positions(two_species(), vec![frame; 6], 10, 1.0).unwrap();
        let d = compute_displacements(&traj).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.deltas.iter().flatten().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn deltas_match_successive_differences() {
        let traj = random_walk(2, 3, 7);
        let d = compute_displacements(&traj).unwrap();
        for t in 0..2 {
            for i in 0..2 {
                for c in 0..3 {
                    let expected = traj.positions(t + 1)[i][c] - traj.positions(t)[i][c];
                    assert_eq!(d.deltas[t][i][c], expected);
                }
            }
        }
    }

    #[test]
    fn too_short_for_displacements() {
        let traj =
            Trajectory::from_positions(two_species(), vec![vec![[0.0; 3], [1.0; 3]]], 0, 1.0)
                .unwrap();
        assert!(matches!(
            compute_displacements(&traj),
            Err(Error::TrajectoryTooShort { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn reconstruct_cumulative_sum() {
        let species = two_species();
        let initial = Frame::new(0, vec![[0.0; 3], [9.0; 3]]);
        let deltas = DisplacementSeries {
            deltas: vec![
                vec![[1.0, 0.0, 0.0], [0.0; 3]],
                vec![[0.0, 1.0, 0.0], [0.0; 3]],
            ],
        };
        let traj = reconstruct_positions(&initial, species, &deltas, 1.0).unwrap();
        let first: Vec<Vec3> = (0..3).map(|t| traj.positions(t)[0]).collect();
        assert_eq!(first, vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        assert_eq!(traj.frame(2).step_index, 2);
    }

    #[test]
    fn reconstruct_empty_is_identity() {
        let initial = Frame::new(4, vec![[0.5; 3], [1.5; 3]]);
        let traj = reconstruct_positions(
            &initial,
            two_species(),
            &DisplacementSeries { deltas: vec![] },
            1.0,
        )
        .unwrap();
        assert_eq!(traj.n_frames(), 1);
        assert_eq!(traj.frame(0), &initial);
    }

    #[test]
    fn reconstruct_rejects_atom_count_mismatch() {
        let initial = Frame::new(0, vec![[0.0; 3], [1.0; 3]]);
        let deltas = DisplacementSeries {
            deltas: vec![vec![[0.0; 3]; 3]],
        };
        assert!(matches!(
            reconstruct_positions(&initial, two_species(), &deltas, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn round_trip_random_walk() {
        let traj = random_walk(5, 40, 11);
        let d = compute_displacements(&traj).unwrap();
        let back =
            reconstruct_positions(traj.frame(0), traj.species().to_vec(), &d, 1.0).unwrap();
        for t in 0..traj.n_frames() {
            for i in 0..5 {
                for c in 0..3 {
                    assert!((back.positions(t)[i][c] - traj.positions(t)[i][c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_input() {
        let nan = Trajectory::from_positions(
            two_species(),
            vec![vec![[f64::NAN, 0.0, 0.0], [0.0; 3]]],
            0,
            1.0,
        );
        assert!(nan.is_err());
        let gap = Trajectory::new(
            two_species(),
            vec![
                Frame::new(0, vec![[0.0; 3]; 2]),
                Frame::new(2, vec![[0.0; 3]; 2]),
            ],
            1.0,
        );
        assert!(gap.is_err());
        let dt = Trajectory::from_positions(two_species(), vec![], 0, 0.0);
        assert!(dt.is_err());
        let one_atom = Trajectory::from_positions(vec!["A".into()], vec![], 0, 1.0);
        assert!(one_atom.is_err());
    }

    proptest::proptest! {
        #[test]
        fn displacement_count_and_round_trip(
            n_atoms in 2usize..6,
            n_frames in 2usize..30,
            seed in 0u64..1000,
        ) {
            let traj = random_walk(n_atoms, n_frames, seed);
            let d = compute_displacements(&traj).unwrap();
            proptest::prop_assert_eq!(d.len(), n_frames - 1);
            let back = reconstruct_positions(traj.frame(0), traj.species().to_vec(), &d, 1.0).unwrap();
            for t in 0..n_frames {
                for i in 0..n_atoms {
                    for c in 0..3 {
                        proptest::prop_assert!((back.positions(t)[i][c] - traj.positions(t)[i][c]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
