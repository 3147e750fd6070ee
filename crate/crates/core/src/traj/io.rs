//! Extended-XYZ and CSV trajectory files.
//!
//! XYZ frames carry `step=<int>` and `dt_fs=<float>` in the comment line.
//! CSV files use the header `step,atom_id,species,x,y,z`, optionally preceded
//! by `#` comment lines; the writer emits `# dt_fs=<float>` first so the time
//! step survives a round trip. Coordinates are written with Rust's shortest
//! round-trip float formatting, so write followed by read is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Frame, Trajectory, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFormat {
    #[default]
    Xyz,
    Csv,
}

impl TrajectoryFormat {
    /// Guesses the format from a file extension (`.xyz`/`.extxyz` or `.csv`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "extxyz" => Some(Self::Xyz),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

impl TrajectoryFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Xyz => "xyz",
            Self::Csv => "csv",
        }
    }
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" | "extxyz" => Ok(Self::Xyz),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown trajectory format `{other}`"))),
        }
    }
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        TrajectoryFormat::Xyz => read_xyz(reader, path),
        TrajectoryFormat::Csv => read_csv(reader, path),
    }
}

pub fn write_trajectory(traj: &Trajectory, path: &Path, format: TrajectoryFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        TrajectoryFormat::Xyz => write_xyz(traj, &mut w)?,
        TrajectoryFormat::Csv => write_csv(traj, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("invalid {what} `{tok}`")))
}

fn write_xyz<W: Write>(traj: &Trajectory, w: &mut W) -> Result<()> {
    for frame in traj.frames() {
        writeln!(w, "{}", traj.n_atoms())?;
        writeln!(
            w,
            "Properties=species:S:1:pos:R:3 step={} dt_fs={}",
            frame.step_index,
            traj.dt_fs()
        )?;
        for (s, p) in traj.species().iter().zip(&frame.positions) {
            writeln!(w, "{} {} {} {}", s, p[0], p[1], p[2])?;
        }
    }
    Ok(())
}

/// Pulls `key=value` out of an XYZ comment line.
fn comment_value<'a>(comment: &'a str, key: &str) -> Option<&'a str> {
    comment.split_whitespace().find_map(|tok| {
        let (k, v) = tok.split_once('=')?;
        (k == key).then_some(v.trim_matches('"'))
    })
}

fn read_xyz<R: BufRead>(reader: R, path: &Path) -> Result<Trajectory> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut species: Option<Vec<String>> = None;
    let mut frames = Vec::new();
    let mut dt_fs = None;

    loop {
        let (count_line, count) = match lines.next() {
            None => break,
            Some((n, l)) => (n, l?),
        };
        if count.trim().is_empty() {
            continue;
        }
        let n_atoms: usize = count
            .trim()
            .parse()
            .map_err(|_| parse_err(path, count_line, format!("invalid atom count `{count}`")))?;
        if let Some(sp) = &species {
            if sp.len() != n_atoms {
                return Err(Error::InconsistentAtomCount {
                    path: path.to_path_buf(),
                    line: count_line,
                    expected: sp.len(),
                    got: n_atoms,
                });
            }
        }
        let (comment_line, comment) = lines
            .next()
            .ok_or_else(|| parse_err(path, count_line + 1, "missing comment line"))?;
        let comment = comment?;
        let step = match comment_value(&comment, "step") {
            Some(v) => v
                .parse::<i64>()
                .map_err(|_| parse_err(path, comment_line, format!("invalid step `{v}`")))?,
            None => frames
                .last()
                .map_or(0, |f: &Frame| f.step_index + 1),
        };
        if dt_fs.is_none() {
            if let Some(v) = comment_value(&comment, "dt_fs") {
                dt_fs = Some(parse_f64(v, path, comment_line, "dt_fs")?);
            }
        }

        let mut frame_species = Vec::with_capacity(n_atoms);
        let mut positions: Vec<Vec3> = Vec::with_capacity(n_atoms);
        for _ in 0..n_atoms {
            let (n, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, comment_line + 1, "unexpected end of file"))?;
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 4 {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected `<species> <x> <y> <z>`, got `{line}`"),
                ));
            }
            frame_species.push(toks[0].to_string());
            positions.push([
                parse_f64(toks[1], path, n, "x")?,
                parse_f64(toks[2], path, n, "y")?,
                parse_f64(toks[3], path, n, "z")?,
            ]);
        }
        match &species {
            None => species = Some(frame_species),
            Some(sp) if *sp != frame_species => {
                return Err(parse_err(
                    path,
                    comment_line,
                    "species order differs from the first frame",
                ))
            }
            _ => {}
        }
        frames.push(Frame::new(step, positions));
    }

    let species = species.ok_or_else(|| parse_err(path, 1, "no frames"))?;
    Trajectory::new(species, frames, dt_fs.unwrap_or(1.0))
}

fn write_csv<W: Write>(traj: &Trajectory, w: &mut W) -> Result<()> {
    writeln!(w, "# dt_fs={}", traj.dt_fs())?;
    writeln!(w, "step,atom_id,species,x,y,z")?;
    for frame in traj.frames() {
        for (i, (s, p)) in traj.species().iter().zip(&frame.positions).enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                frame.step_index, i, s, p[0], p[1], p[2]
            )?;
        }
    }
    Ok(())
}

const CSV_COLUMNS: [&str; 6] = ["step", "atom_id", "species", "x", "y", "z"];

fn read_csv<R: BufRead>(reader: R, path: &Path) -> Result<Trajectory> {
    let mut dt_fs = None;
    let mut header: Option<[usize; 6]> = None;
    let mut species: Vec<String> = Vec::new();
    let mut n_atoms: Option<usize> = None;
    let mut frames: Vec<Frame> = Vec::new();
    let mut current: Option<(i64, Vec<Vec3>, Vec<String>, usize)> = None;

    let finish = |cur: (i64, Vec<Vec3>, Vec<String>, usize),
                      species: &mut Vec<String>,
                      n_atoms: &mut Option<usize>,
                      frames: &mut Vec<Frame>|
     -> Result<()> {
        let (step, pos, sp, line) = cur;
        match *n_atoms {
            None => {
                *n_atoms = Some(pos.len());
                *species = sp;
            }
            Some(n) if n != pos.len() => {
                return Err(Error::InconsistentAtomCount {
                    path: path.to_path_buf(),
                    line,
                    expected: n,
                    got: pos.len(),
                })
            }
            Some(_) => {
                if *species != sp {
                    return Err(parse_err(path, line, "species differ between frames"));
                }
            }
        }
        frames.push(Frame::new(step, pos));
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(v) = comment_value(rest, "dt_fs") {
                dt_fs = Some(parse_f64(v, path, n, "dt_fs")?);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let Some(cols) = header else {
            let mut cols = [0usize; 6];
            for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
                *slot = fields
                    .iter()
                    .position(|f| *f == name)
                    .ok_or_else(|| parse_err(path, n, format!("missing column `{name}`")))?;
            }
            header = Some(cols);
            continue;
        };
        let get = |k: usize| -> Result<&str> {
            fields.get(cols[k]).copied().ok_or_else(|| {
                parse_err(path, n, format!("row is missing column `{}`", CSV_COLUMNS[k]))
            })
        };
        let step: i64 = get(0)?
            .parse()
            .map_err(|_| parse_err(path, n, "invalid `step`"))?;
        let atom_id: usize = get(1)?
            .parse()
            .map_err(|_| parse_err(path, n, "invalid `atom_id`"))?;
        let sp = get(2)?.to_string();
        let p = [
            parse_f64(get(3)?, path, n, "x")?,
            parse_f64(get(4)?, path, n, "y")?,
            parse_f64(get(5)?, path, n, "z")?,
        ];

        if current.as_ref().is_some_and(|c| c.0 != step) {
            let done = current.take().unwrap();
            finish(done, &mut species, &mut n_atoms, &mut frames)?;
        }
        let cur = current.get_or_insert_with(|| (step, Vec::new(), Vec::new(), n));
        if atom_id != cur.1.len() {
            return Err(parse_err(
                path,
                n,
                format!("atom_id {atom_id} out of order (expected {})", cur.1.len()),
            ));
        }
        cur.1.push(p);
        cur.2.push(sp);
    }
    if header.is_none() {
        return Err(parse_err(path, 1, "missing header"));
    }
    if let Some(done) = current.take() {
        finish(done, &mut species, &mut n_atoms, &mut frames)?;
    }
    if frames.is_empty() {
        return Err(parse_err(path, 1, "no rows"));
    }
    Trajectory::new(species, frames, dt_fs.unwrap_or(1.0))
}
