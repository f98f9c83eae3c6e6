//! CSV and flat binary trajectory files.
//!
//! CSV: optional `# dt=<value>` comment line, a header `x0,x1,...`, then one
//! state per line. Binary: magic `EVOP`, `u32` version, `u32` number of
//! states, `u32` dimension, `f64` dt, then the row-major `f64` payload, all
//! little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{PairDataset, Trajectory};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVOP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Csv,
    Binary,
}

impl TrajectoryFormat {
    /// `.csv` maps to CSV, everything else to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TrajectoryFormat::Csv,
            _ => TrajectoryFormat::Binary,
        }
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        message: message.into(),
    }
}

pub fn load_trajectory(path: impl AsRef<Path>, format: TrajectoryFormat) -> Result<Trajectory> {
    let path = path.as_ref();
    match format {
        TrajectoryFormat::Csv => load_csv(path),
        TrajectoryFormat::Binary => load_binary(path),
    }
}

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>, format: TrajectoryFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        TrajectoryFormat::Csv => save_csv(traj, path),
        TrajectoryFormat::Binary => save_binary(traj, path),
    }
}

fn load_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let mut dt = 1.0;
    let mut start = 0u64;
    let mut header: Option<usize> = None;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("dt=") {
                dt = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, format!("line {}: bad dt value `{v}`", line_no + 1)))?;
            } else if let Some(v) = comment.trim().strip_prefix("start=") {
                start = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, format!("line {}: bad start index `{v}`", line_no + 1)))?;
            }
            continue;
        }
        let Some(dim) = header else {
            let names: Vec<&str> = line.split(',').map(str::trim).collect();
            for (j, name) in names.iter().enumerate() {
                if *name != format!("x{j}") {
                    return Err(parse_err(path, format!("malformed header: expected `x{j}`, found `{name}`")));
                }
            }
            header = Some(names.len());
            continue;
        };
        let before = data.len();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, format!("row {rows}, column {col}: cannot parse `{}`", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("row {rows}, column {col}: non-finite value")));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(parse_err(
                path,
                format!("row {rows}: expected {dim} columns, found {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    let dim = header.ok_or_else(|| parse_err(path, "missing header row"))?;
    Trajectory::with_start(data, dim, dt, start).map_err(|e| parse_err(path, e.to_string()))
}

fn save_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# dt={}", traj.dt())?;
    if traj.start_index() != 0 {
        writeln!(w, "# start={}", traj.start_index())?;
    }
    let header: Vec<String> = (0..traj.dim()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..traj.len() {
        let row: Vec<String> = traj.state(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn load_binary(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(parse_err(path, "bad magic bytes (expected EVOP)"));
    }
    let version = read_u32(&bytes, 4);
    if version != VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let n = read_u32(&bytes, 8) as usize;
    let dim = read_u32(&bytes, 12) as usize;
    let dt = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * dim * 8 {
        return Err(parse_err(
            path,
            format!("dimension mismatch: header says {n}x{dim}, payload has {} values", payload.len() / 8),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(path, format!("row {}, column {}: non-finite value", pos / dim, pos % dim)));
    }
    Trajectory::new(data, dim, dt).map_err(|e| parse_err(path, e.to_string()))
}

fn save_binary(traj: &Trajectory, path: &Path) -> Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")));
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&to_u32(traj.len())?.to_le_bytes())?;
    w.write_all(&to_u32(traj.dim())?.to_le_bytes())?;
    w.write_all(&traj.dt().to_le_bytes())?;
    for v in traj.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a pair dataset as CSV with columns `x0..,y0..`.
pub fn save_pairs_csv(pairs: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    let d = pairs.sample_dim();
    let header: Vec<String> = (0..d)
        .map(|j| format!("x{j}"))
        .chain((0..d).map(|j| format!("y{j}")))
        .collect();
    writeln!(w, "# lag={} history={} dt={}", pairs.lag(), pairs.history(), pairs.dt())?;
    writeln!(w, "{}", header.join(","))?;
    for i in 0..pairs.len() {
        let row: Vec<String> = pairs.x(i).iter().chain(pairs.y(i)).map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
