//! Persisted artifacts: checkpoints and operator files, as JSON.
//!
//! Matrices are stored row-major as nested arrays. `f64` values round-trip
//! exactly through the JSON encoding.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::EvolutionOperatorModel;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const OPERATOR_VERSION: u32 = 1;

pub use crate::training::Checkpoint;

/// Serde adapter storing a `DMatrix<f64>` as a list of rows.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.nrows(), m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (nrows, ncols, rows): (usize, usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom(format!("matrix rows do not match declared shape {nrows}x{ncols}")));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}

/// Versioned envelope around any persisted payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    #[serde(flatten)]
    payload: T,
}

fn write_json<T: Serialize>(kind: &str, version: u32, payload: &T, path: &Path) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        version,
        payload,
    };
    let text = serde_json::to_string_pretty(&env)?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(kind: &str, version: u32, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if env.kind != kind || env.version != version {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {kind} v{version}, found {} v{}", env.kind, env.version),
        });
    }
    Ok(env.payload)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_json("checkpoint", CHECKPOINT_VERSION, ckpt, path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_json("checkpoint", CHECKPOINT_VERSION, path.as_ref())
}

pub fn save_operator(model: &EvolutionOperatorModel, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct OperatorFile<'a> {
        d: usize,
        #[serde(flatten)]
        model: &'a EvolutionOperatorModel,
    }
    write_json("operator", OPERATOR_VERSION, &OperatorFile { d: model.dim(), model }, path.as_ref())
}

pub fn load_operator(path: impl AsRef<Path>) -> Result<EvolutionOperatorModel> {
    #[derive(Deserialize)]
    struct OperatorFile {
        d: usize,
        #[serde(flatten)]
        model: EvolutionOperatorModel,
    }
    let path = path.as_ref();
    let file: OperatorFile = read_json("operator", OPERATOR_VERSION, path)?;
    if file.model.matrix.shape() != (file.d, file.d) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("operator matrix is not {0}x{0}", file.d),
        });
    }
    Ok(file.model)
}
