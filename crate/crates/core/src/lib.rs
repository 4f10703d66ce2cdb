//! Item-to-item retrieval embeddings trained on search logs with a
//! multi-objective clipped softmax loss and graph contrastive learning.
//!
//! The pipeline runs `datagen → graph → train → retrieval → eval`; see the
//! [`pipeline`] module for the end-to-end driver used by the CLI.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod train;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use error::{Error, Result};
pub use scalar::{f128, Scalar};

pub type ItemId = u32;
pub type CategoryId = u32;
pub type QueryId = u32;
pub type UserId = u32;

pub type Model = model::EmbeddingModel<f64>;
pub type Model32 = model::EmbeddingModel<f32>;
pub type LossReport = loss::LossReport<f64>;
pub type Gradients = model::Gradients<f64>;
pub type ScoredCandidates = loss::ScoredCandidates<f64>;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut file = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    file.sync_all().map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
