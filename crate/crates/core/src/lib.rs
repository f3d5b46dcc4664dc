//! Everything between tokenized SMILES and metric reports: knowledge-graph
//! embeddings, the classifier, pretraining and fine-tuning loops, dataset
//! splits and evaluation metrics.

pub mod datasets;
pub mod error;
pub mod fixtures;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use error::{CoreError, ErrorClass, Result};

/// Writes `bytes` to a temporary sibling, syncs it and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CoreError::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CoreError::io(path, e)
    })
}
