//! Reading and atomically writing NWF files, plans and reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use archslim_core::nwf::{self, FormatError};
use archslim_core::{ArchitecturePlan, NetworkWeights, PlanError};
use tempfile::NamedTempFile;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Plan { path: PathBuf, source: PlanError },
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Read {
        path: path.to_owned(),
        source,
    })
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<NetworkWeights, IoError> {
    let path = path.as_ref();
    nwf::decode(&read_bytes(path)?).map_err(|source| IoError::Format {
        path: path.to_owned(),
        source,
    })
}

pub fn write_weights(path: impl AsRef<Path>, net: &NetworkWeights) -> Result<(), IoError> {
    write_atomic(path, &nwf::encode(net))
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<ArchitecturePlan, IoError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    ArchitecturePlan::from_json(&text).map_err(|source| IoError::Plan {
        path: path.to_owned(),
        source,
    })
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), IoError> {
    let path = path.as_ref();
    let err = |source| IoError::Write {
        path: path.to_owned(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}
