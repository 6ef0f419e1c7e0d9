//! Shared file-format plumbing: schema versioning and path-annotated I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Version written into every file this crate emits. Readers accept any
/// minor version of the same major.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Error)]
#[error("unsupported schema_version {found:?} (supported major version {supported})")]
pub struct SchemaError {
    pub found: String,
    pub supported: String,
}

fn major(v: &str) -> Option<&str> {
    v.split('.').next().filter(|m| !m.is_empty() && m.chars().all(|c| c.is_ascii_digit()))
}

pub fn check_schema(version: &str) -> Result<(), SchemaError> {
    match (major(version), major(SCHEMA_VERSION)) {
        (Some(a), Some(b)) if a == b => Ok(()),
        _ => Err(SchemaError {
            found: version.to_string(),
            supported: major(SCHEMA_VERSION).unwrap_or("?").to_string(),
        }),
    }
}

/// I/O failure annotated with the offending path.
#[derive(Debug, Error)]
#[error("{path}: {source}")]
pub struct FileError {
    pub path: PathBuf,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl FileError {
    pub fn new(path: &Path, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>, FileError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| FileError::new(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, FileError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| FileError::new(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| FileError::new(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    serde_json::from_reader(open(path)?).map_err(|e| FileError::new(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    use std::io::Write;
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| FileError::new(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| FileError::new(path, e))
}
