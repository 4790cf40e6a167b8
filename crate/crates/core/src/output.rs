//! Report files with a reproducibility header.
//!
//! JSON files wrap the payload as `{"header": ..., "body": ...}`. CSV files
//! start with one `# ` comment line holding the header as JSON, followed by
//! an ordinary header row.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration of the run.
    pub config: serde_json::Value,
}

impl RunHeader {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: "mvsens".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
        }
    }
}

#[derive(Serialize)]
struct Wrapped<'a, B: Serialize> {
    header: &'a RunHeader,
    body: &'a B,
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn write_json<B: Serialize>(path: impl AsRef<Path>, header: &RunHeader, body: &B) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, &Wrapped { header, body })?;
    writeln!(f).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn write_csv(path: impl AsRef<Path>, header: &RunHeader, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    writeln!(f, "# {}", serde_json::to_string(header)?)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Reads back the header line of a CSV written by [`write_csv`].
pub fn read_csv_header(path: impl AsRef<Path>) -> Result<RunHeader> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let mut line = String::new();
    BufReader::new(f)
        .read_line(&mut line)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let json = line.strip_prefix("# ").ok_or_else(|| Error::Header("missing '# ' header line".into()))?;
    Ok(serde_json::from_str(json.trim_end())?)
}
