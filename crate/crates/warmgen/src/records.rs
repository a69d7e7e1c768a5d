//! Result streams, run manifests and CSV export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use warmgen_core::training::EpochRecord;

use crate::error::{io_err, Error, Result};

/// Append-only JSONL stream of epoch records. Each record is flushed as soon
/// as it is written, so an interrupted run keeps its completed epochs.
pub struct EpochStream {
    path: PathBuf,
    file: File,
}

impl EpochStream {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        append_epoch_record(&mut self.file, record).map_err(io_err(&self.path))
    }
}

pub fn append_epoch_record(out: &mut impl Write, record: &EpochRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
    writeln!(out, "{line}")?;
    out.flush()
}

pub fn read_epoch_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// SHA-256 over labelled chunks; each chunk is prefixed by its label and length
/// so that moving bytes between chunks changes the digest.
pub fn content_hash<'a>(chunks: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in chunks {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Resolved configuration, one `key = value` per line.
    pub config: String,
    pub data_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Artifact name to path relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// Writes the manifest; refuses to replace an existing one.
    pub fn write_new(&self, path: &Path) -> Result<()> {
        let mut file = OpenOptions::new().write(true).create_new(true).open(path).map_err(io_err(path))?;
        let text = serde_json::to_string_pretty(self)?;
        writeln!(file, "{text}").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Epoch records as CSV with a header row.
pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,valid_metric,seconds\n");
    for r in records {
        let secs = r.seconds.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.valid_metric, secs);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}
