//! Run logs. Every file is hashed as it is written so the report can carry
//! digests even when nothing goes to disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub struct HashingWriter {
    inner: Option<BufWriter<File>>,
    hasher: Sha256,
    bytes: u64,
}

impl HashingWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let inner = match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Self { inner, hasher: Sha256::new(), bytes: 0 })
    }

    pub fn write_bytes(&mut self, data: &[u8]) -> Result<()> {
        self.hasher.update(data);
        self.bytes += data.len() as u64;
        if let Some(w) = &mut self.inner {
            w.write_all(data)?;
        }
        Ok(())
    }

    /// One JSON document per line.
    pub fn write_line<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.write_bytes(&line)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.inner {
            w.flush()?;
        }
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Hex SHA-256 of everything written so far.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

impl std::fmt::Debug for HashingWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashingWriter").field("bytes", &self.bytes).field("on_disk", &self.inner.is_some()).finish()
    }
}

/// Writes a whole JSON document and returns its digest.
pub fn write_document<T: Serialize>(dir: Option<&Path>, name: &str, doc: &T) -> Result<String> {
    let mut w = HashingWriter::create(dir.map(|d| d.join(name)).as_deref())?;
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    w.write_bytes(&bytes)?;
    w.flush()?;
    Ok(w.digest())
}

pub fn log_path(dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(name))
}
