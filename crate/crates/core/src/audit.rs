//! Append-only record sinks.
//!
//! A sink exposes exactly one mutating operation, [`AppendSink::append`].
//! There is no delete, truncate or rewrite path, so a holder of a sink can
//! add evidence but never remove it.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("audit sink I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit record serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("audit sink unavailable: {0}")]
    Unavailable(String),
}

pub trait AppendSink<T>: Send + Sync {
    fn append(&self, record: &T) -> Result<(), SinkError>;
}

/// In-memory sink. Readers get copies; the stored sequence only grows.
#[derive(Debug)]
pub struct MemorySink<T> {
    records: Mutex<Vec<T>>,
}

impl<T> Default for MemorySink<T> {
    fn default() -> Self {
        Self {
            records: Mutex::new(Vec::new()),
        }
    }
}

impl<T: Clone> MemorySink<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Vec<T> {
        self.records.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Clone + Send + Sync> AppendSink<T> for MemorySink<T> {
    fn append(&self, record: &T) -> Result<(), SinkError> {
        self.records.lock().push(record.clone());
        Ok(())
    }
}

/// Newline-delimited JSON file opened in append mode. Each record is written
/// with a single `write_all` under the lock so concurrent appends never
/// interleave within a line.
#[derive(Debug)]
pub struct JsonLinesFile {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonLinesFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SinkError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<T: Serialize> AppendSink<T> for JsonLinesFile {
    fn append(&self, record: &T) -> Result<(), SinkError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock();
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }
}

/// Writes every record to each inner sink; reports the first failure after
/// attempting all of them.
pub struct FanOut<T> {
    sinks: Vec<std::sync::Arc<dyn AppendSink<T>>>,
}

impl<T> FanOut<T> {
    pub fn new(sinks: Vec<std::sync::Arc<dyn AppendSink<T>>>) -> Self {
        Self { sinks }
    }
}

impl<T: Send + Sync> AppendSink<T> for FanOut<T> {
    fn append(&self, record: &T) -> Result<(), SinkError> {
        let mut first_err = None;
        for sink in &self.sinks {
            if let Err(e) = sink.append(record) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
    }

    #[test]
    fn memory_sink_only_grows() {
        let sink = MemorySink::new();
        sink.append(&Rec { n: 1 }).unwrap();
        let before = sink.snapshot();
        sink.append(&Rec { n: 2 }).unwrap();
        let after = sink.snapshot();
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(after.len(), 2);
    }

    #[test]
    fn file_sink_appends_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("access.log");
        {
            let sink = JsonLinesFile::open(&path).unwrap();
            sink.append(&Rec { n: 1 }).unwrap();
        }
        let sink = JsonLinesFile::open(&path).unwrap();
        sink.append(&Rec { n: 2 }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<Rec> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs, vec![Rec { n: 1 }, Rec { n: 2 }]);
    }

    #[test]
    fn concurrent_appends_keep_lines_whole() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let sink = std::sync::Arc::new(JsonLinesFile::open(&path).unwrap());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let sink = sink.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        sink.append(&Rec { n: t * 100 + i }).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 400);
        for line in text.lines() {
            serde_json::from_str::<Rec>(line).unwrap();
        }
    }
}
