//! Append-only, newline-delimited JSON journals.
//!
//! Every durable store in the framework is one journal file. A record is a
//! single JSON document terminated by `\n`; the file is only ever appended
//! to, and state is rebuilt at startup by replaying it front to back.
//!
//! A final line without its terminating newline is a torn write from a crash
//! and is discarded on open. Any other line that fails to decode is
//! corruption and is reported with its 1-based line number.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt record in {path} at line {line}: {reason}")]
    Corrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cannot encode record: {0}")]
    Encode(String),
}

enum Sink {
    File { file: File, path: PathBuf },
    Memory(Arc<Mutex<Vec<String>>>),
    Writer { writer: Box<dyn Write + Send>, name: String },
}

/// Handle to one journal. Appends are serialized internally.
pub struct Journal {
    sink: Mutex<Sink>,
    lines: Mutex<u64>,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("name", &self.name()).finish()
    }
}

impl Journal {
    /// Opens (creating if needed) a journal file and returns its replayable
    /// contents, with any torn tail removed.
    pub fn open<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(Self, Vec<T>), StoreError> {
        let path = path.as_ref().to_path_buf();
        let display = path.display().to_string();
        let io_err = |source| StoreError::Io {
            path: display.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut records = Vec::new();
        let mut good_len: u64 = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            let lines = reader.split(b'\n');
            let raw_len = std::fs::metadata(&path).map_err(io_err)?.len();
            for (i, chunk) in lines.enumerate() {
                let chunk = chunk.map_err(io_err)?;
                let lineno = i + 1;
                let consumed = good_len + chunk.len() as u64 + 1;
                let terminated = consumed <= raw_len;
                if !terminated {
                    // torn tail
                    break;
                }
                good_len = consumed;
                if chunk.iter().all(|b| b.is_ascii_whitespace()) {
                    continue;
                }
                let record = serde_json::from_slice::<T>(&chunk).map_err(|e| StoreError::Corrupt {
                    path: display.clone(),
                    line: lineno,
                    reason: e.to_string(),
                })?;
                records.push(record);
            }
            if good_len < raw_len {
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err)?;
                f.set_len(good_len).map_err(io_err)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let journal = Journal {
            sink: Mutex::new(Sink::File { file, path }),
            lines: Mutex::new(records.len() as u64),
        };
        Ok((journal, records))
    }

    /// A journal held in memory. The shared buffer can be replayed with
    /// [`Journal::replay_memory`] to simulate a restart.
    pub fn memory() -> (Self, Arc<Mutex<Vec<String>>>) {
        let buf = Arc::new(Mutex::new(Vec::new()));
        (Self::from_buffer(buf.clone()), buf)
    }

    /// Reopens an in-memory journal over an existing buffer.
    pub fn from_buffer(buf: Arc<Mutex<Vec<String>>>) -> Self {
        let n = buf.lock().len() as u64;
        Journal {
            sink: Mutex::new(Sink::Memory(buf)),
            lines: Mutex::new(n),
        }
    }

    /// Journal that writes into an arbitrary sink. Used to exercise storage
    /// failure paths.
    pub fn from_writer(name: impl Into<String>, writer: Box<dyn Write + Send>) -> Self {
        Journal {
            sink: Mutex::new(Sink::Writer {
                writer,
                name: name.into(),
            }),
            lines: Mutex::new(0),
        }
    }

    pub fn replay_memory<T: DeserializeOwned>(buf: &Mutex<Vec<String>>) -> Result<Vec<T>, StoreError> {
        buf.lock()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                    path: "<memory>".into(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn name(&self) -> String {
        match &*self.sink.lock() {
            Sink::File { path, .. } => path.display().to_string(),
            Sink::Memory(_) => "<memory>".into(),
            Sink::Writer { name, .. } => name.clone(),
        }
    }

    /// Number of records written so far, including replayed ones.
    pub fn len(&self) -> u64 {
        *self.lines.lock()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one record. Returns only after the line has been handed to
    /// the operating system.
    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).map_err(|e| StoreError::Encode(e.to_string()))?;
        line.push('\n');
        let mut sink = self.sink.lock();
        match &mut *sink {
            Sink::File { file, path } => file.write_all(line.as_bytes()).map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?,
            Sink::Memory(buf) => {
                line.pop();
                buf.lock().push(line);
            }
            Sink::Writer { writer, name } => writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.flush())
                .map_err(|source| StoreError::Io {
                    path: name.clone(),
                    source,
                })?,
        }
        *self.lines.lock() += 1;
        Ok(())
    }

    /// Forces written records to stable storage.
    pub fn sync(&self) -> Result<(), StoreError> {
        if let Sink::File { file, path } = &*self.sink.lock() {
            file.sync_data().map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}
