//! Append-only JSONL journal holding usage events, pin changes and note
//! snapshots. Replaying the journal rebuilds the service state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::note::Note;
use super::session::{Pins, UsageEvent};

#[derive(Error, Debug)]
pub enum StoreError {
    #[error("journal {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("journal {path} line {line}: {source}")]
    Corrupt {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum JournalRecord {
    Event { event: UsageEvent },
    Pins { note_id: String, pins: Pins },
    Note { note: Note },
}

/// State recovered from a journal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub events: Vec<UsageEvent>,
    pub pins: BTreeMap<String, Pins>,
    pub notes: BTreeMap<String, Note>,
}

impl Replay {
    fn apply(&mut self, record: JournalRecord) {
        match record {
            JournalRecord::Event { event } => self.events.push(event),
            JournalRecord::Pins { note_id, pins } => {
                self.pins.insert(note_id, pins);
            }
            JournalRecord::Note { note } => {
                self.notes.insert(note.id.clone(), note);
            }
        }
    }
}

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl Store {
    /// Open or create the journal, returning what it already holds.
    pub fn open(path: &Path) -> Result<(Self, Replay), StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let replay = Self::replay(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                writer: BufWriter::new(file),
            },
            replay,
        ))
    }

    pub fn replay(path: &Path) -> Result<Replay, StoreError> {
        let mut replay = Replay::default();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(replay),
            Err(source) => {
                return Err(StoreError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
            replay.apply(record);
        }
        Ok(replay)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append and flush one record.
    pub fn append(&mut self, record: &JournalRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).expect("journal records serialize");
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}
