use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NodeDocument, Snapshot, StoreError};
use crate::broker::log::{LogError, LogFile};

/// One durable store mutation. Journal records use the same length-prefixed
/// framing as broker topic logs, with a JSON entry as payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    Upsert { doc: NodeDocument },
    Snapshot { snapshot: Snapshot },
}

#[derive(Debug)]
pub struct Journal {
    log: LogFile,
}

impl From<LogError> for StoreError {
    fn from(e: LogError) -> Self {
        StoreError::Storage(e.to_string())
    }
}

impl Journal {
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalEntry>), StoreError> {
        let (log, payloads) = LogFile::open(path)?;
        let entries = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| {
                serde_json::from_slice(p)
                    .map_err(|e| StoreError::Storage(format!("{} entry {i}: {e}", path.display())))
            })
            .collect::<Result<_, _>>()?;
        Ok((Journal { log }, entries))
    }

    pub fn append(&mut self, entry: &JournalEntry) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(entry).map_err(|e| StoreError::Storage(e.to_string()))?;
        self.log.append(&bytes)?;
        Ok(())
    }
}

/// Reads every entry of a journal file, failing on torn frames.
pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>, StoreError> {
    crate::broker::log::read_log_file(path)?
        .iter()
        .map(|p| serde_json::from_slice(p).map_err(|e| StoreError::Storage(e.to_string())))
        .collect()
}
