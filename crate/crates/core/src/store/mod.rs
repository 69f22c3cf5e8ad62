//! Embedded document store: the latest document per node keyed by uuid, plus
//! an append-only history of snapshots, persisted as a single journal.

mod client;
mod journal;
mod server;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub use client::StoreClient;
pub use journal::{read_journal, Journal, JournalEntry};
pub use server::{serve, StoreServer, OP_APPEND_SNAP, OP_GET_ALL, OP_GET_SNAPS, OP_PROBE, OP_UPSERT};

use crate::model::{ContactRecord, NodeId, NodeStatus, Position, ReportMessage, Timestamp};

pub const DEFAULT_PORT: u16 = 27018;
pub const JOURNAL_FILE: &str = "journal.log";

/// Latest known state of one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub uuid: NodeId,
    pub position: Position,
    pub infected: bool,
    pub timestamp: Timestamp,
    pub alive: bool,
    pub contacts: Vec<ContactRecord>,
    pub last_updated: Timestamp,
}

impl NodeDocument {
    pub fn from_report(report: &ReportMessage, last_updated: Timestamp) -> Self {
        NodeDocument {
            uuid: report.uuid,
            position: report.position,
            infected: report.infected,
            timestamp: report.timestamp,
            alive: report.alive,
            contacts: report.contacts.clone(),
            last_updated,
        }
    }
}

impl NodeStatus for NodeDocument {
    fn infected(&self) -> bool {
        self.infected
    }
    fn alive(&self) -> bool {
        self.alive
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SealReason {
    Full,
    NodeDeath,
}

/// Which broker records produced a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchInfo {
    pub reports: usize,
    pub sealed: SealReason,
    pub first_offset: u64,
    pub last_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sequence: u64,
    pub taken_at: Timestamp,
    pub batch: BatchInfo,
    pub documents: Vec<NodeDocument>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

pub trait DocumentStore: Send + Sync {
    fn upsert(&self, doc: &NodeDocument) -> Result<(), StoreError>;
    fn get_all(&self) -> Result<Vec<NodeDocument>, StoreError>;
    /// Appends a snapshot of every current document and returns its sequence.
    /// A batch whose `last_offset` is not past the newest snapshot's is a
    /// redelivery; the newest sequence is returned and nothing is written.
    fn append_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Result<u64, StoreError>;
    fn get_snapshots(&self, from: u64, limit: usize) -> Result<Vec<Snapshot>, StoreError>;
    fn probe(&self) -> Result<(), StoreError>;
}

impl<T: DocumentStore + ?Sized> DocumentStore for Arc<T> {
    fn upsert(&self, doc: &NodeDocument) -> Result<(), StoreError> {
        (**self).upsert(doc)
    }
    fn get_all(&self) -> Result<Vec<NodeDocument>, StoreError> {
        (**self).get_all()
    }
    fn append_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Result<u64, StoreError> {
        (**self).append_snapshot(taken_at, batch)
    }
    fn get_snapshots(&self, from: u64, limit: usize) -> Result<Vec<Snapshot>, StoreError> {
        (**self).get_snapshots(from, limit)
    }
    fn probe(&self) -> Result<(), StoreError> {
        (**self).probe()
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct StoreState {
    pub documents: BTreeMap<NodeId, NodeDocument>,
    pub snapshots: Vec<Snapshot>,
}

impl StoreState {
    /// Applies one journal entry. Returns false when it changed nothing.
    fn apply(&mut self, entry: JournalEntry) -> bool {
        match entry {
            JournalEntry::Upsert { doc } => {
                if self.documents.get(&doc.uuid) == Some(&doc) {
                    return false;
                }
                self.documents.insert(doc.uuid, doc);
                true
            }
            JournalEntry::Snapshot { snapshot } => {
                self.snapshots.push(snapshot);
                true
            }
        }
    }

    fn is_redelivery(&self, batch: &BatchInfo) -> bool {
        self.snapshots
            .last()
            .is_some_and(|last| batch.last_offset <= last.batch.last_offset)
    }

    fn next_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Snapshot {
        Snapshot {
            sequence: self.snapshots.len() as u64,
            taken_at,
            batch,
            documents: self.documents.values().cloned().collect(),
        }
    }
}

/// Journal-backed store. Without a journal it is purely in memory, which is
/// what the replay oracle uses.
#[derive(Debug)]
pub struct Store {
    path: Option<PathBuf>,
    journal: Mutex<Option<Journal>>,
    state: RwLock<StoreState>,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let (journal, entries) = Journal::open(&path)?;
        let mut state = StoreState::default();
        for entry in entries {
            state.apply(entry);
        }
        Ok(Store {
            path: Some(path),
            journal: Mutex::new(Some(journal)),
            state: RwLock::new(state),
        })
    }

    pub fn in_memory() -> Self {
        Store { path: None, journal: Mutex::new(None), state: RwLock::default() }
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn state(&self) -> StoreState {
        self.state.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn write(&self, entry: JournalEntry) -> Result<(), StoreError> {
        let mut journal = self.journal.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(journal) = journal.as_mut() {
            journal.append(&entry)?;
        }
        self.state.write().unwrap_or_else(|p| p.into_inner()).apply(entry);
        Ok(())
    }
}

impl DocumentStore for Store {
    fn upsert(&self, doc: &NodeDocument) -> Result<(), StoreError> {
        let unchanged = self
            .state
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .documents
            .get(&doc.uuid)
            == Some(doc);
        if unchanged {
            return Ok(());
        }
        self.write(JournalEntry::Upsert { doc: doc.clone() })
    }

    fn get_all(&self) -> Result<Vec<NodeDocument>, StoreError> {
        let state = self.state.read().unwrap_or_else(|p| p.into_inner());
        Ok(state.documents.values().cloned().collect())
    }

    fn append_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Result<u64, StoreError> {
        // The journal lock serializes snapshot numbering against other writers.
        let mut journal = self.journal.lock().unwrap_or_else(|p| p.into_inner());
        let snapshot = {
            let state = self.state.read().unwrap_or_else(|p| p.into_inner());
            if state.is_redelivery(&batch) {
                return Ok(state.snapshots.len() as u64 - 1);
            }
            state.next_snapshot(taken_at, batch)
        };
        let sequence = snapshot.sequence;
        let entry = JournalEntry::Snapshot { snapshot };
        if let Some(journal) = journal.as_mut() {
            journal.append(&entry)?;
        }
        self.state.write().unwrap_or_else(|p| p.into_inner()).apply(entry);
        Ok(sequence)
    }

    fn get_snapshots(&self, from: u64, limit: usize) -> Result<Vec<Snapshot>, StoreError> {
        let state = self.state.read().unwrap_or_else(|p| p.into_inner());
        Ok(state.snapshots.iter().skip(from as usize).take(limit).cloned().collect())
    }

    fn probe(&self) -> Result<(), StoreError> {
        Ok(())
    }
}

pub mod protocol {
    use super::*;

    #[derive(Serialize, Deserialize)]
    pub struct UpsertRequest {
        pub doc: NodeDocument,
    }

    #[derive(Serialize, Deserialize)]
    pub struct DocumentsResponse {
        pub documents: Vec<NodeDocument>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct AppendSnapshotRequest {
        pub taken_at: Timestamp,
        pub batch: BatchInfo,
    }

    #[derive(Serialize, Deserialize)]
    pub struct AppendSnapshotResponse {
        pub sequence: u64,
    }

    #[derive(Serialize, Deserialize)]
    pub struct GetSnapshotsRequest {
        pub from: u64,
        pub limit: usize,
    }

    #[derive(Serialize, Deserialize)]
    pub struct SnapshotsResponse {
        pub snapshots: Vec<Snapshot>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct Empty {}
}
