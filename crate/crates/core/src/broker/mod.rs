//! Durable publish-subscribe broker: named topics stored as append-only log
//! files, consumer groups with committed offsets, at-least-once delivery.

mod client;
pub mod log;
mod server;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub use client::BrokerClient;
pub use server::{serve, BrokerServer, OP_COMMIT, OP_COUNT, OP_POLL, OP_PROBE, OP_PUBLISH};

use crate::model::Timestamp;
use log::{LogError, LogFile};

pub const DEFAULT_TOPIC: &str = "coronaz";
pub const STORE_CONSUMER_GROUP: &str = "db-consumer";
pub const DEFAULT_PORT: u16 = 9092;
const OFFSETS_FILE: &str = "offsets.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrokerRecord {
    pub offset: u64,
    pub payload: Vec<u8>,
    /// Set when the record was appended or, after a restart, replayed.
    pub appended_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("broker unavailable: {0}")]
    Unavailable(String),
    #[error("offset {offset} is beyond the end of the log ({len} records)")]
    OffsetBeyondLog { offset: u64, len: u64 },
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<LogError> for BrokerError {
    fn from(e: LogError) -> Self {
        BrokerError::Storage(e.to_string())
    }
}

impl From<std::io::Error> for BrokerError {
    fn from(e: std::io::Error) -> Self {
        BrokerError::Storage(e.to_string())
    }
}

/// The operations node agents, the consumer and the harness need from a broker,
/// whether it runs in-process or behind a TCP connection.
pub trait BrokerLink: Send + Sync {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BrokerError>;
    /// Up to `max_records` starting at the group's committed offset. Never
    /// advances the commit.
    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<Vec<BrokerRecord>, BrokerError>;
    /// Raises the group's committed offset to `offset` (the next offset to read).
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BrokerError>;
    /// Records not yet committed by the store consumer group.
    fn retained_count(&self, topic: &str) -> Result<u64, BrokerError>;
    fn probe(&self) -> Result<(), BrokerError>;
}

impl<T: BrokerLink + ?Sized> BrokerLink for Arc<T> {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BrokerError> {
        (**self).publish(topic, payload)
    }
    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<Vec<BrokerRecord>, BrokerError> {
        (**self).poll(topic, group, max_records)
    }
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BrokerError> {
        (**self).commit(topic, group, offset)
    }
    fn retained_count(&self, topic: &str) -> Result<u64, BrokerError> {
        (**self).retained_count(topic)
    }
    fn probe(&self) -> Result<(), BrokerError> {
        (**self).probe()
    }
}

#[derive(Debug)]
struct Topic {
    writer: Mutex<LogFile>,
    records: RwLock<Vec<Arc<BrokerRecord>>>,
}

impl Topic {
    fn len(&self) -> u64 {
        self.records.read().unwrap_or_else(|p| p.into_inner()).len() as u64
    }
}

type GroupOffsets = BTreeMap<String, BTreeMap<String, u64>>;

/// In-process broker over a data directory: one `<topic>.log` per topic plus
/// an `offsets.json` sidecar of committed offsets.
#[derive(Debug)]
pub struct Broker {
    dir: PathBuf,
    topics: RwLock<BTreeMap<String, Arc<Topic>>>,
    offsets: Mutex<GroupOffsets>,
}

fn validate_topic(name: &str) -> Result<(), BrokerError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(BrokerError::InvalidTopic(name.to_string()))
    }
}

impl Broker {
    /// Opens the data directory, replaying every topic log found there.
    pub fn open(dir: &Path) -> Result<Self, BrokerError> {
        fs::create_dir_all(dir)?;
        let mut topics = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".log"))
            else {
                continue;
            };
            if validate_topic(name).is_err() {
                continue;
            }
            let name = name.to_string();
            topics.insert(name, Arc::new(Self::load_topic(&path)?));
        }
        let offsets_path = dir.join(OFFSETS_FILE);
        let mut offsets: GroupOffsets = match fs::read(&offsets_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| BrokerError::Storage(format!("{}: {e}", offsets_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => GroupOffsets::new(),
            Err(e) => return Err(e.into()),
        };
        for per_topic in offsets.values_mut() {
            for (topic, committed) in per_topic.iter_mut() {
                let len = topics.get(topic).map_or(0, |t: &Arc<Topic>| t.len());
                *committed = (*committed).min(len);
            }
        }
        Ok(Broker {
            dir: dir.to_path_buf(),
            topics: RwLock::new(topics),
            offsets: Mutex::new(offsets),
        })
    }

    fn load_topic(path: &Path) -> Result<Topic, BrokerError> {
        let (writer, payloads) = LogFile::open(path)?;
        let now = Timestamp::now();
        let records = payloads
            .into_iter()
            .enumerate()
            .map(|(offset, payload)| Arc::new(BrokerRecord { offset: offset as u64, payload, appended_at: now }))
            .collect();
        Ok(Topic { writer: Mutex::new(writer), records: RwLock::new(records) })
    }

    pub fn data_dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, topic: &str) -> PathBuf {
        self.dir.join(format!("{topic}.log"))
    }

    fn topic(&self, name: &str) -> Option<Arc<Topic>> {
        self.topics.read().unwrap_or_else(|p| p.into_inner()).get(name).cloned()
    }

    fn topic_or_create(&self, name: &str) -> Result<Arc<Topic>, BrokerError> {
        if let Some(topic) = self.topic(name) {
            return Ok(topic);
        }
        validate_topic(name)?;
        let mut topics = self.topics.write().unwrap_or_else(|p| p.into_inner());
        if let Some(topic) = topics.get(name) {
            return Ok(topic.clone());
        }
        let topic = Arc::new(Self::load_topic(&self.log_path(name))?);
        topics.insert(name.to_string(), topic.clone());
        Ok(topic)
    }

    /// Number of records in the topic log.
    pub fn len(&self, topic: &str) -> u64 {
        self.topic(topic).map_or(0, |t| t.len())
    }

    pub fn committed(&self, topic: &str, group: &str) -> u64 {
        let offsets = self.offsets.lock().unwrap_or_else(|p| p.into_inner());
        offsets.get(group).and_then(|t| t.get(topic)).copied().unwrap_or(0)
    }

    pub fn retained_count_for(&self, topic: &str, group: &str) -> u64 {
        self.len(topic).saturating_sub(self.committed(topic, group))
    }

    /// Records from `from` onwards, ignoring consumer groups.
    pub fn read_from(&self, topic: &str, from: u64, max_records: usize) -> Vec<BrokerRecord> {
        let Some(topic) = self.topic(topic) else { return Vec::new() };
        let records = topic.records.read().unwrap_or_else(|p| p.into_inner());
        records
            .iter()
            .skip(from as usize)
            .take(max_records)
            .map(|r| (**r).clone())
            .collect()
    }

    fn persist_offsets(&self, offsets: &GroupOffsets) -> Result<(), BrokerError> {
        let tmp = self.dir.join(format!("{OFFSETS_FILE}.tmp"));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&serde_json::to_vec(offsets).map_err(|e| BrokerError::Storage(e.to_string()))?)?;
        file.sync_all()?;
        fs::rename(&tmp, self.dir.join(OFFSETS_FILE))?;
        if let Ok(dir) = fs::File::open(&self.dir) {
            let _ = dir.sync_all();
        }
        Ok(())
    }
}

impl BrokerLink for Broker {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BrokerError> {
        let topic = self.topic_or_create(topic)?;
        let mut writer = topic.writer.lock().unwrap_or_else(|p| p.into_inner());
        writer.append(payload)?;
        let mut records = topic.records.write().unwrap_or_else(|p| p.into_inner());
        let offset = records.len() as u64;
        records.push(Arc::new(BrokerRecord {
            offset,
            payload: payload.to_vec(),
            appended_at: Timestamp::now(),
        }));
        Ok(offset)
    }

    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<Vec<BrokerRecord>, BrokerError> {
        let from = self.committed(topic, group);
        Ok(self.read_from(topic, from, max_records))
    }

    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BrokerError> {
        let len = self.len(topic);
        if offset > len {
            return Err(BrokerError::OffsetBeyondLog { offset, len });
        }
        let mut offsets = self.offsets.lock().unwrap_or_else(|p| p.into_inner());
        let current = offsets.get(group).and_then(|t| t.get(topic)).copied().unwrap_or(0);
        if offset <= current {
            return Ok(());
        }
        let mut updated = offsets.clone();
        updated.entry(group.to_string()).or_default().insert(topic.to_string(), offset);
        self.persist_offsets(&updated)?;
        *offsets = updated;
        Ok(())
    }

    fn retained_count(&self, topic: &str) -> Result<u64, BrokerError> {
        Ok(self.retained_count_for(topic, STORE_CONSUMER_GROUP))
    }

    fn probe(&self) -> Result<(), BrokerError> {
        Ok(())
    }
}

/// Request and response bodies of the framed broker protocol.
pub mod protocol {
    use super::*;

    #[derive(Serialize, Deserialize)]
    pub struct PublishRequest {
        pub topic: String,
        /// Base64 of the raw payload bytes.
        pub payload: String,
    }

    #[derive(Serialize, Deserialize)]
    pub struct PublishResponse {
        pub offset: u64,
    }

    #[derive(Serialize, Deserialize)]
    pub struct PollRequest {
        pub topic: String,
        pub group: String,
        pub max_records: usize,
    }

    #[derive(Serialize, Deserialize)]
    pub struct WireRecord {
        pub offset: u64,
        pub payload: String,
        pub appended_at: Timestamp,
    }

    #[derive(Serialize, Deserialize)]
    pub struct PollResponse {
        pub records: Vec<WireRecord>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct CommitRequest {
        pub topic: String,
        pub group: String,
        pub offset: u64,
    }

    #[derive(Serialize, Deserialize)]
    pub struct CountRequest {
        pub topic: String,
        #[serde(default)]
        pub group: Option<String>,
    }

    #[derive(Serialize, Deserialize)]
    pub struct CountResponse {
        pub count: u64,
    }

    #[derive(Serialize, Deserialize)]
    pub struct Empty {}
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broker() -> (tempfile::TempDir, Broker) {
        let dir = tempfile::tempdir().unwrap();
        let broker = Broker::open(dir.path()).unwrap();
        (dir, broker)
    }

    #[test]
    fn offsets_are_dense_from_zero() {
        let (_dir, b) = broker();
        assert_eq!(b.publish("coronaz", b"a").unwrap(), 0);
        assert_eq!(b.publish("coronaz", b"b").unwrap(), 1);
        assert_eq!(b.publish("coronaz", b"c").unwrap(), 2);
        assert_eq!(b.publish("other", b"x").unwrap(), 0);
    }

    #[test]
    fn poll_does_not_advance() {
        let (_dir, b) = broker();
        assert!(b.poll("coronaz", "g", 10).unwrap().is_empty());
        for p in [b"a", b"b", b"c"] {
            b.publish("coronaz", p).unwrap();
        }
        let first = b.poll("coronaz", "g", 2).unwrap();
        assert_eq!(
            first.iter().map(|r| (r.offset, r.payload.clone())).collect::<Vec<_>>(),
            vec![(0, b"a".to_vec()), (1, b"b".to_vec())]
        );
        assert_eq!(b.poll("coronaz", "g", 2).unwrap(), first);
    }

    #[test]
    fn commit_is_monotone_and_bounded() {
        let (_dir, b) = broker();
        for p in [b"a", b"b", b"c"] {
            b.publish("coronaz", p).unwrap();
        }
        b.commit("coronaz", "g", 2).unwrap();
        assert_eq!(b.poll("coronaz", "g", 10).unwrap()[0].offset, 2);
        b.commit("coronaz", "g", 1).unwrap();
        assert_eq!(b.committed("coronaz", "g"), 2);
        assert!(matches!(
            b.commit("coronaz", "g", 4),
            Err(BrokerError::OffsetBeyondLog { offset: 4, len: 3 })
        ));
        b.commit("coronaz", "g", 3).unwrap();
        assert!(b.poll("coronaz", "g", 10).unwrap().is_empty());
    }

    #[test]
    fn retained_count_tracks_store_group() {
        let (_dir, b) = broker();
        assert_eq!(b.retained_count("coronaz").unwrap(), 0);
        for i in 0..10u8 {
            b.publish("coronaz", &[i]).unwrap();
        }
        assert_eq!(b.retained_count("coronaz").unwrap(), 10);
        b.commit("coronaz", STORE_CONSUMER_GROUP, 10).unwrap();
        assert_eq!(b.retained_count("coronaz").unwrap(), 0);
    }

    #[test]
    fn restart_preserves_payloads_and_commits() {
        let dir = tempfile::tempdir().unwrap();
        {
            let b = Broker::open(dir.path()).unwrap();
            b.publish("coronaz", b"\x00\xffbinary").unwrap();
            b.publish("coronaz", b"{}").unwrap();
            b.commit("coronaz", "g", 1).unwrap();
        }
        let b = Broker::open(dir.path()).unwrap();
        assert_eq!(b.len("coronaz"), 2);
        assert_eq!(b.committed("coronaz", "g"), 1);
        assert_eq!(b.read_from("coronaz", 0, 10)[0].payload, b"\x00\xffbinary");
        assert_eq!(b.publish("coronaz", b"z").unwrap(), 2);
    }

    #[test]
    fn log_file_replay_reproduces_state() {
        let (dir, b) = broker();
        let payloads: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i; i as usize]).collect();
        for p in &payloads {
            b.publish("coronaz", p).unwrap();
        }
        let replayed = log::read_log_file(&dir.path().join("coronaz.log")).unwrap();
        assert_eq!(replayed, payloads);
    }

    #[test]
    fn rejects_path_like_topics() {
        let (_dir, b) = broker();
        assert!(matches!(b.publish("../etc", b"x"), Err(BrokerError::InvalidTopic(_))));
        assert!(matches!(b.publish("", b"x"), Err(BrokerError::InvalidTopic(_))));
    }
}
