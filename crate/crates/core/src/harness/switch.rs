use std::sync::{Arc, RwLock};

use crate::broker::{BrokerError, BrokerLink, BrokerRecord};
use crate::model::Timestamp;
use crate::store::{BatchInfo, DocumentStore, NodeDocument, Snapshot, StoreError};

/// A component slot that can be emptied (killed) and refilled (restored).
/// While empty, every call fails as if the component were unreachable.
pub struct Switch<T> {
    inner: RwLock<Option<Arc<T>>>,
}

impl<T> Switch<T> {
    pub fn new(value: T) -> Self {
        Switch { inner: RwLock::new(Some(Arc::new(value))) }
    }

    pub fn current(&self) -> Option<Arc<T>> {
        self.inner.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Empties the slot and returns what was in it.
    pub fn take(&self) -> Option<Arc<T>> {
        self.inner.write().unwrap_or_else(|p| p.into_inner()).take()
    }

    pub fn set(&self, value: T) {
        *self.inner.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(value));
    }

    pub fn is_up(&self) -> bool {
        self.current().is_some()
    }
}

impl<T: BrokerLink> Switch<T> {
    fn broker(&self) -> Result<Arc<T>, BrokerError> {
        self.current().ok_or_else(|| BrokerError::Unavailable("broker is down".into()))
    }
}

impl<T: BrokerLink> BrokerLink for Switch<T> {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BrokerError> {
        self.broker()?.publish(topic, payload)
    }
    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<Vec<BrokerRecord>, BrokerError> {
        self.broker()?.poll(topic, group, max_records)
    }
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BrokerError> {
        self.broker()?.commit(topic, group, offset)
    }
    fn retained_count(&self, topic: &str) -> Result<u64, BrokerError> {
        self.broker()?.retained_count(topic)
    }
    fn probe(&self) -> Result<(), BrokerError> {
        self.broker()?.probe()
    }
}

impl<T: DocumentStore> Switch<T> {
    fn store(&self) -> Result<Arc<T>, StoreError> {
        self.current().ok_or_else(|| StoreError::Unavailable("store is down".into()))
    }
}

impl<T: DocumentStore> DocumentStore for Switch<T> {
    fn upsert(&self, doc: &NodeDocument) -> Result<(), StoreError> {
        self.store()?.upsert(doc)
    }
    fn get_all(&self) -> Result<Vec<NodeDocument>, StoreError> {
        self.store()?.get_all()
    }
    fn append_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Result<u64, StoreError> {
        self.store()?.append_snapshot(taken_at, batch)
    }
    fn get_snapshots(&self, from: u64, limit: usize) -> Result<Vec<Snapshot>, StoreError> {
        self.store()?.get_snapshots(from, limit)
    }
    fn probe(&self) -> Result<(), StoreError> {
        self.store()?.probe()
    }
}
