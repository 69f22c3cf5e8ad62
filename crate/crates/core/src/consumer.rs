//! Store consumer: polls the report topic, seals batches of ten reports (or
//! fewer when a node dies), writes them to the store and only then commits.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::broker::{BrokerLink, BrokerRecord, DEFAULT_TOPIC, STORE_CONSUMER_GROUP};
use crate::model::{ReportMessage, Timestamp};
use crate::store::{BatchInfo, DocumentStore, NodeDocument, SealReason, StoreError};

pub const BATCH_SIZE: usize = 10;
pub const RETRY_INTERVAL: Duration = Duration::from_millis(500);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatedBatch {
    pub reports: Vec<ReportMessage>,
    pub sealed_reason: SealReason,
    /// Offset range covered, including skipped malformed records.
    pub first_offset: u64,
    pub last_offset: u64,
}

impl AggregatedBatch {
    pub fn info(&self) -> BatchInfo {
        BatchInfo {
            reports: self.reports.len(),
            sealed: self.sealed_reason,
            first_offset: self.first_offset,
            last_offset: self.last_offset,
        }
    }

    /// Stamp used for the snapshot and for `last_updated`: the newest report
    /// time in the batch, so replays produce identical documents.
    pub fn taken_at(&self) -> Timestamp {
        self.reports
            .iter()
            .map(|r| r.timestamp)
            .max()
            .expect("sealed batches hold at least one report")
    }
}

/// Accumulates records in offset order and seals batches.
#[derive(Debug)]
pub struct Batcher {
    reports: Vec<ReportMessage>,
    first_offset: u64,
    next_offset: u64,
    malformed: u64,
}

impl Batcher {
    pub fn starting_at(offset: u64) -> Self {
        Batcher { reports: Vec::new(), first_offset: offset, next_offset: offset, malformed: 0 }
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn pending(&self) -> usize {
        self.reports.len()
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    /// Feeds one record. Records below the current position are redeliveries
    /// and ignored. Returns a batch when this record seals one.
    pub fn push(&mut self, record: &BrokerRecord) -> Option<AggregatedBatch> {
        if record.offset < self.next_offset {
            return None;
        }
        debug_assert_eq!(record.offset, self.next_offset, "records must be contiguous");
        self.next_offset = record.offset + 1;
        let report = match ReportMessage::decode(&record.payload) {
            Ok(report) => report,
            Err(e) => {
                tracing::warn!(offset = record.offset, "skipping malformed record: {e}");
                self.malformed += 1;
                return None;
            }
        };
        let death = !report.alive;
        self.reports.push(report);
        let reason = if death {
            SealReason::NodeDeath
        } else if self.reports.len() >= BATCH_SIZE {
            SealReason::Full
        } else {
            return None;
        };
        let batch = AggregatedBatch {
            reports: std::mem::take(&mut self.reports),
            sealed_reason: reason,
            first_offset: self.first_offset,
            last_offset: record.offset,
        };
        self.first_offset = self.next_offset;
        Some(batch)
    }
}

/// Writes a sealed batch: one upsert per node (the batch's last report for
/// that node wins), then one snapshot. Safe to repeat.
pub fn apply_batch(batch: &AggregatedBatch, store: &dyn DocumentStore) -> Result<u64, StoreError> {
    let stamp = batch.taken_at();
    let mut latest: BTreeMap<_, &ReportMessage> = BTreeMap::new();
    for report in &batch.reports {
        latest.insert(report.uuid, report);
    }
    for report in latest.values() {
        store.upsert(&NodeDocument::from_report(report, stamp))?;
    }
    store.append_snapshot(stamp, batch.info())
}

#[derive(Clone, Debug)]
pub struct ConsumerConfig {
    pub topic: String,
    pub group: String,
    pub max_poll: usize,
}

impl Default for ConsumerConfig {
    fn default() -> Self {
        ConsumerConfig {
            topic: DEFAULT_TOPIC.to_string(),
            group: STORE_CONSUMER_GROUP.to_string(),
            max_poll: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dependency {
    Broker,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Nothing new on the topic.
    Idle,
    Progress,
    /// Waiting for a dependency to come back.
    Blocked(Dependency),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConsumerStats {
    pub batches_written: u64,
    pub store_retries: u64,
    pub broker_retries: u64,
}

pub struct Consumer {
    broker: Arc<dyn BrokerLink>,
    store: Arc<dyn DocumentStore>,
    config: ConsumerConfig,
    batcher: Option<Batcher>,
    sealed: Option<AggregatedBatch>,
    commit_due: Option<u64>,
    stats: ConsumerStats,
}

impl Consumer {
    pub fn new(broker: Arc<dyn BrokerLink>, store: Arc<dyn DocumentStore>, config: ConsumerConfig) -> Self {
        Consumer { broker, store, config, batcher: None, sealed: None, commit_due: None, stats: ConsumerStats::default() }
    }

    pub fn stats(&self) -> &ConsumerStats {
        &self.stats
    }

    pub fn malformed(&self) -> u64 {
        self.batcher.as_ref().map_or(0, Batcher::malformed)
    }

    /// Reports accumulated but not sealed yet.
    pub fn pending(&self) -> usize {
        self.batcher.as_ref().map_or(0, Batcher::pending)
    }

    /// One unit of work, never sleeping.
    pub fn step(&mut self) -> Step {
        if let Some(offset) = self.commit_due {
            return match self.broker.commit(&self.config.topic, &self.config.group, offset) {
                Ok(()) => {
                    self.commit_due = None;
                    Step::Progress
                }
                Err(e) => {
                    tracing::warn!("commit of offset {offset} failed: {e}");
                    self.stats.broker_retries += 1;
                    Step::Blocked(Dependency::Broker)
                }
            };
        }
        if let Some(batch) = &self.sealed {
            return match apply_batch(batch, self.store.as_ref()) {
                Ok(sequence) => {
                    tracing::info!(
                        sequence, reports = batch.reports.len(), reason = ?batch.sealed_reason,
                        "batch written"
                    );
                    self.commit_due = Some(batch.last_offset + 1);
                    self.sealed = None;
                    self.stats.batches_written += 1;
                    Step::Progress
                }
                Err(e) => {
                    tracing::warn!("store write failed, holding batch: {e}");
                    self.stats.store_retries += 1;
                    Step::Blocked(Dependency::Store)
                }
            };
        }
        let records = match self.broker.poll(&self.config.topic, &self.config.group, self.config.max_poll) {
            Ok(records) => records,
            Err(e) => {
                tracing::debug!("poll failed: {e}");
                self.stats.broker_retries += 1;
                return Step::Blocked(Dependency::Broker);
            }
        };
        let Some(first) = records.first() else { return Step::Idle };
        let batcher = self.batcher.get_or_insert_with(|| Batcher::starting_at(first.offset));
        let mut fed = false;
        for record in &records {
            if record.offset < batcher.next_offset() {
                continue;
            }
            fed = true;
            if let Some(batch) = batcher.push(record) {
                self.sealed = Some(batch);
                break;
            }
        }
        if fed {
            Step::Progress
        } else {
            Step::Idle
        }
    }

    /// Steps until there is nothing left to do right now.
    pub fn drain(&mut self) -> Step {
        loop {
            match self.step() {
                Step::Progress => continue,
                other => return other,
            }
        }
    }

    /// Runs until `stop` is raised, retrying blocked dependencies every 500 ms.
    pub fn run(&mut self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            match self.step() {
                Step::Progress => {}
                Step::Idle => thread::sleep(Duration::from_millis(50)),
                Step::Blocked(_) => sleep_while_running(RETRY_INTERVAL, stop),
            }
        }
    }
}

fn sleep_while_running(total: Duration, stop: &AtomicBool) {
    let deadline = std::time::Instant::now() + total;
    while !stop.load(Ordering::SeqCst) && std::time::Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
    }
}

/// A consumer on its own thread.
pub struct ConsumerHandle {
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Consumer>,
}

impl ConsumerHandle {
    pub fn spawn(mut consumer: Consumer) -> std::io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new().name("db-consumer".into()).spawn(move || {
            consumer.run(&flag);
            consumer
        })?;
        Ok(ConsumerHandle { stop, thread })
    }

    /// Stops the loop; any unsealed or uncommitted work is simply dropped.
    pub fn kill(self) -> ConsumerStats {
        self.stop.store(true, Ordering::SeqCst);
        self.thread.join().map(|c| c.stats).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::Broker;
    use crate::model::{BroadcastMessage, NodeId, Position};
    use crate::store::Store;

    fn report(node: u8, tick: u64, alive: bool) -> ReportMessage {
        BroadcastMessage {
            uuid: NodeId::from_random_bytes([node; 16]),
            position: Position::new(tick as u32 % 100, 0),
            infected: false,
            timestamp: Timestamp::from_unix_micros(1_606_925_940_000_000).plus_secs(tick),
            alive,
        }
        .with_contacts(vec![])
    }

    fn record(offset: u64, r: &ReportMessage) -> BrokerRecord {
        BrokerRecord { offset, payload: r.encode(), appended_at: Timestamp::from_unix_micros(0) }
    }

    #[test]
    fn seals_at_ten() {
        let mut b = Batcher::starting_at(0);
        for i in 0..9 {
            assert!(b.push(&record(i, &report(1, i, true))).is_none());
        }
        let batch = b.push(&record(9, &report(1, 9, true))).unwrap();
        assert_eq!(batch.reports.len(), 10);
        assert_eq!(batch.sealed_reason, SealReason::Full);
        assert_eq!((batch.first_offset, batch.last_offset), (0, 9));
    }

    #[test]
    fn death_seals_early() {
        let mut b = Batcher::starting_at(0);
        b.push(&record(0, &report(1, 0, true)));
        b.push(&record(1, &report(2, 0, true)));
        let batch = b.push(&record(2, &report(3, 0, false))).unwrap();
        assert_eq!(batch.reports.len(), 3);
        assert_eq!(batch.sealed_reason, SealReason::NodeDeath);
        assert!(!batch.reports.last().unwrap().alive);
    }

    #[test]
    fn malformed_records_are_skipped_but_covered() {
        let mut b = Batcher::starting_at(0);
        let junk = BrokerRecord { offset: 0, payload: b"nope".to_vec(), appended_at: Timestamp::from_unix_micros(0) };
        assert!(b.push(&junk).is_none());
        let batch = b.push(&record(1, &report(1, 0, false))).unwrap();
        assert_eq!((batch.first_offset, batch.last_offset, batch.reports.len()), (0, 1, 1));
        assert_eq!(b.malformed(), 1);
    }

    #[test]
    fn redelivered_records_are_ignored() {
        let mut b = Batcher::starting_at(0);
        b.push(&record(0, &report(1, 0, true)));
        b.push(&record(0, &report(1, 0, true)));
        assert_eq!(b.pending(), 1);
    }

    #[test]
    fn apply_batch_is_last_write_wins_and_idempotent() {
        let store = Store::in_memory();
        let batch = AggregatedBatch {
            reports: vec![report(1, 0, true), report(2, 1, true), report(1, 2, true)],
            sealed_reason: SealReason::Full,
            first_offset: 0,
            last_offset: 2,
        };
        apply_batch(&batch, &store).unwrap();
        let once = store.state();
        apply_batch(&batch, &store).unwrap();
        assert_eq!(store.state(), once);
        assert_eq!(once.documents.len(), 2);
        let a = &once.documents[&NodeId::from_random_bytes([1; 16])];
        assert_eq!(a.position, Position::new(2, 0));
        assert_eq!(once.snapshots.len(), 1);
    }

    #[test]
    fn ten_reports_one_batch_committed() {
        let dir = tempfile::tempdir().unwrap();
        let broker = Arc::new(Broker::open(dir.path()).unwrap());
        let store = Arc::new(Store::in_memory());
        for i in 0..10 {
            broker.publish(DEFAULT_TOPIC, &report(1, i, true).encode()).unwrap();
        }
        let mut consumer = Consumer::new(broker.clone(), store.clone(), ConsumerConfig::default());
        assert_eq!(consumer.drain(), Step::Idle);
        assert_eq!(store.state().snapshots.len(), 1);
        assert_eq!(broker.committed(DEFAULT_TOPIC, STORE_CONSUMER_GROUP), 10);
    }

    #[test]
    fn partial_batch_stays_uncommitted() {
        let dir = tempfile::tempdir().unwrap();
        let broker = Arc::new(Broker::open(dir.path()).unwrap());
        let store = Arc::new(Store::in_memory());
        for i in 0..4 {
            broker.publish(DEFAULT_TOPIC, &report(1, i, true).encode()).unwrap();
        }
        let mut consumer = Consumer::new(broker.clone(), store.clone(), ConsumerConfig::default());
        consumer.drain();
        assert_eq!(consumer.pending(), 4);
        assert_eq!(broker.retained_count(DEFAULT_TOPIC).unwrap(), 4);
        assert!(store.state().documents.is_empty());
    }
}
