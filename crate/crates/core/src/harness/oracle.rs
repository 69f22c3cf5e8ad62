//! Single-pass replay of a broker log through the consumer's batching and
//! write rules, used as the reference for the live store.

use std::path::Path;

use crate::broker::log::{read_log_file, LogError};
use crate::broker::BrokerRecord;
use crate::consumer::{apply_batch, Batcher};
use crate::model::Timestamp;
use crate::store::{Store, StoreState};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleState {
    pub state: StoreState,
    pub records: u64,
    /// Reports after the last sealed batch.
    pub pending_reports: usize,
    /// Offset the consumer group should have committed.
    pub sealed_through: u64,
    pub malformed: u64,
}

pub fn replay_oracle(log_path: &Path) -> Result<OracleState, LogError> {
    Ok(replay_payloads(read_log_file(log_path)?))
}

pub fn replay_payloads(payloads: Vec<Vec<u8>>) -> OracleState {
    let store = Store::in_memory();
    let mut batcher = Batcher::starting_at(0);
    let mut sealed_through = 0;
    let records = payloads.len() as u64;
    for (offset, payload) in payloads.into_iter().enumerate() {
        let record = BrokerRecord { offset: offset as u64, payload, appended_at: Timestamp::from_unix_micros(0) };
        if let Some(batch) = batcher.push(&record) {
            apply_batch(&batch, &store).expect("in-memory store does not fail");
            sealed_through = batch.last_offset + 1;
        }
    }
    OracleState {
        state: store.state(),
        records,
        pending_reports: batcher.pending(),
        sealed_through,
        malformed: batcher.malformed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::log::LogFile;
    use crate::model::{BroadcastMessage, NodeId, Position};

    fn report(alive: bool) -> Vec<u8> {
        BroadcastMessage {
            uuid: NodeId::from_random_bytes([4; 16]),
            position: Position::new(3, 3),
            infected: true,
            timestamp: Timestamp::from_unix_micros(1_606_925_940_000_000),
            alive,
        }
        .with_contacts(vec![])
        .encode()
    }

    #[test]
    fn empty_log_gives_empty_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.log");
        std::fs::write(&path, b"").unwrap();
        assert_eq!(replay_oracle(&path).unwrap(), OracleState::default());
    }

    #[test]
    fn one_death_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.log");
        let (mut log, _) = LogFile::open(&path).unwrap();
        log.append(&report(false)).unwrap();
        let oracle = replay_oracle(&path).unwrap();
        assert_eq!(oracle.state.documents.len(), 1);
        assert!(!oracle.state.documents.values().next().unwrap().alive);
        assert_eq!(oracle.state.snapshots.len(), 1);
        assert_eq!(oracle.sealed_through, 1);
    }

    #[test]
    fn corrupt_frame_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.log");
        let (mut log, _) = LogFile::open(&path).unwrap();
        log.append(&report(true)).unwrap();
        let good = std::fs::metadata(&path).unwrap().len();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 50, 1, 2]);
        std::fs::write(&path, bytes).unwrap();
        match replay_oracle(&path) {
            Err(LogError::Corrupt { offset, .. }) => assert_eq!(offset, good),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
