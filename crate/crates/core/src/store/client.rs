use std::net::ToSocketAddrs;

use super::protocol::*;
use super::server::{OP_APPEND_SNAP, OP_GET_ALL, OP_GET_SNAPS, OP_PROBE, OP_UPSERT};
use super::{BatchInfo, DocumentStore, NodeDocument, Snapshot, StoreError};
use crate::frame::{CallError, FrameClient};
use crate::model::Timestamp;

/// TCP client for a [`super::StoreServer`].
#[derive(Debug)]
pub struct StoreClient {
    inner: FrameClient,
}

impl StoreClient {
    pub fn new(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(StoreClient { inner: FrameClient::new(addr)? })
    }

    fn call<Req: serde::Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        op: u8,
        req: &Req,
    ) -> Result<Resp, StoreError> {
        self.inner.call(op, req).map_err(|e| match e {
            CallError::Unavailable(m) => StoreError::Unavailable(m),
            CallError::Rejected(m) | CallError::Protocol(m) => StoreError::Protocol(m),
        })
    }
}

impl DocumentStore for StoreClient {
    fn upsert(&self, doc: &NodeDocument) -> Result<(), StoreError> {
        let _: Empty = self.call(OP_UPSERT, &UpsertRequest { doc: doc.clone() })?;
        Ok(())
    }

    fn get_all(&self) -> Result<Vec<NodeDocument>, StoreError> {
        let resp: DocumentsResponse = self.call(OP_GET_ALL, &Empty {})?;
        Ok(resp.documents)
    }

    fn append_snapshot(&self, taken_at: Timestamp, batch: BatchInfo) -> Result<u64, StoreError> {
        let resp: AppendSnapshotResponse =
            self.call(OP_APPEND_SNAP, &AppendSnapshotRequest { taken_at, batch })?;
        Ok(resp.sequence)
    }

    fn get_snapshots(&self, from: u64, limit: usize) -> Result<Vec<Snapshot>, StoreError> {
        let resp: SnapshotsResponse = self.call(OP_GET_SNAPS, &GetSnapshotsRequest { from, limit })?;
        Ok(resp.snapshots)
    }

    fn probe(&self) -> Result<(), StoreError> {
        let _: Empty = self.call(OP_PROBE, &Empty {})?;
        Ok(())
    }
}
