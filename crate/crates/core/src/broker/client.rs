use std::net::ToSocketAddrs;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::protocol::*;
use super::server::{OP_COMMIT, OP_COUNT, OP_POLL, OP_PROBE, OP_PUBLISH};
use super::{BrokerError, BrokerLink, BrokerRecord};
use crate::frame::{CallError, FrameClient};

/// TCP client for a [`super::BrokerServer`].
#[derive(Debug)]
pub struct BrokerClient {
    inner: FrameClient,
}

impl BrokerClient {
    pub fn new(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(BrokerClient { inner: FrameClient::new(addr)? })
    }

    pub fn retained_count_for(&self, topic: &str, group: &str) -> Result<u64, BrokerError> {
        let resp: CountResponse = self.call(
            OP_COUNT,
            &CountRequest { topic: topic.into(), group: Some(group.into()) },
        )?;
        Ok(resp.count)
    }

    fn call<Req: serde::Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        op: u8,
        req: &Req,
    ) -> Result<Resp, BrokerError> {
        self.inner.call(op, req).map_err(|e| match e {
            CallError::Unavailable(m) => BrokerError::Unavailable(m),
            CallError::Rejected(m) | CallError::Protocol(m) => BrokerError::Protocol(m),
        })
    }
}

impl BrokerLink for BrokerClient {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BrokerError> {
        let resp: PublishResponse = self.call(
            OP_PUBLISH,
            &PublishRequest { topic: topic.into(), payload: STANDARD.encode(payload) },
        )?;
        Ok(resp.offset)
    }

    fn poll(&self, topic: &str, group: &str, max_records: usize) -> Result<Vec<BrokerRecord>, BrokerError> {
        let resp: PollResponse = self.call(
            OP_POLL,
            &PollRequest { topic: topic.into(), group: group.into(), max_records },
        )?;
        resp.records
            .into_iter()
            .map(|r| {
                Ok(BrokerRecord {
                    offset: r.offset,
                    payload: STANDARD.decode(&r.payload).map_err(|e| BrokerError::Protocol(e.to_string()))?,
                    appended_at: r.appended_at,
                })
            })
            .collect()
    }

    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BrokerError> {
        let _: Empty = self.call(
            OP_COMMIT,
            &CommitRequest { topic: topic.into(), group: group.into(), offset },
        )?;
        Ok(())
    }

    fn retained_count(&self, topic: &str) -> Result<u64, BrokerError> {
        let resp: CountResponse = self.call(OP_COUNT, &CountRequest { topic: topic.into(), group: None })?;
        Ok(resp.count)
    }

    fn probe(&self) -> Result<(), BrokerError> {
        let _: Empty = self.call(OP_PROBE, &Empty {})?;
        Ok(())
    }
}
