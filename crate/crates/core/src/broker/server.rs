use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::protocol::*;
use super::{Broker, BrokerLink, STORE_CONSUMER_GROUP};
use crate::frame::{parse_body, reply, FrameServer, Handler};

pub const OP_PUBLISH: u8 = 1;
pub const OP_POLL: u8 = 2;
pub const OP_COMMIT: u8 = 3;
pub const OP_COUNT: u8 = 4;
pub const OP_PROBE: u8 = 5;

/// A broker served over the framed TCP protocol.
pub struct BrokerServer {
    broker: Arc<Broker>,
    server: FrameServer,
}

impl BrokerServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    /// Stops serving immediately. Every acknowledged publish is already on disk.
    pub fn kill(self) {
        self.server.kill();
    }
}

pub fn serve(broker: Arc<Broker>, addr: impl ToSocketAddrs) -> std::io::Result<BrokerServer> {
    let target = broker.clone();
    let handler: Arc<Handler> = Arc::new(move |op, body| handle(&target, op, body));
    let server = FrameServer::bind(addr, handler)?;
    tracing::info!("broker listening on {}", server.local_addr());
    Ok(BrokerServer { broker, server })
}

fn handle(broker: &Broker, op: u8, body: &[u8]) -> Result<Vec<u8>, String> {
    match op {
        OP_PUBLISH => {
            let req: PublishRequest = parse_body(body)?;
            let payload = STANDARD.decode(&req.payload).map_err(|e| format!("bad payload: {e}"))?;
            let offset = broker.publish(&req.topic, &payload).map_err(|e| e.to_string())?;
            reply(&PublishResponse { offset })
        }
        OP_POLL => {
            let req: PollRequest = parse_body(body)?;
            let records = broker
                .poll(&req.topic, &req.group, req.max_records)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|r| WireRecord {
                    offset: r.offset,
                    payload: STANDARD.encode(&r.payload),
                    appended_at: r.appended_at,
                })
                .collect();
            reply(&PollResponse { records })
        }
        OP_COMMIT => {
            let req: CommitRequest = parse_body(body)?;
            broker.commit(&req.topic, &req.group, req.offset).map_err(|e| e.to_string())?;
            reply(&Empty {})
        }
        OP_COUNT => {
            let req: CountRequest = parse_body(body)?;
            let group = req.group.as_deref().unwrap_or(STORE_CONSUMER_GROUP);
            reply(&CountResponse { count: broker.retained_count_for(&req.topic, group) })
        }
        OP_PROBE => reply(&Empty {}),
        other => Err(format!("unknown opcode {other}")),
    }
}
