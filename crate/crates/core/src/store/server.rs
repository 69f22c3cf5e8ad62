use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;

use super::protocol::*;
use super::{DocumentStore, Store};
use crate::frame::{parse_body, reply, FrameServer, Handler};

pub const OP_UPSERT: u8 = 1;
pub const OP_GET_ALL: u8 = 2;
pub const OP_APPEND_SNAP: u8 = 3;
pub const OP_GET_SNAPS: u8 = 4;
pub const OP_PROBE: u8 = 5;

pub struct StoreServer {
    store: Arc<Store>,
    server: FrameServer,
}

impl StoreServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn kill(self) {
        self.server.kill();
    }
}

pub fn serve(store: Arc<Store>, addr: impl ToSocketAddrs) -> std::io::Result<StoreServer> {
    let target = store.clone();
    let handler: Arc<Handler> = Arc::new(move |op, body| handle(&target, op, body));
    let server = FrameServer::bind(addr, handler)?;
    tracing::info!("store listening on {}", server.local_addr());
    Ok(StoreServer { store, server })
}

fn handle(store: &Store, op: u8, body: &[u8]) -> Result<Vec<u8>, String> {
    match op {
        OP_UPSERT => {
            let req: UpsertRequest = parse_body(body)?;
            store.upsert(&req.doc).map_err(|e| e.to_string())?;
            reply(&Empty {})
        }
        OP_GET_ALL => reply(&DocumentsResponse {
            documents: store.get_all().map_err(|e| e.to_string())?,
        }),
        OP_APPEND_SNAP => {
            let req: AppendSnapshotRequest = parse_body(body)?;
            let sequence = store.append_snapshot(req.taken_at, req.batch).map_err(|e| e.to_string())?;
            reply(&AppendSnapshotResponse { sequence })
        }
        OP_GET_SNAPS => {
            let req: GetSnapshotsRequest = parse_body(body)?;
            reply(&SnapshotsResponse {
                snapshots: store.get_snapshots(req.from, req.limit).map_err(|e| e.to_string())?,
            })
        }
        OP_PROBE => reply(&Empty {}),
        other => Err(format!("unknown opcode {other}")),
    }
}
