//! Snapshot export for playback: one JSON frame per snapshot plus an index.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::api::{http_get, SnapshotsResponse, MAX_SNAPSHOT_LIMIT};
use crate::model::{compute_stats, NodeId, NodeStatus, Position, Stats, Timestamp};
use crate::store::NodeDocument;

pub const INDEX_FILE: &str = "index.json";

/// Display class of a node: blue, red or gray on the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLabel {
    Safe,
    Infected,
    Dead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameNode {
    pub uuid: NodeId,
    /// Grid position multiplied by the scale factor.
    pub position: Position,
    pub infected: bool,
    pub alive: bool,
    pub label: NodeLabel,
}

impl NodeStatus for FrameNode {
    fn infected(&self) -> bool {
        self.infected
    }
    fn alive(&self) -> bool {
        self.alive
    }
}

impl FrameNode {
    pub fn from_document(doc: &NodeDocument, scale_factor: u32) -> Self {
        let label = match (doc.alive, doc.infected) {
            (false, _) => NodeLabel::Dead,
            (true, true) => NodeLabel::Infected,
            (true, false) => NodeLabel::Safe,
        };
        FrameNode {
            uuid: doc.uuid,
            position: Position::new(doc.position.x * scale_factor, doc.position.y * scale_factor),
            infected: doc.infected,
            alive: doc.alive,
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub sequence: u64,
    pub taken_at: Timestamp,
    pub stats: Stats,
    pub nodes: Vec<FrameNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub scale_factor: u32,
    pub frames: Vec<String>,
}

pub fn frame_file_name(sequence: u64) -> String {
    format!("frame-{sequence:06}.json")
}

/// Pages through `/snapshots` on the API at `api_address` (host:port or a
/// base URL) and writes the frames and index into `out_dir`.
pub fn export_frames(api_address: &str, out_dir: &Path, scale_factor: u32) -> Result<FrameIndex, HarnessError> {
    let base = if api_address.starts_with("http://") || api_address.starts_with("https://") {
        api_address.trim_end_matches('/').to_string()
    } else {
        format!("http://{api_address}")
    };
    std::fs::create_dir_all(out_dir)?;
    let mut index = FrameIndex { scale_factor, frames: Vec::new() };
    let mut from = 0u64;
    loop {
        let url = format!("{base}/snapshots?from={from}&limit={MAX_SNAPSHOT_LIMIT}");
        let (status, body) = http_get(&url).map_err(|e| HarnessError::ApiUnreachable(e.to_string()))?;
        if status != 200 {
            return Err(HarnessError::ApiUnreachable(format!("GET {url} returned {status}")));
        }
        let page: SnapshotsResponse =
            serde_json::from_str(&body).map_err(|e| HarnessError::Artifact(format!("bad /snapshots body: {e}")))?;
        let Some(last) = page.snapshots.last().map(|s| s.sequence) else { break };
        for snapshot in &page.snapshots {
            let nodes: Vec<FrameNode> =
                snapshot.documents.iter().map(|d| FrameNode::from_document(d, scale_factor)).collect();
            let frame = Frame {
                sequence: snapshot.sequence,
                taken_at: snapshot.taken_at,
                stats: compute_stats(&nodes),
                nodes,
            };
            let name = frame_file_name(frame.sequence);
            write_json(&out_dir.join(&name), &frame)?;
            index.frames.push(name);
        }
        from = last + 1;
    }
    write_json(&out_dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_vec(value).map_err(|e| HarnessError::Artifact(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api;
    use crate::model::Timestamp;
    use crate::store::{BatchInfo, DocumentStore, SealReason, Store};
    use std::sync::Arc;

    fn doc(n: u8, position: Position, infected: bool, alive: bool) -> NodeDocument {
        let t = Timestamp::from_unix_micros(0);
        NodeDocument {
            uuid: NodeId::from_random_bytes([n; 16]),
            position,
            infected,
            timestamp: t,
            alive,
            contacts: vec![],
            last_updated: t,
        }
    }

    #[test]
    fn scales_and_labels() {
        let node = FrameNode::from_document(&doc(1, Position::new(1, 5), false, true), 5);
        assert_eq!(node.position, Position::new(5, 25));
        assert_eq!(node.label, NodeLabel::Safe);
        assert_eq!(FrameNode::from_document(&doc(1, Position::new(0, 0), true, true), 5).label, NodeLabel::Infected);
        assert_eq!(FrameNode::from_document(&doc(1, Position::new(0, 0), true, false), 5).label, NodeLabel::Dead);
    }

    #[test]
    fn exports_every_snapshot() {
        let store = Arc::new(Store::in_memory());
        let server = api::serve(store.clone(), "127.0.0.1:0").unwrap();
        let out = tempfile::tempdir().unwrap();
        let index = export_frames(&server.local_addr().to_string(), out.path(), 5).unwrap();
        assert!(index.frames.is_empty());

        store.upsert(&doc(1, Position::new(1, 5), true, false)).unwrap();
        for i in 0..3 {
            let batch = BatchInfo { reports: 1, sealed: SealReason::NodeDeath, first_offset: i, last_offset: i };
            store.append_snapshot(Timestamp::from_unix_micros(0), batch).unwrap();
        }
        let index = export_frames(&server.local_addr().to_string(), out.path(), 5).unwrap();
        assert_eq!(index.frames, vec!["frame-000000.json", "frame-000001.json", "frame-000002.json"]);
        let frame: Frame = serde_json::from_slice(&std::fs::read(out.path().join(&index.frames[2])).unwrap()).unwrap();
        assert_eq!(frame.nodes[0].position, Position::new(5, 25));
        assert_eq!(frame.stats, compute_stats(&frame.nodes));
        assert_eq!(frame.stats.dead_zombies, 1);
    }

    #[test]
    fn api_down_is_an_error() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_frames(&format!("127.0.0.1:{port}"), out.path(), 5),
            Err(HarnessError::ApiUnreachable(_))
        ));
    }
}
