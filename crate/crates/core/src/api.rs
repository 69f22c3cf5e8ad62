//! HTTP query service over the document store.
//!
//! Failures are reported as `503 {"error":"unavailable"}` and nothing more:
//! a viewer only needs to know the data is not there right now.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::model::{compute_stats, Stats, Timestamp};
use crate::store::{BatchInfo, DocumentStore, NodeDocument, Snapshot};

pub const DEFAULT_PORT: u16 = 8080;
pub const MAX_SNAPSHOT_LIMIT: usize = 1000;
const DEFAULT_SNAPSHOT_LIMIT: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataResponse {
    pub nodes: Vec<NodeDocument>,
    pub stats: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotView {
    pub sequence: u64,
    pub taken_at: Timestamp,
    pub batch: BatchInfo,
    pub stats: Stats,
    pub documents: Vec<NodeDocument>,
}

impl From<Snapshot> for SnapshotView {
    fn from(s: Snapshot) -> Self {
        SnapshotView {
            sequence: s.sequence,
            taken_at: s.taken_at,
            batch: s.batch,
            stats: compute_stats(&s.documents),
            documents: s.documents,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotsResponse {
    pub snapshots: Vec<SnapshotView>,
}

type SharedStore = Arc<dyn DocumentStore>;

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/data", get(data))
        .route("/snapshots", get(snapshots))
        .route("/health", get(health))
        .with_state(store)
}

fn unavailable() -> Response {
    (StatusCode::SERVICE_UNAVAILABLE, Json(serde_json::json!({"error": "unavailable"}))).into_response()
}

fn bad_request(reason: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({"error": reason}))).into_response()
}

async fn blocking<T, F>(store: SharedStore, f: F) -> Result<T, Response>
where
    T: Send + 'static,
    F: FnOnce(&dyn DocumentStore) -> Result<T, crate::store::StoreError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(store.as_ref())).await {
        Ok(Ok(value)) => Ok(value),
        Ok(Err(e)) => {
            tracing::warn!("store read failed: {e}");
            Err(unavailable())
        }
        Err(e) => {
            tracing::error!("store task failed: {e}");
            Err(unavailable())
        }
    }
}

async fn data(State(store): State<SharedStore>) -> Response {
    match blocking(store, |s| s.get_all()).await {
        Ok(nodes) => {
            let stats = compute_stats(&nodes);
            Json(DataResponse { nodes, stats }).into_response()
        }
        Err(resp) => resp,
    }
}

fn parse_param<T: std::str::FromStr>(params: &HashMap<String, String>, name: &str, default: T) -> Result<T, String> {
    match params.get(name) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|_| format!("invalid {name}: {raw:?}")),
    }
}

async fn snapshots(State(store): State<SharedStore>, Query(params): Query<HashMap<String, String>>) -> Response {
    let query = parse_param(&params, "from", 0u64).and_then(|from| {
        let limit = parse_param(&params, "limit", DEFAULT_SNAPSHOT_LIMIT)?;
        if !(1..=MAX_SNAPSHOT_LIMIT).contains(&limit) {
            return Err(format!("limit must be in 1..={MAX_SNAPSHOT_LIMIT}"));
        }
        Ok((from, limit))
    });
    let (from, limit) = match query {
        Ok(q) => q,
        Err(reason) => return bad_request(reason),
    };
    match blocking(store, move |s| s.get_snapshots(from, limit)).await {
        Ok(list) => Json(SnapshotsResponse { snapshots: list.into_iter().map(SnapshotView::from).collect() })
            .into_response(),
        Err(resp) => resp,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

/// A running API on its own runtime thread.
pub struct ApiServer {
    local_addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ApiServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting and drops in-flight connections.
    pub fn kill(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve(store: SharedStore, addr: impl ToSocketAddrs) -> std::io::Result<ApiServer> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .thread_name("api")
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::Builder::new().name("api-server".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    tracing::error!("api listener: {e}");
                    return;
                }
            };
            tokio::select! {
                result = axum::serve(listener, router(store)) => {
                    if let Err(e) = result {
                        tracing::error!("api server stopped: {e}");
                    }
                }
                _ = rx => {}
            }
        });
        runtime.shutdown_background();
    })?;
    Ok(ApiServer { local_addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Blocking GET returning status and body, without treating 4xx/5xx as errors.
pub fn http_get(url: &str) -> Result<(u16, String), ureq::Error> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(5)))
        .build()
        .into();
    let mut response = agent.get(url).call()?;
    let status = response.status().as_u16();
    let body = response.body_mut().read_to_string()?;
    Ok((status, body))
}
