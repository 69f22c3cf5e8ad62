//! Delivery of proximity broadcasts between agents.
//!
//! [`UdpTransport`] sends real UDP broadcasts; [`MemoryNetwork`] is an
//! in-process network with a hearing radius and seeded loss, used by the
//! deterministic driver and the fault experiments.

mod memory;
mod udp;

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use memory::{MemoryNetwork, MemoryTransport, PositionSource};
pub use udp::UdpTransport;

use crate::model::NodeId;

pub const DEFAULT_BROADCAST_PORT: u16 = 4711;
/// Largest payload accepted for a single broadcast.
pub const MAX_DATAGRAM: usize = 60_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Udp,
    InMemory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HearingRadius {
    Unlimited,
    Cells(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub mode: TransportMode,
    pub broadcast_port: u16,
    /// Destination of UDP broadcasts.
    pub broadcast_address: IpAddr,
    /// In-memory reachability; UDP mode always reaches the whole segment.
    pub hearing_radius: HearingRadius,
    /// In-memory only.
    pub loss_probability: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            mode: TransportMode::InMemory,
            broadcast_port: DEFAULT_BROADCAST_PORT,
            broadcast_address: IpAddr::V4(Ipv4Addr::BROADCAST),
            hearing_radius: HearingRadius::Unlimited,
            loss_probability: 0.0,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        if self.broadcast_port < 1024 {
            return Err(TransportError::Config(format!(
                "broadcast_port {} outside [1024, 65535]",
                self.broadcast_port
            )));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(TransportError::Config(format!(
                "loss_probability {} outside [0, 1]",
                self.loss_probability
            )));
        }
        if let HearingRadius::Cells(r) = self.hearing_radius {
            if !(r.is_finite() && r >= 0.0) {
                return Err(TransportError::Config(format!("hearing_radius {r} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub address: IpAddr,
    pub port: u16,
}

impl From<SocketAddr> for Endpoint {
    fn from(addr: SocketAddr) -> Self {
        Endpoint { address: addr.ip(), port: addr.port() }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", SocketAddr::new(self.address, self.port))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datagram {
    pub payload: Vec<u8>,
    pub from: Endpoint,
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("payload of {0} bytes exceeds the {MAX_DATAGRAM}-byte datagram cap")]
    PayloadTooLarge(usize),
    #[error("peer {0} is already registered")]
    DuplicatePeer(NodeId),
    #[error("transport closed")]
    Closed,
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid transport configuration: {0}")]
    Config(String),
}

/// What an agent needs from the network. `broadcast` and `receive` are called
/// from different threads.
pub trait Transport: Send + Sync {
    /// Fire-and-forget delivery to every reachable peer.
    fn broadcast(&self, payload: &[u8]) -> Result<(), TransportError>;
    /// Next datagram from another node, or `None` once `timeout` passes.
    fn receive(&self, timeout: Duration) -> Result<Option<Datagram>, TransportError>;
    fn local_endpoint(&self) -> Endpoint;
    fn close(&self);
}

fn check_size(payload: &[u8]) -> Result<(), TransportError> {
    if payload.len() > MAX_DATAGRAM {
        Err(TransportError::PayloadTooLarge(payload.len()))
    } else {
        Ok(())
    }
}
