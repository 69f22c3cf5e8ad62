use std::collections::{BTreeMap, VecDeque};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_size, Datagram, Endpoint, HearingRadius, Transport, TransportError};
use crate::model::{in_infection_range, NodeId, Position};

/// Yields a peer's current position when a broadcast is evaluated.
pub type PositionSource = Arc<dyn Fn() -> Position + Send + Sync>;

#[derive(Default)]
struct Inbox {
    queue: Mutex<VecDeque<Datagram>>,
    ready: Condvar,
    closed: AtomicBool,
}

struct Peer {
    position: PositionSource,
    inbox: Arc<Inbox>,
    endpoint: Endpoint,
}

struct Net {
    peers: BTreeMap<NodeId, Peer>,
    radius: HearingRadius,
    loss_probability: f64,
    rng: ChaCha8Rng,
    next_host: u32,
    delivered: u64,
}

/// In-process broadcast domain. Peers are visited in ascending id order and
/// loss draws come from one seeded generator, so delivery is reproducible.
#[derive(Clone)]
pub struct MemoryNetwork {
    net: Arc<Mutex<Net>>,
}

impl MemoryNetwork {
    pub fn new(radius: HearingRadius, loss_probability: f64, seed: u64) -> Self {
        MemoryNetwork {
            net: Arc::new(Mutex::new(Net {
                peers: BTreeMap::new(),
                radius,
                loss_probability,
                rng: ChaCha8Rng::seed_from_u64(seed),
                next_host: 2,
                delivered: 0,
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Net> {
        self.net.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register_peer(&self, id: NodeId, position: PositionSource) -> Result<MemoryTransport, TransportError> {
        let mut net = self.lock();
        if net.peers.contains_key(&id) {
            return Err(TransportError::DuplicatePeer(id));
        }
        // Hosts get distinct addresses on a private /16, as containers on a bridge network would.
        let host = net.next_host;
        net.next_host += 1;
        let endpoint = Endpoint {
            address: IpAddr::V4(Ipv4Addr::new(172, 18, (host >> 8) as u8, host as u8)),
            port: 40_000 + (host % 20_000) as u16,
        };
        let inbox = Arc::new(Inbox::default());
        net.peers.insert(id, Peer { position, inbox: inbox.clone(), endpoint });
        Ok(MemoryTransport { network: self.clone(), id, inbox, endpoint })
    }

    pub fn unregister_peer(&self, id: NodeId) {
        if let Some(peer) = self.lock().peers.remove(&id) {
            peer.inbox.closed.store(true, Ordering::SeqCst);
            peer.inbox.ready.notify_all();
        }
    }

    pub fn peer_count(&self) -> usize {
        self.lock().peers.len()
    }

    /// Datagrams handed to inboxes so far.
    pub fn delivered(&self) -> u64 {
        self.lock().delivered
    }

    fn deliver(&self, sender: NodeId, payload: &[u8]) -> Result<(), TransportError> {
        let mut net = self.lock();
        let net = &mut *net;
        let Some(source) = net.peers.get(&sender) else {
            return Err(TransportError::Closed);
        };
        let from = source.endpoint;
        let origin = (source.position)();
        for (id, peer) in &net.peers {
            if *id == sender {
                continue;
            }
            if let HearingRadius::Cells(radius) = net.radius {
                if !in_infection_range(origin, (peer.position)(), radius) {
                    continue;
                }
            }
            if net.loss_probability > 0.0 && net.rng.random_bool(net.loss_probability) {
                continue;
            }
            let mut queue = peer.inbox.queue.lock().unwrap_or_else(|p| p.into_inner());
            queue.push_back(Datagram { payload: payload.to_vec(), from });
            peer.inbox.ready.notify_one();
            net.delivered += 1;
        }
        Ok(())
    }
}

/// One peer's attachment to a [`MemoryNetwork`].
pub struct MemoryTransport {
    network: MemoryNetwork,
    id: NodeId,
    inbox: Arc<Inbox>,
    endpoint: Endpoint,
}

impl MemoryTransport {
    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Everything queued right now, without waiting.
    pub fn drain(&self) -> Vec<Datagram> {
        self.inbox.queue.lock().unwrap_or_else(|p| p.into_inner()).drain(..).collect()
    }
}

impl Transport for MemoryTransport {
    fn broadcast(&self, payload: &[u8]) -> Result<(), TransportError> {
        check_size(payload)?;
        if self.inbox.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        self.network.deliver(self.id, payload)
    }

    fn receive(&self, timeout: Duration) -> Result<Option<Datagram>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut queue = self.inbox.queue.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(datagram) = queue.pop_front() {
                return Ok(Some(datagram));
            }
            if self.inbox.closed.load(Ordering::SeqCst) {
                return Err(TransportError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            queue = self
                .inbox
                .ready
                .wait_timeout(queue, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn local_endpoint(&self) -> Endpoint {
        self.endpoint
    }

    fn close(&self) {
        self.network.unregister_peer(self.id);
    }
}

impl Drop for MemoryTransport {
    fn drop(&mut self) {
        self.network.unregister_peer(self.id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u8) -> NodeId {
        NodeId::from_random_bytes([n; 16])
    }

    fn at(x: u32, y: u32) -> PositionSource {
        Arc::new(move || Position::new(x, y))
    }

    const NOW: Duration = Duration::ZERO;

    #[test]
    fn unlimited_radius_reaches_every_other_peer_once() {
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 0.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let peers: Vec<_> = (1..=3).map(|n| net.register_peer(id(n), at(50, 50)).unwrap()).collect();
        sender.broadcast(b"hello").unwrap();
        for peer in &peers {
            let got = peer.receive(NOW).unwrap().unwrap();
            assert_eq!(got.payload, b"hello");
            assert_eq!(got.from, sender.local_endpoint());
            assert!(peer.receive(NOW).unwrap().is_none());
        }
        assert!(sender.receive(Duration::from_millis(10)).unwrap().is_none());
    }

    #[test]
    fn hearing_radius_limits_delivery() {
        let net = MemoryNetwork::new(HearingRadius::Cells(2.0), 0.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let near = net.register_peer(id(1), at(1, 0)).unwrap();
        let far = net.register_peer(id(2), at(5, 5)).unwrap();
        sender.broadcast(b"x").unwrap();
        assert!(near.receive(NOW).unwrap().is_some());
        assert!(far.receive(NOW).unwrap().is_none());
    }

    #[test]
    fn certain_loss_delivers_nothing() {
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 1.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let peer = net.register_peer(id(1), at(0, 0)).unwrap();
        for _ in 0..20 {
            sender.broadcast(b"x").unwrap();
        }
        assert!(peer.receive(NOW).unwrap().is_none());
        assert_eq!(net.delivered(), 0);
    }

    #[test]
    fn registration_lifecycle() {
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 0.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let peer = net.register_peer(id(1), at(0, 0)).unwrap();
        assert!(matches!(net.register_peer(id(1), at(0, 0)), Err(TransportError::DuplicatePeer(_))));
        sender.broadcast(b"a").unwrap();
        assert!(peer.receive(NOW).unwrap().is_some());
        peer.close();
        sender.broadcast(b"b").unwrap();
        assert!(matches!(peer.receive(NOW), Err(TransportError::Closed)));
        assert_eq!(net.peer_count(), 1);
    }

    #[test]
    fn oversized_payload_rejected() {
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 0.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let big = vec![0u8; super::super::MAX_DATAGRAM + 1];
        assert!(matches!(sender.broadcast(&big), Err(TransportError::PayloadTooLarge(_))));
    }

    #[test]
    fn receive_wakes_on_delivery() {
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 0.0, 1);
        let sender = net.register_peer(id(0), at(0, 0)).unwrap();
        let peer = net.register_peer(id(1), at(0, 0)).unwrap();
        let handle = std::thread::spawn(move || peer.receive(Duration::from_secs(5)).unwrap());
        std::thread::sleep(Duration::from_millis(20));
        sender.broadcast(b"late").unwrap();
        assert_eq!(handle.join().unwrap().unwrap().payload, b"late");
    }
}
