use std::net::{Ipv4Addr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, Socket, Type};

use super::{check_size, Datagram, Endpoint, Transport, TransportConfig, TransportError};
use crate::model::{BroadcastMessage, NodeId};

/// UDP broadcast transport. Listens on the shared broadcast port and sends
/// from a separate socket on an ephemeral port.
///
/// Several agents may share one host, so the listening socket sets
/// `SO_REUSEADDR`/`SO_REUSEPORT`, and our own datagrams are filtered both by
/// source port and by the sender id carried in the payload.
pub struct UdpTransport {
    own_id: NodeId,
    listener: UdpSocket,
    sender: UdpSocket,
    destination: SocketAddr,
    closed: AtomicBool,
}

impl UdpTransport {
    pub fn bind(config: &TransportConfig, own_id: NodeId) -> Result<Self, TransportError> {
        config.validate()?;
        let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
        socket.set_reuse_address(true)?;
        socket.set_reuse_port(true)?;
        socket.set_broadcast(true)?;
        let bind_addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, config.broadcast_port));
        socket.bind(&bind_addr.into())?;
        let listener: UdpSocket = socket.into();

        let sender = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
        sender.set_broadcast(true)?;
        Ok(UdpTransport {
            own_id,
            listener,
            sender,
            destination: SocketAddr::new(config.broadcast_address, config.broadcast_port),
            closed: AtomicBool::new(false),
        })
    }

    fn is_own(&self, datagram: &Datagram) -> bool {
        let own_port = self.sender.local_addr().map(|a| a.port()).ok();
        if Some(datagram.from.port) == own_port && is_local(datagram.from.address) {
            return true;
        }
        BroadcastMessage::decode(&datagram.payload).is_ok_and(|m| m.uuid == self.own_id)
    }
}

fn is_local(address: std::net::IpAddr) -> bool {
    // Same-host senders show up with the loopback or an interface address;
    // binding to that address succeeds only if it is ours.
    address.is_loopback() || UdpSocket::bind(SocketAddr::new(address, 0)).is_ok()
}

impl Transport for UdpTransport {
    fn broadcast(&self, payload: &[u8]) -> Result<(), TransportError> {
        check_size(payload)?;
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        self.sender.send_to(payload, self.destination)?;
        Ok(())
    }

    fn receive(&self, timeout: Duration) -> Result<Option<Datagram>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut buf = vec![0u8; 65_536];
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(TransportError::Closed);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            self.listener
                .set_read_timeout(Some(remaining.max(Duration::from_millis(1))))?;
            match self.listener.recv_from(&mut buf) {
                Ok((n, from)) => {
                    let datagram = Datagram { payload: buf[..n].to_vec(), from: from.into() };
                    if !self.is_own(&datagram) {
                        return Ok(Some(datagram));
                    }
                }
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    fn local_endpoint(&self) -> Endpoint {
        self.sender
            .local_addr()
            .map(Endpoint::from)
            .unwrap_or(Endpoint { address: Ipv4Addr::UNSPECIFIED.into(), port: 0 })
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Position, Timestamp};
    use crate::transport::TransportMode;

    fn config(port: u16) -> TransportConfig {
        TransportConfig {
            mode: TransportMode::Udp,
            broadcast_port: port,
            broadcast_address: Ipv4Addr::new(127, 255, 255, 255).into(),
            ..TransportConfig::default()
        }
    }

    fn message(id: NodeId) -> Vec<u8> {
        BroadcastMessage {
            uuid: id,
            position: Position::new(1, 5),
            infected: false,
            timestamp: Timestamp::from_unix_micros(0),
            alive: true,
        }
        .encode()
    }

    fn free_port() -> u16 {
        UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
    }

    #[test]
    fn peers_hear_each_other_but_not_themselves() {
        let port = free_port();
        let (a_id, b_id) = (NodeId::random(), NodeId::random());
        let a = UdpTransport::bind(&config(port), a_id).unwrap();
        let b = UdpTransport::bind(&config(port), b_id).unwrap();
        assert!(b.receive(Duration::from_millis(10)).unwrap().is_none());

        a.broadcast(&message(a_id)).unwrap();
        let got = b.receive(Duration::from_secs(2)).unwrap().expect("b hears a");
        assert_eq!(got.payload, message(a_id));
        assert_eq!(got.from.port, a.local_endpoint().port);
        assert!(a.receive(Duration::from_millis(100)).unwrap().is_none());
    }

    #[test]
    fn closed_transport_ends_listening() {
        let t = UdpTransport::bind(&config(free_port()), NodeId::random()).unwrap();
        t.close();
        assert!(matches!(t.receive(Duration::from_millis(5)), Err(TransportError::Closed)));
        assert!(matches!(t.broadcast(b"x"), Err(TransportError::Closed)));
    }
}
