//! Length-prefixed request/response framing used by the broker and the store.
//!
//! A frame is `[u32 big-endian length][u8 tag][body]`, where the length
//! counts the tag and the body. Requests carry an opcode as the tag and a
//! canonical-JSON body; responses carry [`STATUS_OK`] or [`STATUS_ERR`].

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

pub fn write_frame<W: Write>(w: &mut W, tag: u8, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len() + 1)
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(5 + body.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.push(tag);
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < prefix.len() {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut rest = vec![0u8; len];
    r.read_exact(&mut rest)?;
    let tag = rest.remove(0);
    Ok(Some((tag, rest)))
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

/// Failure of a framed call.
#[derive(Debug, thiserror::Error)]
pub enum CallError {
    /// Connection could not be made or broke mid-call.
    #[error("service unavailable: {0}")]
    Unavailable(String),
    /// The service answered with an error status.
    #[error("{0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Blocking client holding at most one connection, re-established on demand.
#[derive(Debug)]
pub struct FrameClient {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
    timeout: Duration,
}

impl FrameClient {
    pub fn new(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(FrameClient {
            addr,
            conn: Mutex::new(None),
            timeout: Duration::from_secs(5),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        opcode: u8,
        request: &Req,
    ) -> Result<Resp, CallError> {
        let body = serde_json::to_vec(request).map_err(|e| CallError::Protocol(e.to_string()))?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            let stream = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500))
                .map_err(|e| CallError::Unavailable(e.to_string()))?;
            stream.set_nodelay(true).ok();
            stream.set_read_timeout(Some(self.timeout)).ok();
            stream.set_write_timeout(Some(self.timeout)).ok();
            *guard = Some(stream);
        }
        let stream = guard.as_mut().expect("connection present");
        let outcome = write_frame(stream, opcode, &body).and_then(|()| read_frame(stream));
        let (status, body) = match outcome {
            Ok(Some(frame)) => frame,
            Ok(None) => {
                *guard = None;
                return Err(CallError::Unavailable("connection closed".into()));
            }
            Err(e) => {
                *guard = None;
                return Err(CallError::Unavailable(e.to_string()));
            }
        };
        match status {
            STATUS_OK => serde_json::from_slice(&body).map_err(|e| CallError::Protocol(e.to_string())),
            STATUS_ERR => {
                let err: ErrorBody =
                    serde_json::from_slice(&body).map_err(|e| CallError::Protocol(e.to_string()))?;
                Err(CallError::Rejected(err.error))
            }
            other => Err(CallError::Protocol(format!("unknown status {other}"))),
        }
    }
}

/// Request handler: opcode and body in, serialized JSON response or error text out.
pub type Handler = dyn Fn(u8, &[u8]) -> Result<Vec<u8>, String> + Send + Sync;

/// Thread-per-connection server. [`FrameServer::kill`] drops the listener and
/// severs every open connection without waiting for in-flight requests.
pub struct FrameServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl FrameServer {
    pub fn bind(addr: impl ToSocketAddrs, handler: Arc<Handler>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let acceptor = {
            let stop = stop.clone();
            let connections = connections.clone();
            thread::Builder::new()
                .name(format!("accept-{addr}"))
                .spawn(move || accept_loop(listener, handler, stop, connections))?
        };
        Ok(FrameServer { addr, stop, connections, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn kill(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
        let mut conns = self.connections.lock().unwrap_or_else(|p| p.into_inner());
        for conn in conns.drain(..) {
            let _ = conn.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    handler: Arc<Handler>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false).ok();
                stream.set_nodelay(true).ok();
                let Ok(tracked) = stream.try_clone() else { continue };
                {
                    let mut conns = connections.lock().unwrap_or_else(|p| p.into_inner());
                    conns.retain(|c| c.peer_addr().is_ok());
                    conns.push(tracked);
                }
                let handler = handler.clone();
                let stop = stop.clone();
                let _ = thread::Builder::new()
                    .name(format!("conn-{peer}"))
                    .spawn(move || serve_connection(stream, handler, stop));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                tracing::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn serve_connection(mut stream: TcpStream, handler: Arc<Handler>, stop: Arc<AtomicBool>) {
    loop {
        let (opcode, body) = match read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return,
            Err(e) => {
                tracing::debug!("connection dropped: {e}");
                return;
            }
        };
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let (status, reply) = match handler(opcode, &body) {
            Ok(reply) => (STATUS_OK, reply),
            Err(error) => (
                STATUS_ERR,
                serde_json::to_vec(&ErrorBody { error }).expect("error body serializes"),
            ),
        };
        if stop.load(Ordering::SeqCst) || write_frame(&mut stream, status, &reply).is_err() {
            return;
        }
    }
}

/// Parses a request body, mapping failures to an error reply.
pub fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, String> {
    serde_json::from_slice(body).map_err(|e| format!("bad request body: {e}"))
}

pub fn reply<T: Serialize>(value: &T) -> Result<Vec<u8>, String> {
    serde_json::to_vec(value).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::{json, Value};

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 3, b"{}").unwrap();
        assert_eq!(buf, [0, 0, 0, 3, 3, b'{', b'}']);
    }

    #[test]
    fn clean_eof_and_truncation() {
        assert!(read_frame(&mut &b""[..]).unwrap().is_none());
        assert!(read_frame(&mut &[0u8, 0][..]).is_err());
        assert!(read_frame(&mut &[0u8, 0, 0, 5, 1][..]).is_err());
        assert!(read_frame(&mut &[0u8, 0, 0, 0][..]).is_err());
    }

    #[test]
    fn echo_server_round_trip_and_kill() {
        let handler: Arc<Handler> = Arc::new(|op, body| {
            if op == 9 {
                return Err("nope".into());
            }
            let v: Value = parse_body(body)?;
            reply(&json!({ "op": op, "echo": v }))
        });
        let server = FrameServer::bind("127.0.0.1:0", handler).unwrap();
        let client = FrameClient::new(server.local_addr()).unwrap();
        let resp: Value = client.call(2, &json!({"a": 1})).unwrap();
        assert_eq!(resp, json!({"op": 2, "echo": {"a": 1}}));
        assert!(matches!(client.call::<_, Value>(9, &json!({})), Err(CallError::Rejected(m)) if m == "nope"));
        server.kill();
        assert!(matches!(client.call::<_, Value>(2, &json!({})), Err(CallError::Unavailable(_))));
    }

    proptest! {
        #[test]
        fn frames_round_trip(tag in any::<u8>(), body in proptest::collection::vec(any::<u8>(), 0..512)) {
            let mut buf = Vec::new();
            write_frame(&mut buf, tag, &body).unwrap();
            let (t, b) = read_frame(&mut &buf[..]).unwrap().unwrap();
            prop_assert_eq!(t, tag);
            prop_assert_eq!(b, body);
        }
    }
}
