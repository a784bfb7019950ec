//! Multithreaded TCP server exposing one [`RingStore`] to many clients.
//!
//! Each connection gets its own service thread running a strict
//! request/response loop. Threads share the store; WAIT_DAT parks on the
//! store's condition variable, so a waiting or stalled client never holds
//! the store lock.

use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use parking_lot::Mutex;

use crate::protocol::{self, DecodeError, ReasonCode, Request, Response};
use crate::ring::{RingStore, StoreError};

pub const DEFAULT_PORT: u16 = 5000;

/// Maps a store failure to its wire reason code.
pub fn reason_for(err: &StoreError) -> ReasonCode {
    match err {
        StoreError::NoHeader => ReasonCode::NoHeader,
        StoreError::Evicted { .. } => ReasonCode::Evicted,
        StoreError::NotYetAvailable { .. } => ReasonCode::NotYetAvailable,
        StoreError::InvalidHeader(_)
        | StoreError::Shape(_)
        | StoreError::InvalidRange { .. }
        | StoreError::EventOrder { .. }
        | StoreError::FutureEvent { .. } => ReasonCode::Malformed,
    }
}

/// Executes one request against the store.
pub fn handle_request(store: &RingStore, req: Request) -> Response {
    let result = match req {
        Request::PutHeader(h) => store.put_header(&h).map(|_| Response::Counters(store.counters())),
        Request::PutData(d) => store.append_samples(&d).map(|_| Response::Counters(store.counters())),
        Request::PutEvents(e) => store.append_events(&e).map(|_| Response::Counters(store.counters())),
        Request::GetHeader => store.header().map(Response::Header),
        Request::GetData { begin, end } => store.read_samples(begin, end).map(|b| Response::Data(b.data)),
        Request::GetEvents { begin, end } => store.read_events(begin, end).map(Response::Events),
        Request::Flush => store.flush().map(Response::Counters),
        Request::WaitData { min_samples, min_events, timeout_ms } => store
            .wait_until(min_samples, min_events, Duration::from_millis(timeout_ms as u64))
            .map(Response::Counters),
    };
    result.unwrap_or_else(|e| {
        debug!("request failed: {e}");
        Response::Error(reason_for(&e) as u32)
    })
}

struct Shared {
    store: Arc<RingStore>,
    stopping: AtomicBool,
    connections: Mutex<Vec<(u64, TcpStream)>>,
    next_id: AtomicU64,
}

/// Handle to a running server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<Vec<JoinHandle<()>>>>,
}

/// Binds and starts serving `store`. Port 0 picks a free port; see
/// [`ServerHandle::local_addr`].
pub fn serve<A: ToSocketAddrs>(addr: A, store: Arc<RingStore>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    info!("buffer server listening on {local}");
    let shared = Arc::new(Shared {
        store,
        stopping: AtomicBool::new(false),
        connections: Mutex::new(Vec::new()),
        next_id: AtomicU64::new(0),
    });
    let acceptor = {
        let shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("buffer-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    Ok(ServerHandle {
        addr: local,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) -> Vec<JoinHandle<()>> {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    for conn in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
        match stream.try_clone() {
            Ok(clone) => shared.connections.lock().push((id, clone)),
            Err(e) => {
                warn!("cannot track connection: {e}");
                continue;
            }
        }
        let worker_shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name(format!("buffer-conn-{id}"))
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                debug!("client {id} connected from {peer:?}");
                if let Err(e) = serve_connection(stream, &worker_shared) {
                    debug!("client {id} ended: {e}");
                }
                worker_shared.connections.lock().retain(|(cid, _)| *cid != id);
            });
        match spawned {
            Ok(h) => workers.push(h),
            Err(e) => warn!("cannot spawn connection thread: {e}"),
        }
        workers.retain(|h| !h.is_finished());
    }
    workers
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match protocol::read_frame(&mut reader)? {
            Ok(f) => f,
            Err(e @ (DecodeError::BadVersion(_) | DecodeError::TooLarge(_))) => {
                // The framing can no longer be trusted; answer and hang up.
                warn!("dropping client: {e}");
                let resp = Response::Error(ReasonCode::Malformed as u32);
                protocol::write_all(&mut writer, &protocol::encode_response(&resp))?;
                return Ok(());
            }
            Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
        };
        let resp = match protocol::request_from_frame(&frame) {
            Ok(req) => handle_request(&shared.store, req),
            Err(e) => {
                debug!("bad request: {e}");
                Response::Error(ReasonCode::Malformed as u32)
            }
        };
        protocol::write_all(&mut writer, &protocol::encode_response(&resp))?;
        if shared.stopping.load(Ordering::SeqCst) {
            return Ok(());
        }
    }
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<RingStore> {
        &self.shared.store
    }

    /// Number of currently open client connections.
    pub fn connection_count(&self) -> usize {
        self.shared.connections.lock().len()
    }

    /// Stops accepting, releases pending waits with current counters, closes
    /// every socket and joins all service threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else {
            return;
        };
        self.shared.stopping.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        let workers = acceptor.join().unwrap_or_default();
        // Waiters get their counters; closing only the read side lets those
        // responses still go out while idle readers see end-of-stream.
        self.shared.store.interrupt_waiters();
        for (_, s) in self.shared.connections.lock().iter() {
            let _ = s.shutdown(Shutdown::Read);
        }
        let grace = std::time::Instant::now() + Duration::from_millis(250);
        for w in workers {
            while !w.is_finished() {
                self.shared.store.interrupt_waiters();
                if std::time::Instant::now() > grace {
                    // A client that stopped reading keeps its writer blocked.
                    for (_, s) in self.shared.connections.lock().iter() {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                }
                thread::sleep(Duration::from_millis(2));
            }
            let _ = w.join();
        }
        info!("buffer server on {} stopped", self.addr);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{decode_response, encode_request, Command};
    use crate::stream::{DataKind, SampleData, StreamHeader};
    use std::io::{Read, Write};

    fn roundtrip(stream: &mut TcpStream, req: &Request) -> Response {
        stream.write_all(&encode_request(req)).unwrap();
        let frame = protocol::read_frame(stream).unwrap().unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&frame.command.to_le_bytes());
        bytes.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&frame.payload);
        decode_response(&bytes, req.command()).unwrap()
    }

    #[test]
    fn get_data_before_header_is_no_header() {
        let server = serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        let resp = roundtrip(&mut s, &Request::GetData { begin: 0, end: 1 });
        assert_eq!(resp, Response::Error(ReasonCode::NoHeader as u32));
        server.shutdown();
    }

    #[test]
    fn unknown_command_keeps_connection_open() {
        let server = serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(&[1, 0, 0x77, 0x07, 2, 0, 0, 0, 0xAA, 0xBB]).unwrap();
        let frame = protocol::read_frame(&mut s).unwrap().unwrap();
        assert_eq!(frame.command, Command::RespErr as u16);
        assert_eq!(frame.payload, (ReasonCode::Malformed as u32).to_le_bytes());
        let header = StreamHeader::new(2, 100.0, DataKind::Int16);
        let resp = roundtrip(&mut s, &Request::PutHeader(header));
        assert!(matches!(resp, Response::Counters(_)));
    }

    #[test]
    fn survives_client_disconnect_mid_request() {
        let server = serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap();
        {
            let mut s = TcpStream::connect(server.local_addr()).unwrap();
            // Header promising 100 payload bytes, then hang up.
            s.write_all(&[1, 0, 0x02, 0x01, 100, 0, 0, 0, 1, 2, 3]).unwrap();
        }
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        let header = StreamHeader::new(1, 100.0, DataKind::Int16);
        roundtrip(&mut s, &Request::PutHeader(header));
        let data = SampleData::Int16 { n_channels: 1, values: vec![7, 8] };
        assert_eq!(
            roundtrip(&mut s, &Request::PutData(data.clone())),
            Response::Counters(crate::ring::Counters { n_samples: 2, n_events: 0 })
        );
        assert_eq!(
            roundtrip(&mut s, &Request::GetData { begin: 0, end: 2 }),
            Response::Data(data)
        );
    }

    #[test]
    fn bad_version_closes_connection() {
        let server = serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(&[9, 0, 0x01, 0x02, 0, 0, 0, 0]).unwrap();
        let frame = protocol::read_frame(&mut s).unwrap().unwrap();
        assert_eq!(frame.command, Command::RespErr as u16);
        let mut rest = Vec::new();
        assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);
    }

    #[test]
    fn shutdown_releases_pending_wait() {
        let server = serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        roundtrip(&mut s, &Request::PutHeader(StreamHeader::new(1, 10.0, DataKind::Int16)));
        let waiter = thread::spawn(move || {
            roundtrip(
                &mut s,
                &Request::WaitData { min_samples: 10, min_events: 10, timeout_ms: 20_000 },
            )
        });
        thread::sleep(Duration::from_millis(50));
        let started = std::time::Instant::now();
        server.shutdown();
        let resp = waiter.join().unwrap();
        assert_eq!(resp, Response::Counters(Default::default()));
        assert!(started.elapsed() < Duration::from_secs(2));
    }
}
