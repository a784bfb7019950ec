//! Typed buffer client. Each method is one request/response exchange.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use log::{debug, info};
use thiserror::Error;

use crate::protocol::{self, Command, DecodeError, ReasonCode, Request, Response};
use crate::ring::Counters;
use crate::signal::StopSignal;
use crate::stream::{Event, SampleBlock, SampleData, StreamHeader};

pub const DEFAULT_RETRY_INTERVAL: Duration = Duration::from_millis(500);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client is not connected")]
    NotConnected,
    #[error("connection cancelled after {attempts} attempts")]
    Cancelled { attempts: u32 },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] DecodeError),
    #[error("server has no header")]
    NoHeader,
    #[error("requested range was evicted")]
    Evicted,
    #[error("requested range is not yet available")]
    NotYetAvailable,
    #[error("server rejected the request as malformed")]
    Malformed,
    #[error("server internal error")]
    Internal,
    #[error("server returned unknown reason code {0}")]
    UnknownReason(u32),
    #[error("unexpected response to {0:?}")]
    Unexpected(Command),
}

impl ClientError {
    fn from_reason(code: u32) -> Self {
        match ReasonCode::from_code(code) {
            Some(ReasonCode::NoHeader) => ClientError::NoHeader,
            Some(ReasonCode::Evicted) => ClientError::Evicted,
            Some(ReasonCode::NotYetAvailable) => ClientError::NotYetAvailable,
            Some(ReasonCode::Malformed) => ClientError::Malformed,
            Some(ReasonCode::Internal) => ClientError::Internal,
            None => ClientError::UnknownReason(code),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
}

/// A buffer client. Not shareable between concurrent callers; open one
/// client per polling task.
pub struct Client {
    conn: Option<Connection>,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        debug!("connected to buffer at {peer}");
        Ok(Client {
            conn: Some(Connection {
                reader: BufReader::new(stream.try_clone()?),
                writer: BufWriter::new(stream),
                peer,
            }),
        })
    }

    /// Retries [`connect`](Self::connect) every `interval` until it succeeds
    /// or `cancel` is set. Returns the client and the number of attempts.
    pub fn connect_with_retry<A: ToSocketAddrs + Clone>(
        addr: A,
        interval: Duration,
        cancel: &StopSignal,
    ) -> Result<(Client, u32)> {
        let mut attempts = 0;
        loop {
            if cancel.is_stopped() {
                info!("connect cancelled after {attempts} attempts");
                return Err(ClientError::Cancelled { attempts });
            }
            attempts += 1;
            match Client::connect(addr.clone()) {
                Ok(c) => {
                    info!("connected on attempt {attempts}");
                    return Ok((c, attempts));
                }
                Err(e) => info!("connect attempt {attempts} failed: {e}"),
            }
            if cancel.wait_timeout(interval) {
                info!("connect cancelled after {attempts} attempts");
                return Err(ClientError::Cancelled { attempts });
            }
        }
    }

    pub fn is_connected(&self) -> bool {
        self.conn.is_some()
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.conn.as_ref().map(|c| c.peer)
    }

    pub fn disconnect(&mut self) {
        if let Some(c) = self.conn.take() {
            let _ = c.writer.get_ref().shutdown(std::net::Shutdown::Both);
        }
    }

    fn exchange(&mut self, req: &Request) -> Result<Response> {
        let conn = self.conn.as_mut().ok_or(ClientError::NotConnected)?;
        let outcome = (|| -> Result<Response> {
            protocol::write_all(&mut conn.writer, &protocol::encode_request(req))?;
            let frame = protocol::read_frame(&mut conn.reader)??;
            Ok(protocol::response_from_frame(&frame, req.command())?)
        })();
        match outcome {
            Ok(Response::Error(code)) => Err(ClientError::from_reason(code)),
            Ok(resp) => Ok(resp),
            Err(e) => {
                // The stream position is unknown after a transport or
                // framing failure.
                self.disconnect();
                Err(e)
            }
        }
    }

    fn counters(&mut self, req: &Request) -> Result<Counters> {
        match self.exchange(req)? {
            Response::Counters(c) => Ok(c),
            _ => Err(ClientError::Unexpected(req.command())),
        }
    }

    pub fn put_header(&mut self, header: &StreamHeader) -> Result<Counters> {
        self.counters(&Request::PutHeader(header.clone()))
    }

    pub fn get_header(&mut self) -> Result<StreamHeader> {
        match self.exchange(&Request::GetHeader)? {
            Response::Header(h) => Ok(h),
            _ => Err(ClientError::Unexpected(Command::GetHdr)),
        }
    }

    pub fn put_samples(&mut self, data: &SampleData) -> Result<Counters> {
        self.counters(&Request::PutData(data.clone()))
    }

    pub fn get_samples(&mut self, begin: u64, end: u64) -> Result<SampleBlock> {
        match self.exchange(&Request::GetData { begin, end })? {
            Response::Data(data) => Ok(SampleBlock {
                start_index: begin,
                data,
            }),
            _ => Err(ClientError::Unexpected(Command::GetDat)),
        }
    }

    pub fn put_events(&mut self, events: &[Event]) -> Result<Counters> {
        self.counters(&Request::PutEvents(events.to_vec()))
    }

    pub fn get_events(&mut self, begin: u64, end: u64) -> Result<Vec<Event>> {
        match self.exchange(&Request::GetEvents { begin, end })? {
            Response::Events(e) => Ok(e),
            _ => Err(ClientError::Unexpected(Command::GetEvt)),
        }
    }

    /// Long-poll until either threshold is met or the timeout elapses.
    pub fn wait_data(&mut self, min_samples: u64, min_events: u64, timeout_ms: u32) -> Result<Counters> {
        self.counters(&Request::WaitData {
            min_samples,
            min_events,
            timeout_ms,
        })
    }

    /// Current counters without waiting.
    pub fn poll(&mut self) -> Result<Counters> {
        self.wait_data(u64::MAX, u64::MAX, 0)
    }

    pub fn flush(&mut self) -> Result<Counters> {
        self.counters(&Request::Flush)
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.disconnect();
    }
}
