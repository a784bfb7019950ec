//! Marker output to recording equipment.
//!
//! Every sink takes 8-bit values and records a timestamp taken right before
//! the write. Wire formats:
//!
//! * UDP datagram: two bytes, `[0x4D, value]`.
//! * Serial frame: three bytes, `[0x02, value, value ^ 0x02]` (intended line
//!   settings 115200 baud, 8N1; the port itself is opened as a plain device
//!   file and not reconfigured).
//! * Buffer injection: one event of kind `"marker"` stamped with the
//!   server's sample count at send time.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::debug;
use parking_lot::Mutex;
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::clock;
use crate::stream::Event;

pub const UDP_TAG: u8 = 0x4D;
pub const SERIAL_START: u8 = 0x02;
pub const SERIAL_BAUD: u32 = 115_200;

#[derive(Debug, Error)]
pub enum MarkerError {
    #[error("marker value {0} is outside 0..=255")]
    OutOfRange(i64),
    #[error("sink is closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("buffer: {0}")]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkKind {
    BufferInject,
    UdpDatagram,
    SerialFrame,
    LoopbackLog,
}

/// One successful send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendRecord {
    pub value: u8,
    /// Process-clock time taken immediately before the write.
    pub sent_us: u64,
    /// Sample index of the injected event (buffer sinks only).
    pub sample: Option<u64>,
}

pub fn udp_datagram(value: u8) -> [u8; 2] {
    [UDP_TAG, value]
}

pub fn parse_udp_datagram(bytes: &[u8]) -> Option<u8> {
    match bytes {
        [UDP_TAG, v] => Some(*v),
        _ => None,
    }
}

pub fn serial_frame(value: u8) -> [u8; 3] {
    [SERIAL_START, value, value ^ SERIAL_START]
}

pub fn parse_serial_frame(bytes: &[u8]) -> Option<u8> {
    match bytes {
        [SERIAL_START, v, c] if *c == v ^ SERIAL_START => Some(*v),
        _ => None,
    }
}

/// Receiving end of an emulated serial port.
pub struct SerialPeer {
    rx: Receiver<Vec<u8>>,
}

impl SerialPeer {
    /// Next frame written by the sink, if one arrives within `timeout`.
    pub fn recv_frame(&self, timeout: Duration) -> Option<Vec<u8>> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_iter(&self) -> impl Iterator<Item = Vec<u8>> + '_ {
        self.rx.try_iter()
    }
}

enum Transport {
    Buffer(Client),
    Udp {
        target: SocketAddr,
        socket: Option<UdpSocket>,
    },
    SerialPath {
        path: PathBuf,
        file: Option<File>,
    },
    SerialEmulated(Sender<Vec<u8>>),
    Loopback(Arc<Mutex<Vec<SendRecord>>>),
}

/// A marker sink. Sends require the sink to be open.
pub struct MarkerSink {
    transport: Transport,
    open: bool,
    sent: Vec<SendRecord>,
}

/// A sink shared between the scheduler and the code configuring it.
pub type SharedSink = Arc<Mutex<MarkerSink>>;

impl MarkerSink {
    fn new(transport: Transport) -> Self {
        Self { transport, open: false, sent: Vec::new() }
    }

    /// Injects markers as buffer events through `client`.
    pub fn buffer_inject(client: Client) -> Self {
        Self::new(Transport::Buffer(client))
    }

    pub fn udp(target: SocketAddr) -> Self {
        Self::new(Transport::Udp { target, socket: None })
    }

    /// Writes serial frames to a device (or any writable file).
    pub fn serial(path: impl Into<PathBuf>) -> Self {
        Self::new(Transport::SerialPath { path: path.into(), file: None })
    }

    /// A serial sink wired to an in-memory peer.
    pub fn serial_emulated() -> (Self, SerialPeer) {
        let (tx, rx) = unbounded();
        (Self::new(Transport::SerialEmulated(tx)), SerialPeer { rx })
    }

    /// Records sends in a log that can be inspected through the returned
    /// handle.
    pub fn loopback() -> (Self, Arc<Mutex<Vec<SendRecord>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        (Self::new(Transport::Loopback(Arc::clone(&log))), log)
    }

    pub fn shared(self) -> SharedSink {
        Arc::new(Mutex::new(self))
    }

    pub fn kind(&self) -> SinkKind {
        match self.transport {
            Transport::Buffer(_) => SinkKind::BufferInject,
            Transport::Udp { .. } => SinkKind::UdpDatagram,
            Transport::SerialPath { .. } | Transport::SerialEmulated(_) => SinkKind::SerialFrame,
            Transport::Loopback(_) => SinkKind::LoopbackLog,
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn open(&mut self) -> Result<(), MarkerError> {
        if self.open {
            return Ok(());
        }
        match &mut self.transport {
            Transport::Buffer(client) if !client.is_connected() => {
                return Err(ClientError::NotConnected.into())
            }
            Transport::Udp { socket, target } => {
                let bind = if target.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
                *socket = Some(UdpSocket::bind(bind)?);
            }
            Transport::SerialPath { path, file } => {
                *file = Some(OpenOptions::new().write(true).create(true).append(true).open(path)?);
            }
            _ => {}
        }
        self.open = true;
        debug!("opened {:?} marker sink", self.kind());
        Ok(())
    }

    pub fn close(&mut self) {
        match &mut self.transport {
            Transport::Udp { socket, .. } => *socket = None,
            Transport::SerialPath { file, .. } => *file = None,
            _ => {}
        }
        self.open = false;
    }

    /// Opens the sink, runs `f`, and closes it again whatever `f` returns.
    pub fn scoped<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> Result<T, MarkerError> {
        self.open()?;
        let out = f(self);
        self.close();
        Ok(out)
    }

    pub fn send(&mut self, value: i64) -> Result<SendRecord, MarkerError> {
        let value = u8::try_from(value).map_err(|_| MarkerError::OutOfRange(value))?;
        if !self.open {
            return Err(MarkerError::Closed);
        }
        let mut sample = None;
        let sent_us;
        match &mut self.transport {
            Transport::Buffer(client) => {
                let head = client.poll()?.n_samples;
                sent_us = clock::now_us();
                client.put_events(&[Event::marker(value as i32, head)])?;
                sample = Some(head);
            }
            Transport::Udp { target, socket } => {
                let socket = socket.as_ref().ok_or(MarkerError::Closed)?;
                sent_us = clock::now_us();
                socket.send_to(&udp_datagram(value), *target)?;
            }
            Transport::SerialPath { file, .. } => {
                let file = file.as_mut().ok_or(MarkerError::Closed)?;
                sent_us = clock::now_us();
                file.write_all(&serial_frame(value))?;
                file.flush()?;
            }
            Transport::SerialEmulated(tx) => {
                sent_us = clock::now_us();
                tx.send(serial_frame(value).to_vec())
                    .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "serial peer dropped"))?;
            }
            Transport::Loopback(_) => sent_us = clock::now_us(),
        }
        let record = SendRecord { value, sent_us, sample };
        if let Transport::Loopback(log) = &self.transport {
            log.lock().push(record);
        }
        self.sent.push(record);
        Ok(record)
    }

    /// Every successful send on this sink, in call order.
    pub fn records(&self) -> &[SendRecord] {
        &self.sent
    }
}

impl Drop for MarkerSink {
    fn drop(&mut self) {
        self.close();
    }
}
