//! Binary framing between buffer clients and the buffer server.
//!
//! Every message is an 8-byte little-endian header (`version: u16`,
//! `command: u16`, `payload_size: u32`) followed by exactly `payload_size`
//! payload bytes. The byte-level layout of each payload is documented in
//! `docs/protocol.md`.
//!
//! Requests are self-describing. Success responses all share the
//! [`Command::RespOk`] code, so their payload is interpreted against the
//! request they answer; see [`decode_response`].

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::ring::Counters;
use crate::stream::{DataKind, Event, SampleData, StreamHeader};

pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;
/// Frames larger than this are rejected before any allocation.
pub const MAX_PAYLOAD: u32 = 256 * 1024 * 1024;

const EVENT_FIXED_LEN: usize = 4 + 4 + 8 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Command {
    PutHdr = 0x101,
    PutDat = 0x102,
    PutEvt = 0x103,
    RespOk = 0x104,
    RespErr = 0x105,
    GetHdr = 0x201,
    GetDat = 0x202,
    GetEvt = 0x203,
    Flush = 0x301,
    WaitDat = 0x402,
}

impl Command {
    pub fn from_code(code: u16) -> Option<Self> {
        use Command::*;
        Some(match code {
            0x101 => PutHdr,
            0x102 => PutDat,
            0x103 => PutEvt,
            0x104 => RespOk,
            0x105 => RespErr,
            0x201 => GetHdr,
            0x202 => GetDat,
            0x203 => GetEvt,
            0x301 => Flush,
            0x402 => WaitDat,
            _ => return None,
        })
    }
}

/// Numeric reason carried by `RESP_ERR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ReasonCode {
    NoHeader = 1,
    Evicted = 2,
    NotYetAvailable = 3,
    Malformed = 4,
    Internal = 5,
}

impl ReasonCode {
    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => ReasonCode::NoHeader,
            2 => ReasonCode::Evicted,
            3 => ReasonCode::NotYetAvailable,
            4 => ReasonCode::Malformed,
            5 => ReasonCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("need {HEADER_LEN} header bytes, have {0}")]
    ShortHeader(usize),
    #[error("unsupported protocol version {0}")]
    BadVersion(u16),
    #[error("payload declares {declared} bytes but {available} are available")]
    Truncated { declared: u32, available: usize },
    #[error("unknown command 0x{0:04x}")]
    UnknownCommand(u16),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("payload size {0} exceeds the frame limit")]
    TooLarge(u32),
}

fn malformed(msg: impl Into<String>) -> DecodeError {
    DecodeError::Malformed(msg.into())
}

/// Client-to-server messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    PutHeader(StreamHeader),
    PutData(SampleData),
    PutEvents(Vec<Event>),
    GetHeader,
    GetData { begin: u64, end: u64 },
    GetEvents { begin: u64, end: u64 },
    Flush,
    WaitData { min_samples: u64, min_events: u64, timeout_ms: u32 },
}

impl Request {
    pub fn command(&self) -> Command {
        match self {
            Request::PutHeader(_) => Command::PutHdr,
            Request::PutData(_) => Command::PutDat,
            Request::PutEvents(_) => Command::PutEvt,
            Request::GetHeader => Command::GetHdr,
            Request::GetData { .. } => Command::GetDat,
            Request::GetEvents { .. } => Command::GetEvt,
            Request::Flush => Command::Flush,
            Request::WaitData { .. } => Command::WaitDat,
        }
    }
}

/// Server-to-client messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    /// Answer to PUT_HDR, PUT_DAT, PUT_EVT, FLUSH and WAIT_DAT.
    Counters(Counters),
    Header(StreamHeader),
    Data(SampleData),
    Events(Vec<Event>),
    /// `RESP_ERR`; the code is kept raw so unknown reasons survive decoding.
    Error(u32),
}

impl Response {
    pub fn command(&self) -> Command {
        match self {
            Response::Error(_) => Command::RespErr,
            _ => Command::RespOk,
        }
    }
}

/// A raw frame: command code plus undecoded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub command: u16,
    pub payload: Vec<u8>,
}

fn frame_bytes(command: Command, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(command as u16).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut p = Vec::new();
    match req {
        Request::PutHeader(h) => put_header_payload(h, &mut p),
        Request::PutData(d) => put_data_payload(d, &mut p),
        Request::PutEvents(evts) => put_events_payload(evts, &mut p),
        Request::GetHeader | Request::Flush => {}
        Request::GetData { begin, end } | Request::GetEvents { begin, end } => {
            p.extend_from_slice(&begin.to_le_bytes());
            p.extend_from_slice(&end.to_le_bytes());
        }
        Request::WaitData { min_samples, min_events, timeout_ms } => {
            p.extend_from_slice(&min_samples.to_le_bytes());
            p.extend_from_slice(&min_events.to_le_bytes());
            p.extend_from_slice(&timeout_ms.to_le_bytes());
        }
    }
    frame_bytes(req.command(), p)
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut p = Vec::new();
    match resp {
        Response::Counters(c) => counters_payload(*c, &mut p),
        Response::Header(h) => put_header_payload(h, &mut p),
        Response::Data(d) => put_data_payload(d, &mut p),
        Response::Events(evts) => put_events_payload(evts, &mut p),
        Response::Error(code) => p.extend_from_slice(&code.to_le_bytes()),
    }
    frame_bytes(resp.command(), p)
}

/// Splits one frame off the front of `bytes`, returning it and the number
/// of bytes consumed. Never reads past the declared payload.
pub fn split_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::ShortHeader(bytes.len()));
    }
    let (version, command, size) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let available = bytes.len() - HEADER_LEN;
    if (size as usize) > available {
        return Err(DecodeError::Truncated { declared: size, available });
    }
    debug_assert_eq!(version, VERSION);
    let end = HEADER_LEN + size as usize;
    Ok((
        Frame {
            command,
            payload: bytes[HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u16, u16, u32), DecodeError> {
    let version = u16::from_le_bytes([h[0], h[1]]);
    if version != VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let command = u16::from_le_bytes([h[2], h[3]]);
    let size = u32::from_le_bytes([h[4], h[5], h[6], h[7]]);
    Ok((version, command, size))
}

pub fn decode_request(bytes: &[u8]) -> Result<Request, DecodeError> {
    let (frame, _) = split_frame(bytes)?;
    request_from_frame(&frame)
}

/// Decodes a response to a request carrying `request` as its command.
pub fn decode_response(bytes: &[u8], request: Command) -> Result<Response, DecodeError> {
    let (frame, _) = split_frame(bytes)?;
    response_from_frame(&frame, request)
}

pub fn request_from_frame(frame: &Frame) -> Result<Request, DecodeError> {
    let command =
        Command::from_code(frame.command).ok_or(DecodeError::UnknownCommand(frame.command))?;
    let mut r = Reader::new(&frame.payload);
    let req = match command {
        Command::PutHdr => Request::PutHeader(read_header(&mut r)?),
        Command::PutDat => Request::PutData(read_data(&mut r)?),
        Command::PutEvt => Request::PutEvents(read_events(&mut r)?),
        Command::GetHdr => Request::GetHeader,
        Command::Flush => Request::Flush,
        Command::GetDat => Request::GetData { begin: r.u64()?, end: r.u64()? },
        Command::GetEvt => Request::GetEvents { begin: r.u64()?, end: r.u64()? },
        Command::WaitDat => Request::WaitData {
            min_samples: r.u64()?,
            min_events: r.u64()?,
            timeout_ms: r.u32()?,
        },
        Command::RespOk | Command::RespErr => {
            return Err(malformed("response command in request position"))
        }
    };
    r.finish()?;
    Ok(req)
}

pub fn response_from_frame(frame: &Frame, request: Command) -> Result<Response, DecodeError> {
    let mut r = Reader::new(&frame.payload);
    let resp = match Command::from_code(frame.command) {
        Some(Command::RespErr) => Response::Error(r.u32()?),
        Some(Command::RespOk) => match request {
            Command::PutHdr
            | Command::PutDat
            | Command::PutEvt
            | Command::Flush
            | Command::WaitDat => Response::Counters(Counters {
                n_samples: r.u64()?,
                n_events: r.u64()?,
            }),
            Command::GetHdr => Response::Header(read_header(&mut r)?),
            Command::GetDat => Response::Data(read_data(&mut r)?),
            Command::GetEvt => Response::Events(read_events(&mut r)?),
            Command::RespOk | Command::RespErr => {
                return Err(malformed("responses do not answer responses"))
            }
        },
        Some(_) => return Err(malformed("request command in response position")),
        None => return Err(DecodeError::UnknownCommand(frame.command)),
    };
    r.finish()?;
    Ok(resp)
}

/// Reads exactly one frame from a stream. The header is validated before
/// the payload is allocated.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Result<Frame, DecodeError>> {
    let mut head = [0u8; HEADER_LEN];
    reader.read_exact(&mut head)?;
    let (_, command, size) = match parse_header(&head) {
        Ok(h) => h,
        Err(e) => return Ok(Err(e)),
    };
    if size > MAX_PAYLOAD {
        return Ok(Err(DecodeError::TooLarge(size)));
    }
    let mut payload = vec![0u8; size as usize];
    reader.read_exact(&mut payload)?;
    Ok(Ok(Frame { command, payload }))
}

pub fn write_all<W: Write>(writer: &mut W, bytes: &[u8]) -> io::Result<()> {
    writer.write_all(bytes)?;
    writer.flush()
}

// --- payload writers -------------------------------------------------------

fn counters_payload(c: Counters, p: &mut Vec<u8>) {
    p.extend_from_slice(&c.n_samples.to_le_bytes());
    p.extend_from_slice(&c.n_events.to_le_bytes());
}

/// PUT_HDR / GET_HDR payload. Counters are clamped to 32 bits on the wire.
pub fn put_header_payload(h: &StreamHeader, p: &mut Vec<u8>) {
    let clamp = |v: u64| v.min(u32::MAX as u64) as u32;
    p.extend_from_slice(&(h.n_channels as u32).to_le_bytes());
    p.extend_from_slice(&clamp(h.n_samples_total).to_le_bytes());
    p.extend_from_slice(&clamp(h.n_events_total).to_le_bytes());
    p.extend_from_slice(&(h.sampling_rate_hz as f32).to_le_bytes());
    p.extend_from_slice(&h.data_kind.code().to_le_bytes());
    let mut chunk = Vec::new();
    if let Some(labels) = &h.channel_labels {
        for label in labels {
            chunk.extend_from_slice(label.as_bytes());
            chunk.push(0);
        }
    }
    p.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
    p.extend_from_slice(&chunk);
}

pub fn put_data_payload(d: &SampleData, p: &mut Vec<u8>) {
    p.extend_from_slice(&(d.n_channels() as u32).to_le_bytes());
    p.extend_from_slice(&(d.n_samples() as u32).to_le_bytes());
    p.extend_from_slice(&d.kind().code().to_le_bytes());
    p.extend_from_slice(&0u32.to_le_bytes());
    d.write_le_bytes(p);
}

pub fn put_events_payload(events: &[Event], p: &mut Vec<u8>) {
    for e in events {
        p.extend_from_slice(&(e.kind.len() as u32).to_le_bytes());
        p.extend_from_slice(&e.value.to_le_bytes());
        p.extend_from_slice(&e.sample.to_le_bytes());
        p.extend_from_slice(&e.offset_samples.to_le_bytes());
        p.extend_from_slice(&e.duration_samples.to_le_bytes());
        p.extend_from_slice(e.kind.as_bytes());
    }
}

// --- payload readers -------------------------------------------------------

/// Bounds-checked little-endian cursor over a payload.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(malformed(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(malformed(format!("{n} trailing bytes"))),
        }
    }
}

pub(crate) fn read_header(r: &mut Reader<'_>) -> Result<StreamHeader, DecodeError> {
    let n_channels = r.u32()? as usize;
    let n_samples = r.u32()?;
    let n_events = r.u32()?;
    let rate = r.f32()?;
    let kind_code = r.u32()?;
    let kind = DataKind::from_code(kind_code)
        .ok_or_else(|| malformed(format!("unknown data kind {kind_code}")))?;
    let extra = r.u32()? as usize;
    let chunk = r.take(extra)?;
    let channel_labels = if chunk.is_empty() {
        None
    } else {
        let body = chunk
            .strip_suffix(&[0])
            .ok_or_else(|| malformed("label chunk must end with NUL"))?;
        let labels = body
            .split(|&b| b == 0)
            .map(|l| String::from_utf8(l.to_vec()).map_err(|_| malformed("label is not UTF-8")))
            .collect::<Result<Vec<_>, _>>()?;
        if labels.len() != n_channels {
            return Err(malformed(format!(
                "{} labels for {n_channels} channels",
                labels.len()
            )));
        }
        Some(labels)
    };
    Ok(StreamHeader {
        n_channels,
        sampling_rate_hz: rate as f64,
        channel_labels,
        data_kind: kind,
        n_samples_total: n_samples as u64,
        n_events_total: n_events as u64,
    })
}

pub(crate) fn read_data(r: &mut Reader<'_>) -> Result<SampleData, DecodeError> {
    let n_channels = r.u32()? as usize;
    let n_samples = r.u32()? as usize;
    let kind_code = r.u32()?;
    let kind = DataKind::from_code(kind_code)
        .ok_or_else(|| malformed(format!("unknown data kind {kind_code}")))?;
    let _reserved = r.u32()?;
    if n_channels == 0 {
        return Err(malformed("zero channels"));
    }
    let len = n_channels
        .checked_mul(n_samples)
        .and_then(|v| v.checked_mul(kind.size()))
        .ok_or_else(|| malformed("sample block size overflows"))?;
    let bytes = r.take(len)?;
    Ok(SampleData::from_le_bytes(kind, n_channels, bytes).expect("whole elements"))
}

pub(crate) fn read_events(r: &mut Reader<'_>) -> Result<Vec<Event>, DecodeError> {
    let mut events = Vec::new();
    while r.remaining() > 0 {
        if r.remaining() < EVENT_FIXED_LEN {
            return Err(malformed("partial event record"));
        }
        let kind_len = r.u32()? as usize;
        let value = r.i32()?;
        let sample = r.u64()?;
        let offset_samples = r.i32()?;
        let duration_samples = r.u32()?;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec())
            .map_err(|_| malformed("event kind is not UTF-8"))?;
        events.push(Event {
            kind,
            value,
            sample,
            offset_samples,
            duration_samples,
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_header_request_bytes() {
        assert_eq!(
            encode_request(&Request::GetHeader),
            vec![0x01, 0x00, 0x01, 0x02, 0x00, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn put_data_round_trip() {
        let data = SampleData::Float32 {
            n_channels: 3,
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let req = Request::PutData(data);
        let bytes = encode_request(&req);
        assert_eq!(bytes.len(), HEADER_LEN + 16 + 24);
        assert_eq!(decode_request(&bytes).unwrap(), req);
    }

    #[test]
    fn bad_version_rejected() {
        let mut bytes = encode_request(&Request::GetHeader);
        bytes[0] = 2;
        assert_eq!(decode_request(&bytes), Err(DecodeError::BadVersion(2)));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode_request(&Request::GetData { begin: 1, end: 2 });
        assert_eq!(
            decode_request(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated { declared: 16, available: 15 })
        );
        assert_eq!(decode_request(&bytes[..5]), Err(DecodeError::ShortHeader(5)));
    }

    #[test]
    fn malformed_payloads_rejected() {
        // GET_DAT with a 4-byte payload.
        let mut bytes = vec![1, 0, 0x02, 0x02, 4, 0, 0, 0];
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_request(&bytes), Err(DecodeError::Malformed(_))));
        // Unknown command.
        let bytes = vec![1, 0, 0x99, 0x09, 0, 0, 0, 0];
        assert_eq!(decode_request(&bytes), Err(DecodeError::UnknownCommand(0x0999)));
        // Header with a bad data kind.
        let mut h = Vec::new();
        put_header_payload(&StreamHeader::new(2, 100.0, DataKind::Int16), &mut h);
        h[16] = 3;
        let bytes = frame_bytes(Command::PutHdr, h);
        assert!(matches!(decode_request(&bytes), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn labels_survive_the_wire() {
        let h = StreamHeader::new(3, 200.0, DataKind::Float32).with_labels(["Fz", "", "Cz"]);
        let bytes = encode_response(&Response::Header(h.clone()));
        assert_eq!(decode_response(&bytes, Command::GetHdr).unwrap(), Response::Header(h));
    }

    #[test]
    fn error_response_carries_reason() {
        let bytes = encode_response(&Response::Error(ReasonCode::Evicted as u32));
        assert_eq!(bytes, vec![1, 0, 0x05, 0x01, 4, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(
            decode_response(&bytes, Command::GetDat).unwrap(),
            Response::Error(2)
        );
    }

    #[test]
    fn read_frame_from_stream() {
        let mut bytes = encode_request(&Request::Flush);
        bytes.extend(encode_request(&Request::GetHeader));
        let mut cursor = io::Cursor::new(bytes);
        let f1 = read_frame(&mut cursor).unwrap().unwrap();
        let f2 = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(f1.command, Command::Flush as u16);
        assert_eq!(f2.command, Command::GetHdr as u16);
        assert!(read_frame(&mut cursor).is_err());
    }
}
