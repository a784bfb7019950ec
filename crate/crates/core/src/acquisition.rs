//! Data sources that pace synthetic or recorded samples into a buffer in
//! real time, plus the recorder that taps a live stream to a replay file.
//!
//! Replay files start with the magic `CLRP` and a `u16` format version,
//! followed by records of `(kind u8, wallclock_us u64, payload_size u32,
//! payload)`. Payloads reuse the wire-protocol encodings of PUT_HDR (kind 1),
//! PUT_DAT (kind 2) and PUT_EVT (kind 3). All integers are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicI32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::clock;
use crate::protocol::{self, Reader};
use crate::signal::StopSignal;
use crate::stream::{DataKind, Event, SampleData, StreamHeader};

pub const REPLAY_MAGIC: &[u8; 4] = b"CLRP";
pub const REPLAY_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run aborted after {} packets: {source}", report.packets.len())]
    Aborted {
        source: ClientError,
        report: Box<RunReport>,
    },
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("replay file format: {0}")]
    Format(String),
}

/// A sinusoid added to a set of channels, optionally only while a given
/// class is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub channels: Vec<usize>,
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub class_gate: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub sampling_rate_hz: f64,
    pub packet_samples: usize,
    /// Uniform timing jitter applied to each packet, in milliseconds.
    pub jitter_ms: f64,
    pub noise_sigma: f64,
    pub components: Vec<Component>,
    /// Extra delay between a packet's due time and its transmission,
    /// standing in for network transport.
    pub transmission_delay_ms: f64,
    pub data_kind: DataKind,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_channels: usize, sampling_rate_hz: f64) -> Self {
        Self {
            n_channels,
            sampling_rate_hz,
            packet_samples: ((sampling_rate_hz / 10.0).round() as usize).max(1),
            jitter_ms: 0.0,
            noise_sigma: 1.0,
            components: Vec::new(),
            transmission_delay_ms: 0.0,
            data_kind: DataKind::Float32,
            seed: 0,
        }
    }

    /// Noise plus a 12 Hz rhythm on channels 0 and 1 whose amplitude doubles
    /// while class 2 is active.
    pub fn class_gated_demo(n_channels: usize, sampling_rate_hz: f64) -> Self {
        let channels: Vec<usize> = (0..n_channels.min(2)).collect();
        let mut cfg = Self::new(n_channels, sampling_rate_hz);
        cfg.components = vec![
            Component {
                channels: channels.clone(),
                frequency_hz: 12.0,
                amplitude: 2.0,
                class_gate: None,
            },
            Component {
                channels,
                frequency_hz: 12.0,
                amplitude: 2.0,
                class_gate: Some(2),
            },
        ];
        cfg
    }

    pub fn validate(&self) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::Config(m));
        if self.n_channels == 0 {
            return bad("n_channels must be positive".into());
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return bad(format!("invalid sampling rate {}", self.sampling_rate_hz));
        }
        if self.packet_samples == 0 {
            return bad("packet_samples must be at least 1".into());
        }
        if self.jitter_ms < 0.0 || self.noise_sigma < 0.0 || self.transmission_delay_ms < 0.0 {
            return bad("jitter, noise and delay must be non-negative".into());
        }
        for c in &self.components {
            if !(c.frequency_hz >= 0.0 && c.frequency_hz < self.sampling_rate_hz / 2.0) {
                return bad(format!("component at {} Hz is not below Nyquist", c.frequency_hz));
            }
            if let Some(&ch) = c.channels.iter().find(|&&ch| ch >= self.n_channels) {
                return bad(format!("component channel {ch} out of range"));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader::new(self.n_channels, self.sampling_rate_hz, self.data_kind)
    }

    pub fn packet_period(&self) -> Duration {
        Duration::from_secs_f64(self.packet_samples as f64 / self.sampling_rate_hz)
    }
}

/// Deterministic sample generator; the same config and class sequence
/// always yields the same values.
pub struct SynthGenerator {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    next_sample: u64,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self, AcquisitionError> {
        cfg.validate()?;
        let noise = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| AcquisitionError::Config(e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise,
            next_sample: 0,
            cfg,
        })
    }

    pub fn next_sample(&self) -> u64 {
        self.next_sample
    }

    /// Produces the next `n` rows; `class_at` gives the active class for an
    /// absolute sample index.
    pub fn next_block(&mut self, n: usize, class_at: impl Fn(u64) -> i32) -> SampleData {
        let ch = self.cfg.n_channels;
        let mut values = Vec::with_capacity(n * ch);
        let two_pi_t = std::f64::consts::TAU / self.cfg.sampling_rate_hz;
        let mut row = vec![0.0f64; ch];
        for i in 0..n {
            let index = self.next_sample + i as u64;
            let class = class_at(index);
            for v in row.iter_mut() {
                *v = self.noise.sample(&mut self.rng);
            }
            for comp in &self.cfg.components {
                if comp.class_gate.is_some_and(|g| g != class) {
                    continue;
                }
                let s = comp.amplitude * (two_pi_t * comp.frequency_hz * index as f64).sin();
                for &c in &comp.channels {
                    row[c] += s;
                }
            }
            values.extend_from_slice(&row);
        }
        self.next_sample += n as u64;
        let data = SampleData::Float64 { n_channels: ch, values };
        convert(data, self.cfg.data_kind)
    }
}

fn convert(data: SampleData, kind: DataKind) -> SampleData {
    let SampleData::Float64 { n_channels, values } = data else {
        return data;
    };
    match kind {
        DataKind::Float64 => SampleData::Float64 { n_channels, values },
        DataKind::Float32 => SampleData::Float32 {
            n_channels,
            values: values.into_iter().map(|v| v as f32).collect(),
        },
        DataKind::Int16 => SampleData::Int16 {
            n_channels,
            values: values.into_iter().map(|v| v.round() as i16).collect(),
        },
        DataKind::Int32 => SampleData::Int32 {
            n_channels,
            values: values.into_iter().map(|v| v.round() as i32).collect(),
        },
    }
}

/// A class label shared between a cue-giving task and the generator.
#[derive(Debug, Clone, Default)]
pub struct ClassCue(Arc<AtomicI32>);

impl ClassCue {
    pub fn new(initial: i32) -> Self {
        Self(Arc::new(AtomicI32::new(initial)))
    }

    pub fn set(&self, class: i32) {
        self.0.store(class, Ordering::SeqCst);
    }

    pub fn get(&self) -> i32 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Where the active class comes from during a synthetic run.
#[derive(Debug, Clone)]
pub enum ClassSource {
    /// Fixed `(class_label, duration_s)` schedule. The run ends with the
    /// schedule; an event is pushed at the first sample of every entry with
    /// a non-zero label.
    Schedule(Vec<(i32, f64)>),
    /// Class follows a live cue, sampled once per packet. Runs until stopped
    /// and pushes no events.
    Cue(ClassCue),
}

/// A maximal run of samples generated under one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpan {
    pub begin: u64,
    pub end: u64,
    pub label: i32,
}

/// Absolute sample spans of a schedule at `fs`.
pub fn schedule_spans(schedule: &[(i32, f64)], fs: f64) -> Vec<ClassSpan> {
    let mut t = 0.0;
    let mut spans = Vec::with_capacity(schedule.len());
    for &(label, dur) in schedule {
        let begin = (t * fs).round() as u64;
        t += dur;
        let end = (t * fs).round() as u64;
        if end > begin {
            spans.push(ClassSpan { begin, end, label });
        }
    }
    spans
}

/// Looks up the class of `sample` in sorted spans; 0 outside every span.
pub fn class_at(spans: &[ClassSpan], sample: u64) -> i32 {
    let i = spans.partition_point(|s| s.end <= sample);
    spans
        .get(i)
        .filter(|s| s.begin <= sample)
        .map_or(0, |s| s.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub index: u64,
    pub first_sample: u64,
    pub n_samples: u32,
    /// When the packet's last sample was due, on the process clock.
    pub due_us: u64,
    pub sent_us: u64,
    pub acked_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: StreamHeader,
    pub packets: Vec<PacketRecord>,
    pub events: Vec<Event>,
    pub class_spans: Vec<ClassSpan>,
    pub total_samples: u64,
    pub started_us: u64,
}

impl RunReport {
    fn new(header: StreamHeader) -> Self {
        Self {
            header,
            packets: Vec::new(),
            events: Vec::new(),
            class_spans: Vec::new(),
            total_samples: 0,
            started_us: clock::now_us(),
        }
    }

    /// The packet that carried absolute sample `index`.
    pub fn packet_for(&self, index: u64) -> Option<&PacketRecord> {
        let i = self
            .packets
            .partition_point(|p| p.first_sample + p.n_samples as u64 <= index);
        self.packets.get(i).filter(|p| p.first_sample <= index)
    }

    fn push_class(&mut self, begin: u64, end: u64, label: i32) {
        if let Some(last) = self.class_spans.last_mut() {
            if last.label == label && last.end == begin {
                last.end = end;
                return;
            }
        }
        self.class_spans.push(ClassSpan { begin, end, label });
    }
}

/// Pacing options shared by synthetic and replay runs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Time compression; `f64::INFINITY` pushes as fast as possible.
    pub speed: f64,
    pub stop: StopSignal,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            speed: 1.0,
            stop: StopSignal::new(),
        }
    }
}

impl RunOptions {
    fn scaled(&self, d: Duration) -> Option<Duration> {
        (self.speed.is_finite()).then(|| d.div_f64(self.speed))
    }
}

/// Pushes a header and then paced packets of synthetic data.
pub fn run_synth(
    cfg: &SynthConfig,
    client: &mut Client,
    classes: ClassSource,
    opts: &RunOptions,
) -> Result<RunReport, AcquisitionError> {
    if !(opts.speed > 0.0) {
        return Err(AcquisitionError::Config(format!("invalid speed {}", opts.speed)));
    }
    let mut generator = SynthGenerator::new(cfg.clone())?;
    let fs = cfg.sampling_rate_hz;
    let header = cfg.header();
    client.put_header(&header)?;
    let mut report = RunReport::new(header);

    let (spans, limit) = match &classes {
        ClassSource::Schedule(s) => {
            if s.iter().any(|&(_, d)| !(d >= 0.0)) {
                return Err(AcquisitionError::Config("negative schedule duration".into()));
            }
            let total: f64 = s.iter().map(|&(_, d)| d).sum();
            (schedule_spans(s, fs), Some((total * fs).round() as u64))
        }
        ClassSource::Cue(_) => (Vec::new(), None),
    };
    let mut pending_events: Vec<Event> = spans
        .iter()
        .filter(|s| s.label != 0)
        .map(|s| Event::marker(s.label, s.begin))
        .collect();
    pending_events.reverse();

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let period = cfg.packet_period();
    let delay = Duration::from_secs_f64(cfg.transmission_delay_ms / 1e3);
    let start = Instant::now();
    report.started_us = clock::instant_us(start);
    info!(
        "synth: {} ch at {} Hz, {} samples/packet",
        cfg.n_channels, fs, cfg.packet_samples
    );

    let mut k: u64 = 0;
    loop {
        if opts.stop.is_stopped() {
            break;
        }
        let first = generator.next_sample();
        let n = match limit {
            Some(l) if first >= l => break,
            Some(l) => (l - first).min(cfg.packet_samples as u64) as usize,
            None => cfg.packet_samples,
        };
        // Packet k leaves when its last sample is due: (k + 1) periods in.
        let due_offset = opts.scaled(period.mul_f64((k + 1) as f64));
        let target = due_offset.map(|off| {
            let mut t = start + off + delay;
            if cfg.jitter_ms > 0.0 {
                let j = jitter_rng.random_range(-cfg.jitter_ms..=cfg.jitter_ms);
                t = if j >= 0.0 {
                    t + Duration::from_secs_f64(j / 1e3)
                } else {
                    t.checked_sub(Duration::from_secs_f64(-j / 1e3)).unwrap_or(t)
                };
            }
            t
        });
        if let Some(t) = target {
            if opts.stop.wait_until(t) {
                break;
            }
        }
        let data = match &classes {
            ClassSource::Schedule(_) => generator.next_block(n, |i| class_at(&spans, i)),
            ClassSource::Cue(cue) => {
                let class = cue.get();
                generator.next_block(n, |_| class)
            }
        };
        if let ClassSource::Cue(cue) = &classes {
            report.push_class(first, first + n as u64, cue.get());
        } else {
            for s in spans.iter().filter(|s| s.begin < first + n as u64 && s.end > first) {
                report.push_class(s.begin.max(first), s.end.min(first + n as u64), s.label);
            }
        }
        let sent_us = clock::now_us();
        if let Err(e) = client.put_samples(&data) {
            return Err(AcquisitionError::Aborted { source: e, report: Box::new(report) });
        }
        let acked_us = clock::now_us();
        report.packets.push(PacketRecord {
            index: k,
            first_sample: first,
            n_samples: n as u32,
            due_us: due_offset.map_or(sent_us, |off| clock::instant_us(start + off)),
            sent_us,
            acked_us,
        });
        report.total_samples = first + n as u64;

        let mut ready = Vec::new();
        while pending_events.last().is_some_and(|e| e.sample < report.total_samples) {
            ready.push(pending_events.pop().unwrap());
        }
        if !ready.is_empty() {
            if let Err(e) = client.put_events(&ready) {
                return Err(AcquisitionError::Aborted { source: e, report: Box::new(report) });
            }
            report.events.extend(ready);
        }
        k += 1;
    }
    debug!("synth finished: {} samples, {} events", report.total_samples, report.events.len());
    Ok(report)
}

// --- replay files ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    Header = 1,
    Data = 2,
    Events = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayPayload {
    Header(StreamHeader),
    Data(SampleData),
    Events(Vec<Event>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub wallclock_us: u64,
    pub payload: ReplayPayload,
}

pub struct ReplayWriter {
    out: BufWriter<File>,
    start: Instant,
}

impl ReplayWriter {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(REPLAY_MAGIC)?;
        out.write_all(&REPLAY_VERSION.to_le_bytes())?;
        Ok(Self {
            out,
            start: Instant::now(),
        })
    }

    fn record(&mut self, kind: RecordKind, wallclock_us: u64, payload: &[u8]) -> io::Result<()> {
        self.out.write_all(&[kind as u8])?;
        self.out.write_all(&wallclock_us.to_le_bytes())?;
        self.out.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.out.write_all(payload)
    }

    /// Writes a record stamped with the time since the writer was created.
    pub fn write(&mut self, payload: &ReplayPayload) -> io::Result<()> {
        let at = self.start.elapsed().as_micros() as u64;
        self.write_at(at, payload)
    }

    pub fn write_at(&mut self, wallclock_us: u64, payload: &ReplayPayload) -> io::Result<()> {
        let mut p = Vec::new();
        let kind = match payload {
            ReplayPayload::Header(h) => {
                protocol::put_header_payload(h, &mut p);
                RecordKind::Header
            }
            ReplayPayload::Data(d) => {
                protocol::put_data_payload(d, &mut p);
                RecordKind::Data
            }
            ReplayPayload::Events(e) => {
                protocol::put_events_payload(e, &mut p);
                RecordKind::Events
            }
        };
        self.record(kind, wallclock_us, &p)
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Reads every record of a replay file.
pub fn read_replay(path: impl AsRef<Path>) -> Result<Vec<ReplayRecord>, AcquisitionError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_replay(&bytes)
}

pub fn parse_replay(bytes: &[u8]) -> Result<Vec<ReplayRecord>, AcquisitionError> {
    let fmt = |e: protocol::DecodeError| AcquisitionError::Format(e.to_string());
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(fmt)?;
    if magic != REPLAY_MAGIC {
        return Err(AcquisitionError::Format("bad magic".into()));
    }
    let version = r.u16().map_err(fmt)?;
    if version != REPLAY_VERSION {
        return Err(AcquisitionError::Format(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.remaining() > 0 {
        let kind = r.u8().map_err(fmt)?;
        let wallclock_us = r.u64().map_err(fmt)?;
        let size = r.u32().map_err(fmt)? as usize;
        let payload = r.take(size).map_err(fmt)?;
        let mut p = Reader::new(payload);
        let payload = match kind {
            1 => ReplayPayload::Header(protocol::read_header(&mut p).map_err(fmt)?),
            2 => ReplayPayload::Data(protocol::read_data(&mut p).map_err(fmt)?),
            3 => ReplayPayload::Events(protocol::read_events(&mut p).map_err(fmt)?),
            k => return Err(AcquisitionError::Format(format!("unknown record kind {k}"))),
        };
        p.finish().map_err(fmt)?;
        records.push(ReplayRecord { wallclock_us, payload });
    }
    Ok(records)
}

/// Taps a live stream into a replay file until `stop` is set, then drains
/// whatever is left. Returns the number of samples and events written.
pub fn record(
    client: &mut Client,
    path: impl AsRef<Path>,
    stop: &StopSignal,
) -> Result<(u64, u64), AcquisitionError> {
    let mut writer = ReplayWriter::create(path)?;
    let header = loop {
        match client.get_header() {
            Ok(h) => break h,
            Err(ClientError::NoHeader) => {
                if stop.wait_timeout(Duration::from_millis(10)) {
                    writer.finish()?;
                    return Ok((0, 0));
                }
            }
            Err(e) => return Err(e.into()),
        }
    };
    writer.write(&ReplayPayload::Header(StreamHeader {
        n_samples_total: 0,
        n_events_total: 0,
        ..header.clone()
    }))?;
    let (mut samples, mut events) = (0u64, 0u64);
    let (mut written_s, mut written_e) = (0u64, 0u64);
    const CHUNK: u64 = 4096;
    loop {
        let stopping = stop.is_stopped();
        let c = client.wait_data(samples + 1, events + 1, 50)?;
        if c.n_samples < samples || c.n_events < events {
            warn!("stream was reset while recording; stopping");
            break;
        }
        while samples < c.n_samples {
            let end = (samples + CHUNK).min(c.n_samples);
            match client.get_samples(samples, end) {
                Ok(b) => {
                    writer.write(&ReplayPayload::Data(b.data))?;
                    written_s += end - samples;
                    samples = end;
                }
                Err(ClientError::Evicted) => {
                    warn!("recorder fell behind; skipping to the stream head");
                    samples = c.n_samples;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if events < c.n_events {
            match client.get_events(events, c.n_events) {
                Ok(e) => {
                    written_e += e.len() as u64;
                    writer.write(&ReplayPayload::Events(e))?;
                }
                Err(ClientError::Evicted) => warn!("recorder lost events"),
                Err(e) => return Err(e.into()),
            }
            events = c.n_events;
        }
        if stopping {
            break;
        }
    }
    writer.finish()?;
    info!("recorded {written_s} samples and {written_e} events");
    Ok((written_s, written_e))
}

/// Pushes the contents of a replay file, paced by its timestamps.
pub fn run_replay(
    path: impl AsRef<Path>,
    client: &mut Client,
    opts: &RunOptions,
) -> Result<RunReport, AcquisitionError> {
    if !(opts.speed > 0.0) {
        return Err(AcquisitionError::Config(format!("invalid speed {}", opts.speed)));
    }
    let records = read_replay(path)?;
    let Some(ReplayRecord { payload: ReplayPayload::Header(header), .. }) = records.first() else {
        return Err(AcquisitionError::Format("file does not start with a header".into()));
    };
    let mut report = RunReport::new(header.clone());
    let t_first = records[0].wallclock_us;
    let start = Instant::now();
    report.started_us = clock::instant_us(start);
    for rec in &records {
        if let Some(off) = opts.scaled(Duration::from_micros(rec.wallclock_us - t_first)) {
            if opts.stop.wait_until(start + off) {
                break;
            }
        } else if opts.stop.is_stopped() {
            break;
        }
        let result = match &rec.payload {
            ReplayPayload::Header(h) => {
                report.total_samples = 0;
                client.put_header(h).map(|_| ())
            }
            ReplayPayload::Data(d) => {
                let sent_us = clock::now_us();
                let r = client.put_samples(d);
                if r.is_ok() {
                    report.packets.push(PacketRecord {
                        index: report.packets.len() as u64,
                        first_sample: report.total_samples,
                        n_samples: d.n_samples() as u32,
                        due_us: sent_us,
                        sent_us,
                        acked_us: clock::now_us(),
                    });
                    report.total_samples += d.n_samples() as u64;
                }
                r.map(|_| ())
            }
            ReplayPayload::Events(e) => {
                let r = client.put_events(e);
                if r.is_ok() {
                    report.events.extend(e.iter().cloned());
                }
                r.map(|_| ())
            }
        };
        if let Err(e) = result {
            return Err(AcquisitionError::Aborted { source: e, report: Box::new(report) });
        }
    }
    Ok(report)
}

/// Concatenated contents of a single-header replay file.
#[derive(Debug, Clone)]
pub struct ReplayContents {
    pub header: StreamHeader,
    pub samples: SampleData,
    pub events: Vec<Event>,
}

impl ReplayContents {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AcquisitionError> {
        let records = read_replay(path)?;
        let mut iter = records.into_iter();
        let Some(ReplayRecord { payload: ReplayPayload::Header(header), .. }) = iter.next() else {
            return Err(AcquisitionError::Format("file does not start with a header".into()));
        };
        let mut samples = SampleData::empty(header.data_kind, header.n_channels);
        let mut events = Vec::new();
        for rec in iter {
            match rec.payload {
                ReplayPayload::Header(_) => {
                    return Err(AcquisitionError::Format("more than one header".into()))
                }
                ReplayPayload::Data(d) => {
                    if d.kind() != header.data_kind || d.n_channels() != header.n_channels {
                        return Err(AcquisitionError::Format("block does not match header".into()));
                    }
                    samples.extend(&d)
                }
                ReplayPayload::Events(e) => events.extend(e),
            }
        }
        Ok(Self { header, samples, events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_from_schedule() {
        let spans = schedule_spans(&[(1, 1.0), (0, 0.5), (2, 1.0)], 200.0);
        assert_eq!(
            spans,
            vec![
                ClassSpan { begin: 0, end: 200, label: 1 },
                ClassSpan { begin: 200, end: 300, label: 0 },
                ClassSpan { begin: 300, end: 500, label: 2 },
            ]
        );
        assert_eq!(class_at(&spans, 199), 1);
        assert_eq!(class_at(&spans, 250), 0);
        assert_eq!(class_at(&spans, 300), 2);
        assert_eq!(class_at(&spans, 500), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::new(8, 200.0);
        assert_eq!(cfg.packet_samples, 20);
        assert!(cfg.validate().is_ok());
        cfg.components.push(Component {
            channels: vec![0],
            frequency_hz: 100.0,
            amplitude: 1.0,
            class_gate: None,
        });
        assert!(cfg.validate().is_err());
        cfg.components[0].frequency_hz = 10.0;
        cfg.components[0].channels = vec![8];
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::new(8, 200.0);
        cfg.packet_samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generator_is_deterministic_and_gated() {
        let mut cfg = SynthConfig::new(2, 200.0);
        cfg.noise_sigma = 0.0;
        cfg.data_kind = DataKind::Float64;
        cfg.components.push(Component {
            channels: vec![1],
            frequency_hz: 50.0,
            amplitude: 1.0,
            class_gate: Some(2),
        });
        let mut g = SynthGenerator::new(cfg.clone()).unwrap();
        let off = g.next_block(4, |_| 1).to_array();
        assert!(off.iter().all(|&v| v == 0.0));
        let on = g.next_block(4, |_| 2).to_array();
        // 50 Hz at 200 Hz: samples 4..8 are sin(k·π/2).
        let expected = [0.0, 1.0, 0.0, -1.0];
        for (row, e) in expected.iter().enumerate() {
            assert!((on[[row, 1]] - e).abs() < 1e-12);
            assert_eq!(on[[row, 0]], 0.0);
        }
        let mut noisy = SynthConfig::new(3, 100.0);
        noisy.seed = 7;
        let a = SynthGenerator::new(noisy.clone()).unwrap().next_block(10, |_| 0);
        let b = SynthGenerator::new(noisy).unwrap().next_block(10, |_| 0);
        assert_eq!(a, b);
    }

    #[test]
    fn replay_file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clrp");
        let mut w = ReplayWriter::create(&path).unwrap();
        let header = StreamHeader::new(2, 100.0, DataKind::Int16);
        let data = SampleData::Int16 { n_channels: 2, values: vec![1, 2, 3, 4] };
        w.write_at(0, &ReplayPayload::Header(header.clone())).unwrap();
        w.write_at(10, &ReplayPayload::Data(data.clone())).unwrap();
        w.write_at(20, &ReplayPayload::Events(vec![Event::marker(1, 1)])).unwrap();
        w.finish().unwrap();
        let records = read_replay(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[1], ReplayRecord { wallclock_us: 10, payload: ReplayPayload::Data(data) });

        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 7, bytes.len() - 1] {
            assert!(matches!(parse_replay(&bytes[..cut]), Err(AcquisitionError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_replay(&bad), Err(AcquisitionError::Format(_))));
    }
}
