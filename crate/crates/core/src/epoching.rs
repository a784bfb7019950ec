//! Online segmentation of a buffered stream into epochs, and chained
//! processing of those epochs.
//!
//! A [`Stage`] is either a source that polls the buffer (event-locked or
//! sliding-window) or a map stage that applies a function to every epoch
//! emitted upstream. Sources run periodically; map stages are woken only by
//! upstream emissions. Every stage retains its output for
//! [`Stage::read_epoch`], [`Stage::read_all_epochs`] and the save calls.
//!
//! Sample spans are half-open. An epoch of `[tmin, tmax)` seconds around a
//! marker at sample `s` covers `[s + round(tmin·fs), s + round(tmin·fs) +
//! round((tmax − tmin)·fs))`. Sliding window `k` covers `[k·hop, k·hop +
//! len)` on the absolute sample grid.
//!
//! Saved epoch files (`CLEP`): magic, `u16` version, `u32` epoch count,
//! `u32` samples per epoch, `u32` channels, `u32` data kind (always the
//! float64 code), then per epoch `label i32` (`i32::MIN` when absent),
//! `origin u64` (marker sample for labelled epochs, window index
//! otherwise) and the row-major `f64` data. Little-endian throughout.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};
use ndarray::{Array2, Array3, Axis};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::clock;
use crate::protocol::Reader;
use crate::signal::StopSignal;
use crate::stream::{DataKind, Event, StreamHeader};

pub const EPOCH_MAGIC: &[u8; 4] = b"CLEP";
pub const EPOCH_FILE_VERSION: u16 = 1;
pub const DEFAULT_POLL_RATE_HZ: f64 = 60.0;
pub const DEFAULT_RETAIN_ALL_CAP: usize = 10_000;
pub const DEFAULT_RETAIN_LAST: usize = 256;
const NO_LABEL: i32 = i32::MIN;
const MAX_WINDOWS_PER_FETCH: u64 = 256;

#[derive(Debug, Error)]
pub enum EpochError {
    #[error("no epoch available yet")]
    Empty,
    #[error("stage has ended")]
    EndOfStream,
    #[error("retained-epoch cap of {cap} exceeded")]
    Overflow { cap: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("epochs have differing shapes")]
    Shape,
    #[error("epoch file format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("client: {0}")]
    Client(#[from] ClientError),
}

/// Where an epoch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Event { sample: u64 },
    Window { index: u64 },
}

impl Origin {
    fn code(self) -> u64 {
        match self {
            Origin::Event { sample } => sample,
            Origin::Window { index } => index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    /// `(n_samples, n_channels)` for sources; whatever shape the function
    /// returned for map stages.
    pub data: Array2<f64>,
    pub label: Option<i32>,
    pub origin: Origin,
    pub span: Range<u64>,
    /// Position in the producing stage's output sequence.
    pub seq: u64,
    /// Emission time on the process clock.
    pub emitted_us: u64,
}

/// How many epochs a stage keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    /// Keep everything up to `cap`; exceeding it is reported as an error.
    All { cap: usize },
    /// Keep only the most recent `n`.
    Last(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSourceConfig {
    pub tmin_s: f64,
    pub tmax_s: f64,
    pub poll_rate_hz: f64,
    pub event_ids: BTreeSet<i32>,
    pub hop_s: Option<f64>,
    pub retain: Retain,
}

impl EpochSourceConfig {
    /// Epochs locked to markers whose value is in `event_ids`.
    pub fn event_locked(tmin_s: f64, tmax_s: f64, event_ids: impl IntoIterator<Item = i32>) -> Self {
        Self {
            tmin_s,
            tmax_s,
            poll_rate_hz: DEFAULT_POLL_RATE_HZ,
            event_ids: event_ids.into_iter().collect(),
            hop_s: None,
            retain: Retain::All { cap: DEFAULT_RETAIN_ALL_CAP },
        }
    }

    /// Windows of `tmax_s − tmin_s` seconds every `hop_s` seconds.
    pub fn sliding(tmin_s: f64, tmax_s: f64, hop_s: f64) -> Self {
        Self {
            tmin_s,
            tmax_s,
            poll_rate_hz: DEFAULT_POLL_RATE_HZ,
            event_ids: BTreeSet::new(),
            hop_s: Some(hop_s),
            retain: Retain::Last(DEFAULT_RETAIN_LAST),
        }
    }

    pub fn with_retain(mut self, retain: Retain) -> Self {
        self.retain = retain;
        self
    }

    pub fn with_poll_rate(mut self, hz: f64) -> Self {
        self.poll_rate_hz = hz;
        self
    }

    fn validate(&self) -> Result<(), EpochError> {
        let bad = |m: &str| Err(EpochError::Config(m.into()));
        if !(self.tmin_s < self.tmax_s) {
            return bad("tmin must be below tmax");
        }
        if !(self.poll_rate_hz > 0.0) {
            return bad("poll rate must be positive");
        }
        match self.retain {
            Retain::All { cap: 0 } | Retain::Last(0) => return bad("retention must be positive"),
            _ => {}
        }
        if let Some(hop) = self.hop_s {
            if !(hop > 0.0) {
                return bad("hop must be positive");
            }
        }
        Ok(())
    }
}

/// Samples per epoch for `[tmin, tmax)` at `fs`.
pub fn epoch_len(tmin_s: f64, tmax_s: f64, fs: f64) -> u64 {
    ((tmax_s - tmin_s) * fs).round().max(0.0) as u64
}

/// Absolute span of an event-locked epoch, or `None` if it would start
/// before sample 0.
pub fn event_span(sample: u64, tmin_s: f64, tmax_s: f64, fs: f64) -> Option<Range<u64>> {
    let begin = sample as i64 + (tmin_s * fs).round() as i64;
    (begin >= 0).then(|| {
        let begin = begin as u64;
        begin..begin + epoch_len(tmin_s, tmax_s, fs)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageStats {
    pub no_epochs: u64,
    pub dropped: u64,
    pub last_latency_ms: f64,
    pub overflowed: bool,
}

/// Epochs read out of a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochBatch {
    pub epochs: Vec<Epoch>,
}

impl EpochBatch {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<i32>> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    /// One row per epoch holding its data flattened row-major.
    pub fn features(&self) -> Result<Array2<f64>, EpochError> {
        let Some(first) = self.epochs.first() else {
            return Ok(Array2::zeros((0, 0)));
        };
        let width = first.data.len();
        let mut out = Array2::zeros((self.epochs.len(), width));
        for (mut row, e) in out.rows_mut().into_iter().zip(&self.epochs) {
            if e.data.dim() != first.data.dim() {
                return Err(EpochError::Shape);
            }
            row.assign(&ndarray::Array1::from_iter(e.data.iter().copied()));
        }
        Ok(out)
    }

    /// `(n_epochs, n_samples, n_channels)`.
    pub fn stacked(&self) -> Result<Array3<f64>, EpochError> {
        let views: Vec<_> = self.epochs.iter().map(|e| e.data.view()).collect();
        if views.is_empty() {
            return Ok(Array3::zeros((0, 0, 0)));
        }
        ndarray::stack(Axis(0), &views).map_err(|_| EpochError::Shape)
    }

    /// Writes the batch in the `CLEP` format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EpochError> {
        let (rows, cols) = self.epochs.first().map_or((0, 0), |e| e.data.dim());
        if self.epochs.iter().any(|e| e.data.dim() != (rows, cols)) {
            return Err(EpochError::Shape);
        }
        let mut out = Vec::with_capacity(22 + self.epochs.len() * (12 + rows * cols * 8));
        out.extend_from_slice(EPOCH_MAGIC);
        out.extend_from_slice(&EPOCH_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epochs.len() as u32).to_le_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&DataKind::Float64.code().to_le_bytes());
        for e in &self.epochs {
            out.extend_from_slice(&e.label.unwrap_or(NO_LABEL).to_le_bytes());
            out.extend_from_slice(&e.origin.code().to_le_bytes());
            for v in e.data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        f.flush()?;
        Ok(())
    }
}

/// One record of a saved epoch file.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedEpoch {
    pub label: Option<i32>,
    pub origin: u64,
    pub data: Array2<f64>,
}

pub fn load_epochs(path: impl AsRef<Path>) -> Result<Vec<SavedEpoch>, EpochError> {
    let bytes = fs::read(path)?;
    let fmt = |e: crate::protocol::DecodeError| EpochError::Format(e.to_string());
    let mut r = Reader::new(&bytes);
    if r.take(4).map_err(fmt)? != EPOCH_MAGIC {
        return Err(EpochError::Format("bad magic".into()));
    }
    let version = r.u16().map_err(fmt)?;
    if version != EPOCH_FILE_VERSION {
        return Err(EpochError::Format(format!("unsupported version {version}")));
    }
    let n = r.u32().map_err(fmt)? as usize;
    let rows = r.u32().map_err(fmt)? as usize;
    let cols = r.u32().map_err(fmt)? as usize;
    if r.u32().map_err(fmt)? != DataKind::Float64.code() {
        return Err(EpochError::Format("only float64 epoch files are supported".into()));
    }
    let per = rows
        .checked_mul(cols)
        .ok_or_else(|| EpochError::Format("epoch size overflows".into()))?;
    let mut out = Vec::with_capacity(n.min(r.remaining() / 12 + 1));
    for _ in 0..n {
        let label = r.i32().map_err(fmt)?;
        let origin = r.u64().map_err(fmt)?;
        let mut values = Vec::with_capacity(per.min(r.remaining() / 8));
        for _ in 0..per {
            values.push(r.f64().map_err(fmt)?);
        }
        out.push(SavedEpoch {
            label: (label != NO_LABEL).then_some(label),
            origin,
            data: Array2::from_shape_vec((rows, cols), values).expect("sized above"),
        });
    }
    r.finish().map_err(fmt)?;
    Ok(out)
}

// --- stages ----------------------------------------------------------------

enum Msg {
    Epoch(Arc<Epoch>),
    End,
}

struct StageState {
    retained: VecDeque<Epoch>,
    retain: Retain,
    stats: StageStats,
    next_seq: u64,
    new_epoch: bool,
    /// Epochs with `seq` at or above this have not been saved or read out.
    unsaved_from: u64,
    ended: bool,
    started: bool,
}

type Runner = Box<dyn FnOnce(Arc<StageShared>) + Send>;

struct StageShared {
    name: String,
    state: Mutex<StageState>,
    signal: Condvar,
    stop: StopSignal,
    subscribers: Mutex<Vec<Sender<Msg>>>,
    runner: Mutex<Option<Runner>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl StageShared {
    fn emit(&self, mut epoch: Epoch) {
        epoch.emitted_us = clock::now_us();
        let shared = {
            let mut st = self.state.lock();
            epoch.seq = st.next_seq;
            st.next_seq += 1;
            st.stats.no_epochs += 1;
            let epoch = Arc::new(epoch);
            match st.retain {
                Retain::All { cap } if st.retained.len() >= cap => {
                    if !st.stats.overflowed {
                        warn!("{}: retained-epoch cap {cap} exceeded", self.name);
                    }
                    st.stats.overflowed = true;
                }
                Retain::All { .. } => st.retained.push_back((*epoch).clone()),
                Retain::Last(n) => {
                    st.retained.push_back((*epoch).clone());
                    while st.retained.len() > n {
                        st.retained.pop_front();
                    }
                }
            }
            st.new_epoch = true;
            epoch
        };
        self.signal.notify_all();
        self.subscribers
            .lock()
            .retain(|tx| tx.send(Msg::Epoch(Arc::clone(&shared))).is_ok());
    }

    fn drop_epoch(&self, why: &str) {
        debug!("{}: dropped epoch: {why}", self.name);
        self.state.lock().stats.dropped += 1;
    }

    fn set_latency(&self, started: Instant) {
        self.state.lock().stats.last_latency_ms = started.elapsed().as_secs_f64() * 1e3;
    }

    fn finish(&self) {
        self.state.lock().ended = true;
        self.signal.notify_all();
        for tx in self.subscribers.lock().drain(..) {
            let _ = tx.send(Msg::End);
        }
        debug!("{} ended", self.name);
    }
}

/// Handle to a running (or startable) stage. Clones share the stage.
#[derive(Clone)]
pub struct Stage(Arc<StageShared>);

impl Stage {
    fn new(name: String, retain: Retain, runner: Runner) -> Self {
        Stage(Arc::new(StageShared {
            name,
            state: Mutex::new(StageState {
                retained: VecDeque::new(),
                retain,
                stats: StageStats::default(),
                next_seq: 0,
                new_epoch: false,
                unsaved_from: 0,
                ended: false,
                started: false,
            }),
            signal: Condvar::new(),
            stop: StopSignal::new(),
            subscribers: Mutex::new(Vec::new()),
            runner: Mutex::new(Some(runner)),
            thread: Mutex::new(None),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    fn subscribe(&self) -> Receiver<Msg> {
        let (tx, rx) = unbounded();
        let ended = self.0.state.lock().ended;
        if ended {
            let _ = tx.send(Msg::End);
        } else {
            self.0.subscribers.lock().push(tx);
        }
        rx
    }

    /// Starts the stage's task. Calling it again is a no-op.
    pub fn start(&self) {
        let Some(runner) = self.0.runner.lock().take() else {
            return;
        };
        self.0.state.lock().started = true;
        let shared = Arc::clone(&self.0);
        let handle = thread::Builder::new()
            .name(self.0.name.clone())
            .spawn(move || {
                let s = Arc::clone(&shared);
                runner(shared);
                s.finish();
            })
            .expect("spawn stage thread");
        *self.0.thread.lock() = Some(handle);
    }

    /// Finishes the epoch in flight, halts the task and signals end-of-stream
    /// downstream. Idempotent.
    pub fn stop(&self) {
        self.0.stop.stop();
        if self.0.runner.lock().take().is_some() {
            // Never started.
            self.0.finish();
        }
        let handle = self.0.thread.lock().take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }

    /// Blocks until the stage has ended on its own (e.g. upstream ended).
    pub fn join(&self) {
        let handle = self.0.thread.lock().take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }

    pub fn is_running(&self) -> bool {
        let st = self.0.state.lock();
        st.started && !st.ended
    }

    pub fn has_ended(&self) -> bool {
        self.0.state.lock().ended
    }

    pub fn stats(&self) -> StageStats {
        self.0.state.lock().stats
    }

    /// The most recent epoch; clears the new-epoch flag.
    pub fn read_epoch(&self) -> Result<Epoch, EpochError> {
        let mut st = self.0.state.lock();
        if st.ended && !st.new_epoch {
            return Err(EpochError::EndOfStream);
        }
        let latest = st.retained.back().cloned().ok_or(EpochError::Empty)?;
        st.new_epoch = false;
        Ok(latest)
    }

    /// Waits until an epoch newer than the last [`read_epoch`](Self::read_epoch)
    /// exists. Returns false on timeout or end of stream.
    pub fn wait_new_epoch(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.0.state.lock();
        while !st.new_epoch && !st.ended {
            if self.0.signal.wait_until(&mut st, deadline).timed_out() {
                break;
            }
        }
        st.new_epoch
    }

    /// Every retained epoch; marks them as read for
    /// [`save_new_epochs`](Self::save_new_epochs).
    pub fn read_all_epochs(&self) -> Result<EpochBatch, EpochError> {
        let mut st = self.0.state.lock();
        if let (Retain::All { cap }, true) = (st.retain, st.stats.overflowed) {
            return Err(EpochError::Overflow { cap });
        }
        st.unsaved_from = st.next_seq;
        Ok(EpochBatch {
            epochs: st.retained.iter().cloned().collect(),
        })
    }

    /// Saves every retained epoch and returns them.
    pub fn save_epochs(&self, path: impl AsRef<Path>) -> Result<EpochBatch, EpochError> {
        let batch = self.read_all_epochs()?;
        batch.save(path)?;
        Ok(batch)
    }

    /// Saves the epochs produced since the last save or read-all.
    pub fn save_new_epochs(&self, path: impl AsRef<Path>) -> Result<EpochBatch, EpochError> {
        let batch = {
            let mut st = self.0.state.lock();
            if let (Retain::All { cap }, true) = (st.retain, st.stats.overflowed) {
                return Err(EpochError::Overflow { cap });
            }
            let from = st.unsaved_from;
            st.unsaved_from = st.next_seq;
            EpochBatch {
                epochs: st.retained.iter().filter(|e| e.seq >= from).cloned().collect(),
            }
        };
        batch.save(path)?;
        Ok(batch)
    }
}

impl Drop for StageShared {
    fn drop(&mut self) {
        self.stop.stop();
    }
}

fn header_with_retry(client: &mut Client, stop: &StopSignal) -> Option<StreamHeader> {
    loop {
        match client.get_header() {
            Ok(h) => return Some(h),
            Err(ClientError::NoHeader) => {
                if stop.wait_timeout(Duration::from_millis(10)) {
                    return None;
                }
            }
            Err(e) => {
                warn!("epoch source cannot read header: {e}");
                return None;
            }
        }
    }
}

fn poll_ms(cfg: &EpochSourceConfig) -> u32 {
    ((1000.0 / cfg.poll_rate_hz).round() as u32).max(1)
}

/// Event-locked epoching: one epoch per marker whose value is in
/// `cfg.event_ids`, emitted once its whole span is buffered. Only markers
/// arriving after the stage starts are considered.
pub fn event_locked_source(client: Client, cfg: EpochSourceConfig) -> Result<Stage, EpochError> {
    cfg.validate()?;
    if cfg.event_ids.is_empty() {
        return Err(EpochError::Config("event_ids must not be empty".into()));
    }
    let retain = cfg.retain;
    let runner: Runner = Box::new(move |shared| {
        if let Err(e) = run_event_locked(client, &cfg, &shared) {
            warn!("{}: stopped on error: {e}", shared.name);
        }
    });
    Ok(Stage::new("epoch-events".into(), retain, runner))
}

fn run_event_locked(
    mut client: Client,
    cfg: &EpochSourceConfig,
    shared: &StageShared,
) -> Result<(), ClientError> {
    let stop = &shared.stop;
    let Some(header) = header_with_retry(&mut client, stop) else {
        return Ok(());
    };
    let fs = header.sampling_rate_hz;
    let period = poll_ms(cfg);
    let mut next_event = client.poll()?.n_events;
    let mut pending: VecDeque<Event> = VecDeque::new();
    info!(
        "{}: {} samples per epoch at {fs} Hz",
        shared.name,
        epoch_len(cfg.tmin_s, cfg.tmax_s, fs)
    );
    while !stop.is_stopped() {
        let need = pending
            .front()
            .and_then(|e| event_span(e.sample, cfg.tmin_s, cfg.tmax_s, fs))
            .map_or(u64::MAX, |s| s.end);
        let counters = client.wait_data(need, next_event + 1, period)?;
        let woke = Instant::now();
        if counters.n_events < next_event {
            warn!("{}: stream was reset", shared.name);
            pending.clear();
            next_event = counters.n_events;
            continue;
        }
        if counters.n_events > next_event {
            match client.get_events(next_event, counters.n_events) {
                Ok(events) => pending.extend(
                    events.into_iter().filter(|e| cfg.event_ids.contains(&e.value)),
                ),
                Err(ClientError::Evicted) => warn!("{}: events were evicted before reading", shared.name),
                Err(e) => return Err(e),
            }
            next_event = counters.n_events;
        }
        while let Some(event) = pending.front() {
            let Some(span) = event_span(event.sample, cfg.tmin_s, cfg.tmax_s, fs) else {
                shared.drop_epoch("epoch starts before the stream");
                pending.pop_front();
                continue;
            };
            if span.end > counters.n_samples {
                break;
            }
            let event = pending.pop_front().unwrap();
            match client.get_samples(span.start, span.end) {
                Ok(block) => {
                    shared.emit(Epoch {
                        data: block.data.to_array(),
                        label: Some(event.value),
                        origin: Origin::Event { sample: event.sample },
                        span,
                        seq: 0,
                        emitted_us: 0,
                    });
                    shared.set_latency(woke);
                }
                Err(ClientError::Evicted) => shared.drop_epoch("span evicted"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

/// Sliding-window epoching on the absolute grid `k·hop`. Starts at the
/// first window that begins at or after the stream head at start time.
pub fn sliding_source(client: Client, cfg: EpochSourceConfig) -> Result<Stage, EpochError> {
    cfg.validate()?;
    if cfg.hop_s.is_none() {
        return Err(EpochError::Config("sliding source needs a hop".into()));
    }
    let retain = cfg.retain;
    let runner: Runner = Box::new(move |shared| {
        if let Err(e) = run_sliding(client, &cfg, &shared) {
            warn!("{}: stopped on error: {e}", shared.name);
        }
    });
    Ok(Stage::new("epoch-sliding".into(), retain, runner))
}

fn run_sliding(
    mut client: Client,
    cfg: &EpochSourceConfig,
    shared: &StageShared,
) -> Result<(), ClientError> {
    let stop = &shared.stop;
    let Some(header) = header_with_retry(&mut client, stop) else {
        return Ok(());
    };
    let fs = header.sampling_rate_hz;
    let hop = ((cfg.hop_s.unwrap() * fs).round() as u64).max(1);
    let len = epoch_len(cfg.tmin_s, cfg.tmax_s, fs);
    if len == 0 {
        warn!("{}: window shorter than one sample", shared.name);
        return Ok(());
    }
    let period = poll_ms(cfg);
    let head = client.poll()?.n_samples;
    let mut k = head.div_ceil(hop);
    info!("{}: {len}-sample windows every {hop} samples from window {k}", shared.name);
    while !stop.is_stopped() {
        let counters = client.wait_data(k * hop + len, u64::MAX, period)?;
        let woke = Instant::now();
        let available = counters.n_samples;
        if available < k * hop + len {
            continue;
        }
        let last = ((available - len) / hop).min(k + MAX_WINDOWS_PER_FETCH - 1);
        let (from, to) = (k * hop, last * hop + len);
        match client.get_samples(from, to) {
            Ok(block) => {
                let all = block.data.to_array();
                for w in k..=last {
                    let begin = w * hop;
                    let off = (begin - from) as usize;
                    shared.emit(Epoch {
                        data: all.slice(ndarray::s![off..off + len as usize, ..]).to_owned(),
                        label: None,
                        origin: Origin::Window { index: w },
                        span: begin..begin + len,
                        seq: 0,
                        emitted_us: 0,
                    });
                }
                shared.set_latency(woke);
            }
            Err(ClientError::Evicted) => {
                // Fall back to one request per window so only the evicted
                // ones are lost.
                for w in k..=last {
                    let begin = w * hop;
                    match client.get_samples(begin, begin + len) {
                        Ok(block) => shared.emit(Epoch {
                            data: block.data.to_array(),
                            label: None,
                            origin: Origin::Window { index: w },
                            span: begin..begin + len,
                            seq: 0,
                            emitted_us: 0,
                        }),
                        Err(ClientError::Evicted) => shared.drop_epoch("window evicted"),
                        Err(e) => return Err(e),
                    }
                }
            }
            Err(e) => return Err(e),
        }
        k = last + 1;
    }
    Ok(())
}

/// Failure reported by a map-stage function.
pub type MapResult = Result<Array2<f64>, String>;

/// Applies `f` to every epoch emitted by `upstream`, preserving label,
/// origin and span. Errors and panics in `f` drop that epoch only. The stage
/// inherits the upstream retention policy.
pub fn map_stage<F>(upstream: &Stage, f: F) -> Stage
where
    F: Fn(&Array2<f64>) -> MapResult + Send + 'static,
{
    let rx = upstream.subscribe();
    let retain = upstream.0.state.lock().retain;
    let name = format!("{}-map", upstream.name());
    let runner: Runner = Box::new(move |shared| run_map(rx, f, &shared));
    Stage::new(name, retain, runner)
}

fn run_map<F>(rx: Receiver<Msg>, f: F, shared: &StageShared)
where
    F: Fn(&Array2<f64>) -> MapResult,
{
    loop {
        if shared.stop.is_stopped() {
            break;
        }
        let epoch = match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(Msg::Epoch(e)) => e,
            Ok(Msg::End) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => continue,
        };
        let started = Instant::now();
        match catch_unwind(AssertUnwindSafe(|| f(&epoch.data))) {
            Ok(Ok(data)) => {
                shared.set_latency(started);
                shared.emit(Epoch {
                    data,
                    label: epoch.label,
                    origin: epoch.origin,
                    span: epoch.span.clone(),
                    seq: 0,
                    emitted_us: 0,
                });
            }
            Ok(Err(msg)) => shared.drop_epoch(&msg),
            Err(_) => shared.drop_epoch("function panicked"),
        }
    }
}
