//! Headless experiment scheduling: segments and sequences over a frame clock.
//!
//! A [`Segment`] is a quasi-static stretch of an experiment lasting a whole
//! number of frames, optionally sending a marker on its first flip and
//! listening for keys. A [`Sequence`] orders segments (and nested
//! sequences), can repeat and shuffle them, and runs them so that
//! preparation and logging never sit on the flip path: while segment `k`
//! is on screen a worker runs `after(k − 1)` and then `before(k + 1)`.
//! `before(0)` runs before the first flip and the last `after` once the
//! final frame is done.
//!
//! The [`FrameClock`] is either simulated (frames are numbers, time is
//! `frame / rate`) or tied to the process clock. In wall-clock mode a
//! worker that has not finished when its segment ends is a timing
//! violation; the next segment waits for it and the clock re-anchors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;
use log::{debug, warn};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::clock;
use crate::markers::SharedSink;
use crate::signal::StopSignal;

pub const DEFAULT_FRAME_RATE_HZ: f64 = 60.0;
pub const DEFAULT_SHUFFLE_TRIES: usize = 10_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("sequence has already been run to completion")]
    Consumed,
    #[error("no order satisfied the predicate after {tries} shuffles")]
    Exhausted { tries: usize },
}

// --- clock -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClockMode {
    Simulated,
    WallClock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flip {
    pub frame: u64,
    pub time_us: u64,
    /// The flip happened more than one frame period after its deadline.
    pub late: bool,
}

#[derive(Debug)]
pub struct FrameClock {
    rate_hz: f64,
    mode: ClockMode,
    speed: f64,
    frame: u64,
    anchor: Option<(Instant, u64)>,
}

impl FrameClock {
    pub fn simulated(rate_hz: f64) -> Self {
        Self::new(rate_hz, ClockMode::Simulated)
    }

    pub fn wall_clock(rate_hz: f64) -> Self {
        Self::new(rate_hz, ClockMode::WallClock)
    }

    fn new(rate_hz: f64, mode: ClockMode) -> Self {
        assert!(rate_hz > 0.0, "frame rate must be positive");
        Self { rate_hz, mode, speed: 1.0, frame: 0, anchor: None }
    }

    /// Runs a wall clock `speed` times faster than real time. Frame numbers
    /// and durations are unaffected.
    pub fn with_speed(mut self, speed: f64) -> Self {
        assert!(speed > 0.0, "speed must be positive");
        self.speed = speed;
        self
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Number of the next frame to be flipped.
    pub fn frame(&self) -> u64 {
        self.frame
    }

    /// Real time per frame.
    pub fn frame_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / (self.rate_hz * self.speed))
    }

    pub fn frames_for(&self, duration_s: f64) -> u64 {
        ((duration_s * self.rate_hz).round() as u64).max(1)
    }

    /// Simulated time of `frame`, in microseconds.
    pub fn simulated_us(&self, frame: u64) -> u64 {
        (frame as f64 * 1e6 / self.rate_hz).round() as u64
    }

    /// Presents the next frame.
    pub fn flip(&mut self) -> Flip {
        let frame = self.frame;
        self.frame += 1;
        match self.mode {
            ClockMode::Simulated => Flip { frame, time_us: self.simulated_us(frame), late: false },
            ClockMode::WallClock => {
                let (anchor, anchor_frame) = *self.anchor.get_or_insert((Instant::now(), frame));
                let period = self.frame_period();
                let deadline = anchor + period.mul_f64((frame - anchor_frame) as f64);
                clock::sleep_until(deadline);
                let now = Instant::now();
                Flip {
                    frame,
                    time_us: clock::instant_us(now),
                    late: now > deadline + period,
                }
            }
        }
    }

    /// Makes the next flip due immediately, e.g. after a delay that would
    /// otherwise compress the frames that follow.
    pub fn resync(&mut self) {
        self.anchor = None;
    }

    fn now_us(&self) -> u64 {
        match self.mode {
            ClockMode::Simulated => self.simulated_us(self.frame),
            ClockMode::WallClock => clock::now_us(),
        }
    }
}

// --- keys ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyEvent {
    pub key: String,
    pub frame: u64,
    /// The key is one of the segment's response keys.
    pub response: bool,
}

/// Key presses, either scheduled by frame or delivered live.
#[derive(Default)]
pub struct KeyInput {
    scheduled: VecDeque<(u64, String)>,
    live: Option<Receiver<String>>,
}

impl KeyInput {
    pub fn none() -> Self {
        Self::default()
    }

    /// Keys that become visible when the given frame is about to be flipped.
    pub fn scheduled<S: Into<String>>(keys: impl IntoIterator<Item = (u64, S)>) -> Self {
        let mut scheduled: Vec<(u64, String)> = keys.into_iter().map(|(f, k)| (f, k.into())).collect();
        scheduled.sort_by_key(|(f, _)| *f);
        Self { scheduled: scheduled.into(), live: None }
    }

    pub fn live(rx: Receiver<String>) -> Self {
        Self { scheduled: VecDeque::new(), live: Some(rx) }
    }

    fn poll(&mut self, frame: u64) -> Vec<String> {
        let mut out = Vec::new();
        while self.scheduled.front().is_some_and(|(f, _)| *f <= frame) {
            out.push(self.scheduled.pop_front().unwrap().1);
        }
        if let Some(rx) = &self.live {
            out.extend(rx.try_iter());
        }
        out
    }
}

// --- segments --------------------------------------------------------------

/// Per-frame information handed to frame callbacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameInfo {
    pub frame: u64,
    pub time_us: u64,
    /// Frame number within the current segment.
    pub segment_frame: u64,
    /// Position of the segment in the running sequence.
    pub position: usize,
}

/// What a segment will do when it runs; `before` hooks may change it.
#[derive(Debug, Clone, PartialEq)]
pub struct Preparation {
    /// Position the segment will have in the running sequence.
    pub position: usize,
    pub duration_s: Option<f64>,
    pub marker_value: Option<i64>,
    pub stimulus: Option<String>,
}

/// Custom segment behaviour. `before` and `after` run off the flip path;
/// `on_frame` runs on it and must be quick.
pub trait SegmentHooks: Send + Sync {
    fn before(&self, _prep: &mut Preparation) {}
    fn after(&self, _log: &SegmentLog) {}
    fn on_frame(&self, _frame: &FrameInfo) {}
}

pub type FrameCallback = Arc<dyn Fn(&FrameInfo) + Send + Sync>;

#[derive(Clone)]
pub struct Segment {
    pub name: String,
    /// `None` runs until a response key.
    pub duration_s: Option<f64>,
    pub marker_value: Option<i64>,
    pub marker_sink: Option<SharedSink>,
    /// Keys that end an unbounded segment; `None` accepts any key.
    pub response_keys: Option<BTreeSet<String>>,
    pub stimulus: Option<String>,
    pub hooks: Option<Arc<dyn SegmentHooks>>,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.duration_s == other.duration_s
            && self.marker_value == other.marker_value
            && self.response_keys == other.response_keys
            && self.stimulus == other.stimulus
    }
}

impl std::fmt::Debug for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segment")
            .field("name", &self.name)
            .field("duration_s", &self.duration_s)
            .field("marker_value", &self.marker_value)
            .field("stimulus", &self.stimulus)
            .finish_non_exhaustive()
    }
}

impl Segment {
    pub fn new(name: impl Into<String>, duration_s: Option<f64>) -> Self {
        Self {
            name: name.into(),
            duration_s,
            marker_value: None,
            marker_sink: None,
            response_keys: None,
            stimulus: None,
            hooks: None,
        }
    }

    pub fn with_marker(mut self, value: i64) -> Self {
        self.marker_value = Some(value);
        self
    }

    pub fn with_sink(mut self, sink: SharedSink) -> Self {
        self.marker_sink = Some(sink);
        self
    }

    pub fn with_stimulus(mut self, tag: impl Into<String>) -> Self {
        self.stimulus = Some(tag.into());
        self
    }

    pub fn with_response_keys<S: Into<String>>(mut self, keys: impl IntoIterator<Item = S>) -> Self {
        self.response_keys = Some(keys.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_hooks(mut self, hooks: Arc<dyn SegmentHooks>) -> Self {
        self.hooks = Some(hooks);
        self
    }

    fn preparation(&self) -> Preparation {
        Preparation {
            position: 0,
            duration_s: self.duration_s,
            marker_value: self.marker_value,
            stimulus: self.stimulus.clone(),
        }
    }

    fn is_response(&self, key: &str) -> bool {
        self.response_keys.as_ref().is_none_or(|keys| keys.contains(key))
    }
}

/// Attributes settable on every segment of a sequence.
#[derive(Clone)]
pub enum SegmentAttr {
    MarkerSink(Option<SharedSink>),
    MarkerValue(Option<i64>),
    Duration(Option<f64>),
    ResponseKeys(Option<BTreeSet<String>>),
    Stimulus(Option<String>),
    Hooks(Option<Arc<dyn SegmentHooks>>),
}

impl SegmentAttr {
    fn apply(&self, seg: &mut Segment) {
        match self {
            SegmentAttr::MarkerSink(v) => seg.marker_sink = v.clone(),
            SegmentAttr::MarkerValue(v) => seg.marker_value = *v,
            SegmentAttr::Duration(v) => seg.duration_s = *v,
            SegmentAttr::ResponseKeys(v) => seg.response_keys = v.clone(),
            SegmentAttr::Stimulus(v) => seg.stimulus = v.clone(),
            SegmentAttr::Hooks(v) => seg.hooks = v.clone(),
        }
    }
}

// --- logs ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentLog {
    pub name: String,
    pub position: usize,
    pub seg_idx: usize,
    pub iteration: usize,
    pub start_frame: u64,
    /// Exclusive.
    pub end_frame: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub stimulus: Option<String>,
    pub marker_value: Option<i64>,
    /// Time of the flip the marker was coupled to.
    pub marker_us: Option<u64>,
    /// Time the sink reported for the write itself.
    pub marker_sent_us: Option<u64>,
    pub marker_error: Option<String>,
    pub keys: Vec<KeyEvent>,
    pub late_flips: u32,
    pub violations: u32,
}

impl SegmentLog {
    pub fn frames(&self) -> u64 {
        self.end_frame - self.start_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CallbackKind {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallbackRecord {
    pub kind: CallbackKind,
    /// Position of the segment the callback belongs to.
    pub position: usize,
    /// Position of the segment on screen while it ran.
    pub during: Option<usize>,
    pub started_us: u64,
    pub finished_us: u64,
    pub panicked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SequenceLog {
    pub segments: Vec<SegmentLog>,
    pub callbacks: Vec<CallbackRecord>,
    pub iterations: usize,
}

impl SequenceLog {
    pub fn total_frames(&self) -> u64 {
        self.segments.iter().map(SegmentLog::frames).sum()
    }

    pub fn violations(&self) -> u32 {
        self.segments.iter().map(|s| s.violations).sum()
    }

    /// One JSON object per segment, one per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for seg in &self.segments {
            serde_json::to_writer(&mut out, seg)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn extend(&mut self, other: SequenceLog) {
        self.segments.extend(other.segments);
        self.callbacks.extend(other.callbacks);
        self.iterations += other.iterations;
    }
}

// --- sequences -------------------------------------------------------------

#[derive(Clone)]
pub enum Item {
    Segment(Segment),
    Sequence(Sequence),
}

impl From<Segment> for Item {
    fn from(s: Segment) -> Self {
        Item::Segment(s)
    }
}

impl From<Sequence> for Item {
    fn from(s: Sequence) -> Self {
        Item::Sequence(s)
    }
}

#[derive(Clone)]
pub struct Sequence {
    items: Vec<Item>,
    seg_idcs: Vec<usize>,
    shuffle_on_call: bool,
    frame_callback: Option<FrameCallback>,
    rng: ChaCha8Rng,
}

struct Planned {
    segment: Segment,
    seg_idx: usize,
    frame_hooks: Vec<FrameCallback>,
    starts_iteration: bool,
}

impl Sequence {
    /// Items in the given order, each with its own index.
    pub fn new<I: Into<Item>>(items: impl IntoIterator<Item = I>) -> Self {
        let items: Vec<Item> = items.into_iter().map(Into::into).collect();
        let seg_idcs = (0..items.len()).collect();
        Self::from_parts(items, seg_idcs)
    }

    /// `items` repeated `repeats` times; repetitions share an index.
    pub fn repeated<I: Into<Item>>(items: impl IntoIterator<Item = I>, repeats: usize) -> Self {
        let base: Vec<Item> = items.into_iter().map(Into::into).collect();
        let m = base.len();
        let items = base.iter().cloned().cycle().take(m * repeats).collect();
        let seg_idcs = (0..m).cycle().take(m * repeats).collect();
        Self::from_parts(items, seg_idcs)
    }

    fn from_parts(items: Vec<Item>, seg_idcs: Vec<usize>) -> Self {
        Self {
            items,
            seg_idcs,
            shuffle_on_call: false,
            frame_callback: None,
            rng: ChaCha8Rng::from_rng(&mut rand::rng()),
        }
    }

    pub fn shuffle_on_call(mut self, on: bool) -> Self {
        self.shuffle_on_call = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// A callback run on every frame of every segment in this sequence,
    /// including nested ones.
    pub fn with_frame_callback(mut self, cb: FrameCallback) -> Self {
        self.frame_callback = Some(cb);
        self
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn seg_idcs(&self) -> &[usize] {
        &self.seg_idcs
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// All segments, flattened in their current order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for item in &self.items {
            match item {
                Item::Segment(s) => out.push(s.clone()),
                Item::Sequence(q) => out.extend(q.segments()),
            }
        }
        out
    }

    /// Permutes the items (and their indices) of this level.
    pub fn shuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut self.rng);
        let items = std::mem::take(&mut self.items);
        let mut slots: Vec<Option<Item>> = items.into_iter().map(Some).collect();
        self.items = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        self.seg_idcs = order.iter().map(|&i| self.seg_idcs[i]).collect();
    }

    /// Shuffles until `pred(seg_idcs)` holds. Returns the number of
    /// shuffles used.
    pub fn shuffle_until(
        &mut self,
        pred: impl Fn(&[usize]) -> bool,
        max_tries: usize,
    ) -> Result<usize, SchedulerError> {
        for tries in 1..=max_tries {
            self.shuffle();
            if pred(&self.seg_idcs) {
                return Ok(tries);
            }
        }
        Err(SchedulerError::Exhausted { tries: max_tries })
    }

    /// Sets an attribute on every segment, recursively.
    pub fn set_segment_attr(&mut self, attr: &SegmentAttr) {
        for item in &mut self.items {
            match item {
                Item::Segment(s) => attr.apply(s),
                Item::Sequence(q) => q.set_segment_attr(attr),
            }
        }
    }

    fn plan(&mut self, inherited: &[FrameCallback], out: &mut Vec<Planned>) {
        if self.shuffle_on_call {
            self.shuffle();
        }
        let mut hooks = inherited.to_vec();
        hooks.extend(self.frame_callback.clone());
        for (item, &seg_idx) in self.items.iter_mut().zip(&self.seg_idcs) {
            match item {
                Item::Segment(s) => out.push(Planned {
                    segment: s.clone(),
                    seg_idx,
                    frame_hooks: hooks.clone(),
                    starts_iteration: false,
                }),
                Item::Sequence(q) => q.plan(&hooks, out),
            }
        }
    }

    fn plan_iteration(&mut self) -> VecDeque<Planned> {
        let mut out = Vec::new();
        self.plan(&[], &mut out);
        if let Some(first) = out.first_mut() {
            first.starts_iteration = true;
        }
        out.into()
    }
}

/// Repeats a sequence until a stop signal is set or a stop key is
/// pressed; checked at iteration boundaries.
pub struct LoopingSequence {
    pub sequence: Sequence,
    pub stop: StopSignal,
    pub stop_keys: BTreeSet<String>,
}

impl LoopingSequence {
    pub fn new(sequence: Sequence, stop: StopSignal) -> Self {
        Self { sequence, stop, stop_keys: BTreeSet::new() }
    }

    pub fn with_stop_keys<S: Into<String>>(mut self, keys: impl IntoIterator<Item = S>) -> Self {
        self.stop_keys = keys.into_iter().map(Into::into).collect();
        self
    }
}

/// Repeats a sequence while a background task runs; at least one full
/// iteration is shown. Usable once.
pub struct TaskLoopingSequence {
    pub sequence: Sequence,
    task: Option<Box<dyn FnOnce() + Send>>,
}

impl TaskLoopingSequence {
    pub fn new(task: impl FnOnce() + Send + 'static, sequence: Sequence) -> Self {
        Self { sequence, task: Some(Box::new(task)) }
    }

    pub fn is_consumed(&self) -> bool {
        self.task.is_none()
    }
}

// --- execution -------------------------------------------------------------

trait PlanSource {
    fn next(&mut self) -> Option<Planned>;
    /// Consulted before starting a new iteration. `log` holds the segments
    /// run so far.
    fn should_stop(&mut self, log: &[SegmentLog]) -> bool;
}

struct Once<'a> {
    queue: VecDeque<Planned>,
    _seq: std::marker::PhantomData<&'a ()>,
}

impl PlanSource for Once<'_> {
    fn next(&mut self) -> Option<Planned> {
        self.queue.pop_front()
    }
    fn should_stop(&mut self, _: &[SegmentLog]) -> bool {
        false
    }
}

struct Repeating<'a, F: FnMut(&[SegmentLog]) -> bool> {
    seq: &'a mut Sequence,
    queue: VecDeque<Planned>,
    stop: F,
}

impl<F: FnMut(&[SegmentLog]) -> bool> PlanSource for Repeating<'_, F> {
    fn next(&mut self) -> Option<Planned> {
        if self.queue.is_empty() {
            self.queue = self.seq.plan_iteration();
        }
        self.queue.pop_front()
    }
    fn should_stop(&mut self, log: &[SegmentLog]) -> bool {
        (self.stop)(log)
    }
}

/// Runs segments and sequences against a clock and key input.
pub struct Runner {
    pub clock: FrameClock,
    pub keys: KeyInput,
    /// Ends unbounded segments and stops at the next segment boundary.
    pub abort: StopSignal,
}

fn timed<T>(
    kind: CallbackKind,
    position: usize,
    during: Option<usize>,
    records: &Mutex<Vec<CallbackRecord>>,
    f: impl FnOnce() -> T,
) -> Option<T> {
    let started_us = clock::now_us();
    let out = catch_unwind(AssertUnwindSafe(f)).ok();
    if out.is_none() {
        warn!("{kind:?} callback of segment {position} panicked");
    }
    records.lock().push(CallbackRecord {
        kind,
        position,
        during,
        started_us,
        finished_us: clock::now_us(),
        panicked: out.is_none(),
    });
    out
}

fn run_before(p: &Planned, position: usize, during: Option<usize>, records: &Mutex<Vec<CallbackRecord>>) -> Preparation {
    let mut prep = p.segment.preparation();
    prep.position = position;
    if let Some(h) = &p.segment.hooks {
        let mut trial = prep.clone();
        if timed(CallbackKind::Before, position, during, records, || h.before(&mut trial)).is_some() {
            prep = trial;
        }
    } else {
        timed(CallbackKind::Before, position, during, records, || ());
    }
    prep
}

fn run_after(seg: &Segment, log: &SegmentLog, during: Option<usize>, records: &Mutex<Vec<CallbackRecord>>) {
    timed(CallbackKind::After, log.position, during, records, || {
        if let Some(h) = &seg.hooks {
            h.after(log);
        }
    });
}

impl Runner {
    pub fn new(clock: FrameClock) -> Self {
        Self { clock, keys: KeyInput::none(), abort: StopSignal::new() }
    }

    pub fn with_keys(mut self, keys: KeyInput) -> Self {
        self.keys = keys;
        self
    }

    /// Runs one segment on its own: before, frames, after.
    pub fn run_segment(&mut self, segment: &Segment) -> SegmentLog {
        let mut src = Once {
            queue: VecDeque::from([Planned {
                segment: segment.clone(),
                seg_idx: 0,
                frame_hooks: Vec::new(),
                starts_iteration: true,
            }]),
            _seq: std::marker::PhantomData,
        };
        let mut log = self.run_plan(&mut src);
        log.iterations = 1;
        log.segments.pop().expect("one segment ran")
    }

    /// Runs the sequence once, shuffling where configured.
    pub fn run_sequence(&mut self, seq: &mut Sequence) -> SequenceLog {
        let mut src = Once { queue: seq.plan_iteration(), _seq: std::marker::PhantomData };
        let mut log = self.run_plan(&mut src);
        log.iterations = 1;
        log
    }

    pub fn run_looping(&mut self, looping: &mut LoopingSequence) -> SequenceLog {
        let stop = looping.stop.clone();
        let keys = looping.stop_keys.clone();
        let mut src = Repeating {
            seq: &mut looping.sequence,
            queue: VecDeque::new(),
            stop: move |log: &[SegmentLog]| {
                stop.is_stopped()
                    || log.iter().flat_map(|s| &s.keys).any(|k| keys.contains(&k.key))
            },
        };
        self.run_plan(&mut src)
    }

    pub fn run_task_looping(&mut self, looping: &mut TaskLoopingSequence) -> Result<SequenceLog, SchedulerError> {
        let task = looping.task.take().ok_or(SchedulerError::Consumed)?;
        let handle = thread::Builder::new()
            .name("looping-task".into())
            .spawn(task)
            .expect("spawn task thread");
        let log = {
            let h = &handle;
            let mut src = Repeating {
                seq: &mut looping.sequence,
                queue: VecDeque::new(),
                stop: move |_: &[SegmentLog]| h.is_finished(),
            };
            self.run_plan(&mut src)
        };
        if handle.join().is_err() {
            warn!("looping task panicked");
        }
        Ok(log)
    }

    fn run_plan(&mut self, src: &mut dyn PlanSource) -> SequenceLog {
        let records = Mutex::new(Vec::new());
        let mut log = SequenceLog::default();
        let Some(mut current) = src.next() else {
            return log;
        };
        let mut iteration = 0;
        let mut prep = run_before(&current, 0, None, &records);
        let mut position = 0;
        let mut previous: Option<(Segment, SegmentLog)> = None;
        loop {
            let next = src.next();
            let (mut seg_log, next_prep, overran) = thread::scope(|s| {
                let worker = s.spawn(|| {
                    if let Some((seg, l)) = &previous {
                        run_after(seg, l, Some(position), &records);
                    }
                    next.as_ref().map(|n| run_before(n, position + 1, Some(position), &records))
                });
                let seg_log = self.play(&current, &prep, position, iteration);
                let overran = !worker.is_finished();
                (seg_log, worker.join().expect("callbacks catch panics"), overran)
            });
            if overran && self.clock.mode() == ClockMode::WallClock {
                debug!("callbacks overran segment {position}");
                seg_log.violations += 1;
                self.clock.resync();
            }
            log.segments.push(seg_log.clone());
            previous = Some((current.segment, seg_log));
            let Some(n) = next else { break };
            if self.abort.is_stopped() {
                break;
            }
            if n.starts_iteration {
                let from = log.segments.iter().rposition(|s| s.iteration != iteration).map_or(0, |i| i + 1);
                if src.should_stop(&log.segments[from..]) {
                    break;
                }
                iteration += 1;
            }
            current = n;
            prep = next_prep.expect("prepared with next");
            position += 1;
        }
        if let Some((seg, l)) = &previous {
            run_after(seg, l, None, &records);
        }
        log.iterations = iteration + 1;
        log.callbacks = records.into_inner();
        log
    }

    fn play(&mut self, p: &Planned, prep: &Preparation, position: usize, iteration: usize) -> SegmentLog {
        let seg = &p.segment;
        let frames = prep.duration_s.map(|d| self.clock.frames_for(d));
        let start_frame = self.clock.frame();
        let mut log = SegmentLog {
            name: seg.name.clone(),
            position,
            seg_idx: p.seg_idx,
            iteration,
            start_frame,
            end_frame: start_frame,
            start_us: self.clock.now_us(),
            end_us: 0,
            stimulus: prep.stimulus.clone(),
            marker_value: prep.marker_value,
            marker_us: None,
            marker_sent_us: None,
            marker_error: None,
            keys: Vec::new(),
            late_flips: 0,
            violations: 0,
        };
        let mut i = 0u64;
        loop {
            if frames.is_some_and(|n| i >= n) {
                break;
            }
            let mut respond = false;
            for key in self.keys.poll(self.clock.frame()) {
                let response = seg.is_response(&key);
                respond |= response;
                log.keys.push(KeyEvent { key, frame: self.clock.frame(), response });
            }
            if frames.is_none() && (respond || self.abort.is_stopped()) {
                break;
            }
            let flip = self.clock.flip();
            if i == 0 {
                log.start_us = flip.time_us;
                if let Some(v) = prep.marker_value {
                    log.marker_us = Some(flip.time_us);
                    self.send_marker(seg, v, &mut log);
                }
            }
            log.late_flips += flip.late as u32;
            let info = FrameInfo { frame: flip.frame, time_us: flip.time_us, segment_frame: i, position };
            for cb in &p.frame_hooks {
                cb(&info);
            }
            if let Some(h) = &seg.hooks {
                h.on_frame(&info);
            }
            i += 1;
        }
        log.end_frame = self.clock.frame();
        log.end_us = self.clock.now_us();
        log
    }

    fn send_marker(&self, seg: &Segment, value: i64, log: &mut SegmentLog) {
        let Some(sink) = &seg.marker_sink else {
            return;
        };
        match sink.lock().send(value) {
            Ok(rec) => log.marker_sent_us = Some(rec.sent_us),
            Err(e) => {
                warn!("marker {value} for segment {} failed: {e}", seg.name);
                log.marker_error = Some(e.to_string());
            }
        }
    }
}

/// True when no two neighbours are equal.
pub fn no_adjacent_repeats(idcs: &[usize]) -> bool {
    idcs.windows(2).all(|w| w[0] != w[1])
}

/// Counts segments per seg_idx, e.g. to compare multisets.
pub fn index_histogram(idcs: &[usize]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &i in idcs {
        *h.entry(i).or_insert(0) += 1;
    }
    h
}
