//! End-to-end runs: the open/close closed-loop demo and the latency bench.
//!
//! System latency is the time from the acquisition side writing the packet
//! that carries the last sample an epoch needs to the moment its feedback is
//! written. It splits into processing (availability to decision) and output
//! (decision to feedback write); acquisition (sample due to packet written)
//! is reported alongside.
//! Output latency here is the time to hand the feedback to a log or marker
//! sink; there is no display refresh involved.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use ndarray::{Array2, Axis};
use parking_lot::Mutex;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{
    self, run_synth, AcquisitionError, ClassCue, ClassSource, ClassSpan, RunOptions, RunReport, SynthConfig,
};
use crate::client::{Client, ClientError, DEFAULT_RETRY_INTERVAL};
use crate::clock;
use crate::decode::{car_bandpower, kfold_accuracy, lda_fit, FilterBank, FilterBankSpec, LdaModel, ModelError};
use crate::epoching::{
    event_locked_source, map_stage, sliding_source, EpochError, EpochSourceConfig, Retain, Stage,
    DEFAULT_RETAIN_ALL_CAP,
};
use crate::markers::{MarkerError, MarkerSink};
use crate::ring::RingStore;
use crate::scheduler::{
    FrameClock, FrameInfo, KeyInput, LoopingSequence, Preparation, Runner, SchedulerError, Segment, SegmentAttr,
    SegmentHooks, SegmentLog, Sequence, SequenceLog, TaskLoopingSequence,
};
use crate::server::serve;
use crate::signal::StopSignal;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run was interrupted")]
    Aborted,
    #[error("{0}")]
    Stage(String),
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error("acquisition: {0}")]
    Acquisition(#[from] AcquisitionError),
    #[error("epoching: {0}")]
    Epoch(#[from] EpochError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("marker: {0}")]
    Marker(#[from] MarkerError),
    #[error("scheduler: {0}")]
    Scheduler(#[from] SchedulerError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// --- run directories -------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ManifestFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub created: String,
    pub config: serde_json::Value,
    pub files: Vec<ManifestFile>,
}

/// A timestamped directory holding one run's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
    created: String,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>, prefix: &str) -> io::Result<Self> {
        let now = chrono::Local::now();
        let stamp = now.format("%Y%m%d-%H%M%S-%3f").to_string();
        fs::create_dir_all(root.as_ref())?;
        let mut n = 0;
        loop {
            let name = if n == 0 { format!("{prefix}-{stamp}") } else { format!("{prefix}-{stamp}-{n}") };
            let path = root.as_ref().join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, created: now.to_rfc3339() }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `manifest.json` listing every file in the directory with its
    /// SHA-256.
    pub fn finish(&self, config: &impl Serialize) -> Result<Manifest, HarnessError> {
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        let files = names
            .into_iter()
            .map(|name| {
                let bytes = fs::read(self.path.join(&name))?;
                Ok(ManifestFile {
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    name,
                })
            })
            .collect::<io::Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "cortexloop",
            version: env!("CARGO_PKG_VERSION"),
            created: self.created.clone(),
            config: serde_json::to_value(config)?,
            files,
        };
        fs::write(self.file("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// --- latency ---------------------------------------------------------------

/// One decision and its feedback.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub index: usize,
    /// Sample span of the epoch the decision was based on.
    pub epoch_begin: u64,
    pub epoch_end: u64,
    pub epoch_emitted_us: u64,
    pub decision_us: u64,
    pub feedback_us: u64,
    pub predicted: Option<i32>,
    /// Class of the epoch span in the generator transcript, when the span
    /// lies inside a single class.
    pub truth: Option<i32>,
    /// When the epoch's last sample was due at the source.
    pub due_us: u64,
    /// When the packet carrying that sample was written to the buffer.
    pub avail_us: u64,
}

impl DecisionRecord {
    fn new(index: usize, span: &Range<u64>, emitted_us: u64, decision_us: u64, predicted: Option<i32>) -> Self {
        Self {
            index,
            epoch_begin: span.start,
            epoch_end: span.end,
            epoch_emitted_us: emitted_us,
            decision_us,
            feedback_us: decision_us,
            predicted,
            truth: None,
            due_us: 0,
            avail_us: 0,
        }
    }

    pub fn system_us(&self) -> i64 {
        self.feedback_us as i64 - self.avail_us as i64
    }
}

/// Fills `due_us`, `avail_us` and `truth` from an acquisition transcript.
pub fn annotate(records: &mut [DecisionRecord], report: &RunReport) {
    for r in records {
        if r.epoch_end == 0 {
            continue;
        }
        let last = r.epoch_end - 1;
        let i = report.packets.partition_point(|p| p.first_sample + p.n_samples as u64 <= last);
        if let Some(p) = report.packets.get(i).filter(|p| p.first_sample <= last) {
            r.due_us = p.due_us;
            r.avail_us = p.sent_us;
        }
        r.truth = span_class(&report.class_spans, r.epoch_begin..r.epoch_end);
    }
}

/// The class of a sample span if one transcript span covers it entirely.
pub fn span_class(spans: &[ClassSpan], range: Range<u64>) -> Option<i32> {
    let i = spans.partition_point(|s| s.end <= range.start);
    spans
        .get(i)
        .filter(|s| s.begin <= range.start && s.end >= range.end)
        .map(|s| s.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            sd: var.sqrt(),
            median: percentile(&sorted, 50.0),
            p95: percentile(&sorted, 95.0),
            min: sorted[0],
            max: sorted[n - 1],
        }
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub const OUTPUT_LATENCY_NOTE: &str =
    "output latency is the time to write feedback to a log or marker sink; no display refresh is included";

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub decision_rate_hz: Option<f64>,
    pub records: Vec<DecisionRecord>,
    /// All durations in milliseconds.
    pub system: Stats,
    pub acquisition: Stats,
    pub processing: Stats,
    pub output: Stats,
    pub interval: Stats,
    /// Decisions whose system latency exceeded the decision interval.
    pub overlaps: usize,
    /// Decisions taken before their epoch's data was available.
    pub consistency_violations: usize,
    pub note: &'static str,
}

impl LatencyReport {
    pub fn build(records: Vec<DecisionRecord>, decision_rate_hz: Option<f64>) -> Self {
        let ms = |f: &dyn Fn(&DecisionRecord) -> i64| -> Vec<f64> {
            records.iter().map(|r| f(r) as f64 / 1e3).collect()
        };
        let system = ms(&|r| r.system_us());
        let intervals: Vec<f64> = records
            .windows(2)
            .map(|w| (w[1].feedback_us as f64 - w[0].feedback_us as f64) / 1e3)
            .collect();
        let overlaps = match decision_rate_hz {
            Some(rate) => {
                let budget = 1e3 / rate;
                system.iter().filter(|&&l| l > budget).count()
            }
            None => 0,
        };
        if overlaps > 0 {
            warn!("{overlaps} decisions took longer than the decision interval; decisions overlap");
        }
        let consistency_violations = records
            .iter()
            .filter(|r| r.avail_us > r.decision_us || r.epoch_emitted_us > r.decision_us)
            .count();
        Self {
            decision_rate_hz,
            system: Stats::of(&system),
            acquisition: Stats::of(&ms(&|r| r.avail_us as i64 - r.due_us as i64)),
            processing: Stats::of(&ms(&|r| r.decision_us as i64 - r.avail_us as i64)),
            output: Stats::of(&ms(&|r| r.feedback_us as i64 - r.decision_us as i64)),
            interval: Stats::of(&intervals),
            overlaps,
            consistency_violations,
            records,
            note: OUTPUT_LATENCY_NOTE,
        }
    }

    pub fn overlap_warning(&self) -> bool {
        self.overlaps > 0
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let rate = self.decision_rate_hz.map_or("-".to_string(), |r| format!("{r} Hz"));
        s.push_str(&format!("decisions: {}   decision rate: {rate}\n", self.records.len()));
        s.push_str(&format!(
            "{:<14}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "ms", "mean", "sd", "median", "p95", "max"
        ));
        for (name, st) in [
            ("system", &self.system),
            ("acquisition", &self.acquisition),
            ("processing", &self.processing),
            ("output", &self.output),
            ("interval", &self.interval),
        ] {
            s.push_str(&format!(
                "{name:<14}{:>10.2}{:>10.2}{:>10.2}{:>10.2}{:>10.2}\n",
                st.mean, st.sd, st.median, st.p95, st.max
            ));
        }
        s.push_str(&format!(
            "overlapping decisions: {}   consistency violations: {}\n",
            self.overlaps, self.consistency_violations
        ));
        s.push_str(&format!("note: {}\n", self.note));
        s
    }

    /// One line per decision, then one summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": {
                "decision_rate_hz": self.decision_rate_hz,
                "system_ms": self.system,
                "acquisition_ms": self.acquisition,
                "processing_ms": self.processing,
                "output_ms": self.output,
                "interval_ms": self.interval,
                "overlaps": self.overlaps,
                "consistency_violations": self.consistency_violations,
                "note": self.note,
            }
        });
        serde_json::to_writer(&mut out, &summary)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

// --- latency bench ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BenchMode {
    /// Sliding windows with a hop of one decision interval.
    Sliding,
    /// Epochs `[0, epoch_s)` after go cues, one cue every `epoch_s + 1` s.
    EventLocked { epoch_s: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub decision_hz: f64,
    pub processing_cost_ms: f64,
    pub duration_s: f64,
    pub n_channels: usize,
    pub fs: f64,
    pub window_s: f64,
    pub mode: BenchMode,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            decision_hz: 10.0,
            processing_cost_ms: 5.0,
            duration_s: 10.0,
            n_channels: 8,
            fs: 200.0,
            window_s: 1.0,
            mode: BenchMode::Sliding,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutcome {
    pub report: LatencyReport,
    /// Go cue to feedback, event-locked mode only (ms).
    pub cue_to_feedback: Option<Stats>,
}

fn stub_function(cost: Duration) -> impl Fn(&Array2<f64>) -> Result<Array2<f64>, String> + Send + 'static {
    move |x| {
        let until = Instant::now() + cost;
        clock::sleep_until(until);
        Ok(Array2::from_elem((1, 1), x.mean().unwrap_or(0.0)))
    }
}

/// Streams synthetic data through an in-process buffer, epochs it, runs a
/// stub decision of the configured cost and writes feedback to a loopback
/// sink as soon as each decision is made.
pub fn bench_latency(cfg: &BenchConfig, stop: &StopSignal) -> Result<BenchOutcome, HarnessError> {
    if !(cfg.decision_hz > 0.0 && cfg.processing_cost_ms >= 0.0 && cfg.duration_s > 0.0) {
        return Err(HarnessError::Config("rate, cost and duration must be positive".into()));
    }
    let server = serve("127.0.0.1:0", Arc::new(RingStore::default()))?;
    let addr = server.local_addr();
    let hop_s = 1.0 / cfg.decision_hz;
    let mut synth = SynthConfig::new(cfg.n_channels, cfg.fs);
    synth.seed = cfg.seed;
    synth.packet_samples = synth.packet_samples.min(((hop_s * cfg.fs).round() as usize).max(1));
    let (source_cfg, schedule) = match cfg.mode {
        BenchMode::Sliding => (
            EpochSourceConfig::sliding(0.0, cfg.window_s, hop_s),
            vec![(0, cfg.duration_s)],
        ),
        BenchMode::EventLocked { epoch_s } => {
            let trial = epoch_s + 1.0;
            let n = ((cfg.duration_s - 0.5) / trial).floor().max(1.0) as usize;
            let mut s = vec![(0, 0.5)];
            s.extend((0..n).map(|_| (1, trial)));
            (EpochSourceConfig::event_locked(0.0, epoch_s, [1]), s)
        }
    };
    let stage = match cfg.mode {
        BenchMode::Sliding => sliding_source(Client::connect(addr)?, source_cfg)?,
        BenchMode::EventLocked { .. } => event_locked_source(Client::connect(addr)?, source_cfg)?,
    };
    let processing = map_stage(&stage, stub_function(Duration::from_secs_f64(cfg.processing_cost_ms / 1e3)));
    stage.start();
    processing.start();

    let synth_stop = StopSignal::new();
    let synth_thread = {
        let opts = RunOptions { speed: 1.0, stop: synth_stop.clone() };
        let mut client = Client::connect(addr)?;
        thread::Builder::new()
            .name("bench-synth".into())
            .spawn(move || run_synth(&synth, &mut client, ClassSource::Schedule(schedule), &opts))?
    };

    let (mut sink, _) = MarkerSink::loopback();
    sink.open()?;
    let mut records = Vec::new();
    while !synth_thread.is_finished() && !stop.is_stopped() {
        if !processing.wait_new_epoch(Duration::from_millis(100)) {
            continue;
        }
        let Ok(epoch) = processing.read_epoch() else { break };
        let decision_us = clock::now_us();
        let predicted = if epoch.data[[0, 0]] > 0.0 { 1 } else { 2 };
        let mut rec = DecisionRecord::new(records.len(), &epoch.span, epoch.emitted_us, decision_us, Some(predicted));
        rec.feedback_us = sink.send(predicted as i64)?.sent_us;
        records.push(rec);
    }
    synth_stop.stop();
    let run = synth_thread.join().map_err(|_| HarnessError::Stage("synth thread panicked".into()))??;
    stage.stop();
    processing.stop();
    server.shutdown();
    if stop.is_stopped() {
        info!("bench interrupted after {} decisions", records.len());
    }

    annotate(&mut records, &run);
    let cue_to_feedback = match cfg.mode {
        BenchMode::EventLocked { .. } => {
            let cue_ms: Vec<f64> = records
                .iter()
                .map(|r| {
                    let cue_us = run.started_us as f64 + r.epoch_begin as f64 / cfg.fs * 1e6;
                    (r.feedback_us as f64 - cue_us) / 1e3
                })
                .collect();
            Some(Stats::of(&cue_ms))
        }
        BenchMode::Sliding => None,
    };
    let rate = matches!(cfg.mode, BenchMode::Sliding).then_some(cfg.decision_hz);
    Ok(BenchOutcome { report: LatencyReport::build(records, rate), cue_to_feedback })
}

// --- open/close demo -------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DemoConfig {
    /// Existing buffer to use; `None` starts one in-process.
    pub server: Option<SocketAddr>,
    /// Trials per training block, alternating open (1) and close (2).
    pub trials: usize,
    pub blocks: usize,
    pub hop_s: f64,
    pub n_channels: usize,
    pub fs: f64,
    pub frame_rate_hz: f64,
    /// Runs the whole session this many times faster than real time.
    pub time_scale: f64,
    pub test_duration_s: f64,
    /// How long the simulated subject holds each class during testing.
    pub test_class_s: f64,
    pub seed: u64,
    pub out_root: PathBuf,
    /// Also tap the stream into `stream.clrp`.
    pub record_stream: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            server: None,
            trials: 40,
            blocks: 2,
            hop_s: 0.1,
            n_channels: 8,
            fs: 200.0,
            frame_rate_hz: 60.0,
            time_scale: 1.0,
            test_duration_s: 30.0,
            test_class_s: 3.0,
            seed: 1,
            out_root: PathBuf::from("runs"),
            record_stream: false,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.trials == 0 || self.blocks == 0 {
            return bad("degenerate design: trials and blocks must be positive");
        }
        if self.trials % 2 != 0 || self.trials < 4 {
            return bad("trials must be an even number of at least 4 (open/close pairs)");
        }
        if !(self.hop_s > 0.0 && self.time_scale > 0.0 && self.test_duration_s > 0.0 && self.test_class_s > 0.0) {
            return bad("hop, time scale and test durations must be positive");
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad("frame rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoOutcome {
    pub run_dir: PathBuf,
    pub n_train_epochs: usize,
    pub cv_accuracy: f64,
    /// Closed-loop feedback decisions scored against the transcript.
    pub feedback_accuracy: f64,
    pub n_scored: usize,
    /// Every test window scored against the transcript.
    pub window_accuracy: f64,
    pub n_windows_scored: usize,
    pub latency: LatencyReport,
    pub timing_violations: u32,
}

struct CueHook {
    cue: ClassCue,
    label: i32,
}

impl SegmentHooks for CueHook {
    fn on_frame(&self, frame: &FrameInfo) {
        if frame.segment_frame == 0 {
            self.cue.set(self.label);
        }
    }
}

struct Pending {
    position: usize,
    record: DecisionRecord,
}

/// Shows the decision for the newest window. When no window arrived since
/// the previous segment the previous feedback stays up and no marker is
/// sent.
struct FeedbackHooks {
    stage: Stage,
    model: Arc<LdaModel>,
    wait: Duration,
    last_stimulus: Mutex<Option<String>>,
    pending: Mutex<Vec<Pending>>,
    done: Mutex<Vec<DecisionRecord>>,
}

impl SegmentHooks for FeedbackHooks {
    fn before(&self, prep: &mut Preparation) {
        prep.marker_value = None;
        let mut last = self.last_stimulus.lock();
        prep.stimulus = last.clone();
        if !self.stage.wait_new_epoch(self.wait) {
            return;
        }
        let Ok(epoch) = self.stage.read_epoch() else { return };
        let decision_us = clock::now_us();
        let Ok(predicted) = self.model.predict(epoch.data.row(0)) else { return };
        prep.marker_value = Some(predicted as i64);
        prep.stimulus = Some(if predicted == 1 { "open" } else { "close" }.into());
        *last = prep.stimulus.clone();
        let index = self.done.lock().len() + self.pending.lock().len();
        self.pending.lock().push(Pending {
            position: prep.position,
            record: DecisionRecord::new(index, &epoch.span, epoch.emitted_us, decision_us, Some(predicted)),
        });
    }

    fn after(&self, log: &SegmentLog) {
        let mut pending = self.pending.lock();
        if let Some(i) = pending.iter().position(|p| p.position == log.position) {
            let mut p = pending.remove(i);
            p.record.feedback_us = log.marker_sent_us.unwrap_or(log.start_us);
            self.done.lock().push(p.record);
        }
    }
}

fn feature_stage(upstream: &Stage, bank: Arc<FilterBank>) -> Stage {
    map_stage(upstream, move |x| Ok(car_bandpower(&bank, x).insert_axis(Axis(0))))
}

fn wait_for_epochs(stage: &Stage, expected: u64, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        let s = stage.stats();
        if s.no_epochs + s.dropped >= expected {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// The cued open/close session: connect, two training blocks with model
/// fitting between them, then asynchronous feedback on sliding windows.
pub fn demo_openclose(cfg: &DemoConfig, abort: &StopSignal) -> Result<DemoOutcome, HarnessError> {
    cfg.validate()?;
    let run = RunDir::create(&cfg.out_root, "openclose")?;
    info!("writing run artifacts to {}", run.path().display());
    let local = match cfg.server {
        Some(_) => None,
        None => Some(serve("127.0.0.1:0", Arc::new(RingStore::default()))?),
    };
    let addr = cfg.server.unwrap_or_else(|| local.as_ref().unwrap().local_addr());
    let scaled = |s: f64| Duration::from_secs_f64(s / cfg.time_scale);

    let mut runner = Runner::new(FrameClock::wall_clock(cfg.frame_rate_hz).with_speed(cfg.time_scale));
    runner.abort = abort.clone();
    let cue = ClassCue::new(0);
    let cue_hook = |label| -> Arc<dyn SegmentHooks> { Arc::new(CueHook { cue: cue.clone(), label }) };
    let wait = Segment::new("wait", Some(1.0)).with_stimulus("Wait a moment ...").with_hooks(cue_hook(0));
    let mut training_log = SequenceLog::default();

    // Connect while showing the wait screen.
    let slot: Arc<Mutex<Option<Result<(Client, u32), ClientError>>>> = Arc::default();
    {
        let (slot, abort) = (Arc::clone(&slot), abort.clone());
        let mut connect = TaskLoopingSequence::new(
            move || *slot.lock() = Some(Client::connect_with_retry(addr, DEFAULT_RETRY_INTERVAL, &abort)),
            Sequence::new([wait.clone()]),
        );
        training_log.extend(runner.run_task_looping(&mut connect)?);
    }
    let (marker_client, attempts) = slot.lock().take().expect("task finished")?;
    info!("connected to {addr} after {attempts} attempt(s)");

    let recorder = if cfg.record_stream {
        let stop = StopSignal::new();
        let mut client = Client::connect(addr)?;
        let path = run.file("stream.clrp");
        let s = stop.clone();
        Some((stop, thread::spawn(move || acquisition::record(&mut client, path, &s))))
    } else {
        None
    };

    let synth_stop = StopSignal::new();
    let synth_thread = {
        let mut synth = SynthConfig::class_gated_demo(cfg.n_channels, cfg.fs);
        synth.seed = cfg.seed;
        let opts = RunOptions { speed: cfg.time_scale, stop: synth_stop.clone() };
        let mut client = Client::connect(addr)?;
        let cue = cue.clone();
        thread::Builder::new()
            .name("synth".into())
            .spawn(move || run_synth(&synth, &mut client, ClassSource::Cue(cue), &opts))?
    };
    let shutdown = |stages: &[&Stage]| {
        for s in stages {
            s.stop();
        }
    };

    // Training.
    let bank = Arc::new(FilterBank::design(cfg.fs, FilterBankSpec::default())?);
    let epoching = event_locked_source(Client::connect(addr)?, EpochSourceConfig::event_locked(0.0, 1.0, [1, 2]))?;
    let processing = feature_stage(&epoching, Arc::clone(&bank));
    epoching.start();
    processing.start();

    let sink = MarkerSink::buffer_inject(marker_client).shared();
    sink.lock().open()?;
    let task = Segment::new("task", Some(2.0)).with_stimulus("Open/close your hand").with_hooks(cue_hook(0));
    let opened = Segment::new("opened", Some(1.0)).with_stimulus("Open").with_marker(1).with_hooks(cue_hook(1));
    let closed = Segment::new("closed", Some(1.0)).with_stimulus("Close").with_marker(2).with_hooks(cue_hook(2));
    let mut trials = Sequence::repeated([opened, closed], cfg.trials / 2)
        .shuffle_on_call(true)
        .with_seed(cfg.seed);
    trials.set_segment_attr(&SegmentAttr::MarkerSink(Some(Arc::clone(&sink))));

    let model_slot: Arc<Mutex<Option<Result<(LdaModel, usize), HarnessError>>>> = Arc::default();
    for block in 0..cfg.blocks {
        training_log.extend(SequenceLog { segments: vec![runner.run_segment(&task)], ..Default::default() });
        training_log.extend(runner.run_sequence(&mut trials));
        if abort.is_stopped() {
            shutdown(&[&epoching, &processing]);
            synth_stop.stop();
            return Err(HarnessError::Aborted);
        }
        let expected = sink.lock().records().len() as u64;
        let (slot, stage, source) = (Arc::clone(&model_slot), processing.clone(), epoching.clone());
        let timeout = scaled(5.0);
        let mut fit = TaskLoopingSequence::new(
            move || {
                let ok = wait_for_epochs(&stage, expected.saturating_sub(source.stats().dropped), timeout);
                if !ok {
                    warn!("training epochs incomplete after waiting");
                }
                let result = (|| {
                    let batch = stage.read_all_epochs()?;
                    let x = batch.features()?;
                    let y: Vec<i32> = batch.labels().into_iter().map(|l| l.unwrap_or(0)).collect();
                    Ok((lda_fit(&x, &y, None)?, y.len()))
                })();
                *slot.lock() = Some(result);
            },
            Sequence::new([wait.clone()]),
        );
        training_log.extend(runner.run_task_looping(&mut fit)?);
        if let Some(Ok((_, n))) = &*model_slot.lock() {
            info!("block {}: model fitted on {n} epochs", block + 1);
        }
    }
    let (model, n_train_epochs) = model_slot.lock().take().expect("fit ran")?;
    let train = processing.save_epochs(run.file("train_features.clep"))?;
    epoching.save_epochs(run.file("train.clep"))?;
    let y: Vec<i32> = train.labels().into_iter().map(|l| l.unwrap_or(0)).collect();
    let cv_accuracy = kfold_accuracy(&train.features()?, &y, 5.min(y.len()))?;
    info!("training: {n_train_epochs} epochs, 5-fold accuracy {:.1}%", cv_accuracy * 100.0);
    model.save(run.file("model.clmd"))?;
    shutdown(&[&epoching, &processing]);

    // Asynchronous use.
    let windows = sliding_source(
        Client::connect(addr)?,
        EpochSourceConfig::sliding(0.0, 1.0, cfg.hop_s).with_retain(Retain::All { cap: DEFAULT_RETAIN_ALL_CAP }),
    )?;
    let test_features = feature_stage(&windows, Arc::clone(&bank));
    windows.start();
    test_features.start();
    let model = Arc::new(model);
    let hooks = Arc::new(FeedbackHooks {
        stage: test_features.clone(),
        model: Arc::clone(&model),
        wait: Duration::ZERO,
        last_stimulus: Mutex::new(None),
        pending: Mutex::new(Vec::new()),
        done: Mutex::new(Vec::new()),
    });
    if !test_features.wait_new_epoch(scaled(5.0)) {
        warn!("no sliding window arrived before feedback started");
    }
    let frames_per_class = (cfg.test_class_s * cfg.frame_rate_hz).round().max(1.0) as u64;
    let f0 = runner.clock.frame();
    let subject = {
        let cue = cue.clone();
        Arc::new(move |f: &FrameInfo| {
            let phase = (f.frame - f0) / frames_per_class;
            cue.set(if phase % 2 == 0 { 1 } else { 2 });
        })
    };
    let feedback_seg = Segment::new("feedback", Some(cfg.hop_s)).with_hooks(hooks.clone()).with_sink(Arc::clone(&sink));
    let mut feedback = LoopingSequence::new(Sequence::new([feedback_seg]).with_frame_callback(subject), abort.clone())
        .with_stop_keys(["return"]);
    let end_frame = f0 + (cfg.test_duration_s * cfg.frame_rate_hz).round() as u64;
    runner.keys = KeyInput::scheduled([(end_frame, "return")]);
    let feedback_log = runner.run_looping(&mut feedback);
    cue.set(0);
    thread::sleep(scaled(1.2));

    shutdown(&[&windows, &test_features]);
    synth_stop.stop();
    let transcript = synth_thread.join().map_err(|_| HarnessError::Stage("synth thread panicked".into()))??;
    if let Some((stop, handle)) = recorder {
        stop.stop();
        handle.join().map_err(|_| HarnessError::Stage("recorder panicked".into()))??;
    }
    sink.lock().close();
    if let Some(server) = local {
        server.shutdown();
    }
    if abort.is_stopped() {
        return Err(HarnessError::Aborted);
    }

    let test_batch = test_features.save_epochs(run.file("test_features.clep"))?;
    windows.save_epochs(run.file("test.clep"))?;
    let mut scored_windows = (0usize, 0usize);
    for e in &test_batch.epochs {
        if let Some(truth @ (1 | 2)) = span_class(&transcript.class_spans, e.span.clone()) {
            scored_windows.0 += 1;
            scored_windows.1 += (model.predict(e.data.row(0))? == truth) as usize;
        }
    }
    let mut records = std::mem::take(&mut *hooks.done.lock());
    records.sort_by_key(|r| r.index);
    annotate(&mut records, &transcript);
    let scored = records.iter().filter(|r| matches!(r.truth, Some(1 | 2))).count();
    let correct = records
        .iter()
        .filter(|r| matches!(r.truth, Some(1 | 2)) && r.predicted == r.truth)
        .count();
    let ratio = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let latency = LatencyReport::build(records, Some(1.0 / cfg.hop_s));

    training_log.write_jsonl(fs::File::create(run.file("training_log.jsonl"))?)?;
    feedback_log.write_jsonl(fs::File::create(run.file("feedback_log.jsonl"))?)?;
    latency.write_jsonl(&run.file("latency.jsonl"))?;
    fs::write(run.file("latency.txt"), latency.table())?;
    write_jsonl(&run.file("transcript.jsonl"), &transcript.class_spans)?;

    let outcome = DemoOutcome {
        run_dir: run.path().to_path_buf(),
        n_train_epochs,
        cv_accuracy,
        feedback_accuracy: ratio(correct, scored),
        n_scored: scored,
        window_accuracy: ratio(scored_windows.1, scored_windows.0),
        n_windows_scored: scored_windows.0,
        timing_violations: training_log.violations() + feedback_log.violations(),
        latency,
    };
    fs::write(
        run.file("summary.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "n_train_epochs": outcome.n_train_epochs,
            "cv_accuracy": outcome.cv_accuracy,
            "feedback_accuracy": outcome.feedback_accuracy,
            "n_scored": outcome.n_scored,
            "window_accuracy": outcome.window_accuracy,
            "n_windows_scored": outcome.n_windows_scored,
            "timing_violations": outcome.timing_violations,
        }))?,
    )?;
    run.finish(cfg)?;
    info!(
        "feedback accuracy {:.1}% over {} decisions",
        outcome.feedback_accuracy * 100.0,
        outcome.n_scored
    );
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::PacketRecord;
    use crate::stream::{DataKind, StreamHeader};

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        let s = Stats::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert!((s.sd - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn span_class_requires_full_cover() {
        let spans = [
            ClassSpan { begin: 0, end: 100, label: 1 },
            ClassSpan { begin: 100, end: 300, label: 2 },
        ];
        assert_eq!(span_class(&spans, 0..100), Some(1));
        assert_eq!(span_class(&spans, 50..150), None);
        assert_eq!(span_class(&spans, 100..300), Some(2));
        assert_eq!(span_class(&spans, 250..350), None);
    }

    #[test]
    fn latency_decomposition_and_overlap() {
        let mut report = RunReport {
            header: StreamHeader::new(1, 200.0, DataKind::Float32),
            packets: Vec::new(),
            events: Vec::new(),
            class_spans: Vec::new(),
            total_samples: 0,
            started_us: 0,
        };
        for k in 0..3u64 {
            report.packets.push(PacketRecord {
                index: k,
                first_sample: k * 20,
                n_samples: 20,
                due_us: 100_000 * (k + 1),
                sent_us: 100_000 * (k + 1) + 1_000,
                acked_us: 100_000 * (k + 1) + 1_200,
            });
        }
        let mut recs = vec![
            DecisionRecord::new(0, &(0..20), 0, 105_000, Some(1)),
            DecisionRecord::new(1, &(20..40), 0, 260_000, Some(1)),
        ];
        recs[0].feedback_us = 106_000;
        recs[1].feedback_us = 350_000;
        annotate(&mut recs, &report);
        assert_eq!((recs[0].due_us, recs[0].avail_us), (100_000, 101_000));
        assert_eq!(recs[1].avail_us, 201_000);
        let r = LatencyReport::build(recs, Some(10.0));
        assert_eq!(r.system.min, 5.0);
        assert_eq!(r.system.max, 149.0);
        assert_eq!(r.acquisition.mean, 1.0);
        assert_eq!(r.overlaps, 1);
        assert_eq!(r.consistency_violations, 0);
        assert_eq!(r.interval.mean, 244.0);
        assert!(r.table().contains("overlapping decisions: 1"));
    }

    #[test]
    fn run_dir_manifest() {
        let root = tempfile::tempdir().unwrap();
        let run = RunDir::create(root.path(), "t").unwrap();
        fs::write(run.file("a.txt"), b"abc").unwrap();
        let m = run.finish(&serde_json::json!({"k": 1})).unwrap();
        assert_eq!(m.files.len(), 1);
        assert_eq!(
            m.files[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(run.file("manifest.json").exists());
        let again = RunDir::create(root.path(), "t").unwrap();
        assert_ne!(again.path(), run.path());
    }

    #[test]
    fn demo_rejects_zero_trials() {
        let cfg = DemoConfig { trials: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        assert!(DemoConfig { trials: 5, ..Default::default() }.validate().is_err());
        assert!(DemoConfig::default().validate().is_ok());
    }
}
