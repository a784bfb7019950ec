//! Reference implementations shared by the integration tests. Everything
//! here is written independently of the library code it checks.
#![allow(dead_code)]

pub mod clouds;
pub mod schedule;
pub mod shadow;
pub mod wire;

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cortexloop::acquisition::{record, run_synth, ClassSource, ReplayContents, RunOptions, RunReport, SynthConfig};
use cortexloop::epoching::{event_locked_source, sliding_source, EpochBatch, EpochSourceConfig, Retain, Stage};
use cortexloop::server::{serve, ServerHandle};
use cortexloop::{Client, RingStore, SampleData, StopSignal};
use ndarray::Array2;

pub const FS: f64 = 200.0;

pub fn start_server() -> ServerHandle {
    serve("127.0.0.1:0", Arc::new(RingStore::default())).unwrap()
}

/// Forty alternating open/close trials filling one minute.
pub fn minute_schedule() -> Vec<(i32, f64)> {
    (0..40).map(|i| (1 + (i % 2) as i32, 1.5)).collect()
}

/// Row-major samples widened to f64 without going through the library's
/// own conversion.
pub fn rows_f64(data: &SampleData) -> (usize, Vec<f64>) {
    match data {
        SampleData::Int16 { n_channels, values } => (*n_channels, values.iter().map(|&v| v as f64).collect()),
        SampleData::Int32 { n_channels, values } => (*n_channels, values.iter().map(|&v| v as f64).collect()),
        SampleData::Float32 { n_channels, values } => (*n_channels, values.iter().map(|&v| v as f64).collect()),
        SampleData::Float64 { n_channels, values } => (*n_channels, values.clone()),
    }
}

pub struct OfflineEpoch {
    pub span: Range<u64>,
    pub label: Option<i32>,
    pub data: Array2<f64>,
}

fn cut(c: usize, values: &[f64], span: &Range<u64>) -> Array2<f64> {
    let rows = (span.end - span.start) as usize;
    let flat = values[span.start as usize * c..span.end as usize * c].to_vec();
    Array2::from_shape_vec((rows, c), flat).unwrap()
}

/// Single pass over a recording: one epoch per matching marker whose span
/// lies inside the recording.
pub fn offline_event_epochs(rec: &ReplayContents, tmin: f64, tmax: f64, ids: &[i32]) -> Vec<OfflineEpoch> {
    let (c, values) = rows_f64(&rec.samples);
    let total = (values.len() / c) as i64;
    let fs = rec.header.sampling_rate_hz;
    let len = ((tmax - tmin) * fs).round() as i64;
    let mut out = Vec::new();
    for e in rec.events.iter().filter(|e| ids.contains(&e.value)) {
        let begin = e.sample as i64 + (tmin * fs).round() as i64;
        if begin < 0 || begin + len > total {
            continue;
        }
        let span = begin as u64..(begin + len) as u64;
        out.push(OfflineEpoch { data: cut(c, &values, &span), span, label: Some(e.value) });
    }
    out
}

/// Every window `[b, b + win)` with `b` on the hop grid, found by walking
/// the grid one step at a time.
pub fn offline_windows(rec: &ReplayContents, win: u64, hop: u64) -> Vec<OfflineEpoch> {
    let (c, values) = rows_f64(&rec.samples);
    let total = (values.len() / c) as u64;
    let mut out = Vec::new();
    let mut b = 0;
    while b + win <= total {
        let span = b..b + win;
        out.push(OfflineEpoch { data: cut(c, &values, &span), span, label: None });
        b += hop;
    }
    out
}

pub fn wait_for(stage: &Stage, n: u64, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while stage.stats().no_epochs < n {
        if Instant::now() > deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
    true
}

pub struct EquivalenceRun {
    pub report: RunReport,
    pub recording: ReplayContents,
    pub events: EpochBatch,
    pub windows: EpochBatch,
}

/// Streams the one-minute schedule through a live server while an
/// event-locked source, a sliding source and a recorder listen.
pub fn stream_minute(dir: &Path, speed: f64) -> EquivalenceRun {
    let server = start_server();
    let addr = server.local_addr();
    let cfg = SynthConfig::class_gated_demo(8, FS);
    Client::connect(addr).unwrap().put_header(&cfg.header()).unwrap();

    let events = event_locked_source(Client::connect(addr).unwrap(), EpochSourceConfig::event_locked(0.0, 1.0, [1, 2]))
        .unwrap();
    let windows = sliding_source(
        Client::connect(addr).unwrap(),
        EpochSourceConfig::sliding(0.0, 1.0, 0.1).with_retain(Retain::All { cap: 10_000 }),
    )
    .unwrap();
    events.start();
    windows.start();

    let stop = StopSignal::new();
    let path = dir.join("minute.clrp");
    let recorder = {
        let (stop, path) = (stop.clone(), path.clone());
        thread::spawn(move || record(&mut Client::connect(addr).unwrap(), &path, &stop).unwrap())
    };
    thread::sleep(Duration::from_millis(300));

    let mut writer = Client::connect(addr).unwrap();
    let opts = RunOptions { speed, ..Default::default() };
    let report = run_synth(&cfg, &mut writer, ClassSource::Schedule(minute_schedule()), &opts).unwrap();

    assert!(wait_for(&events, 40, Duration::from_secs(10)), "event-locked source stalled");
    assert!(wait_for(&windows, 591, Duration::from_secs(10)), "sliding source stalled");
    stop.stop();
    recorder.join().unwrap();
    events.stop();
    windows.stop();
    EquivalenceRun {
        report,
        recording: ReplayContents::load(&path).unwrap(),
        events: events.read_all_epochs().unwrap(),
        windows: windows.read_all_epochs().unwrap(),
    }
}
