use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cortexloop::acquisition::{self, ClassSource, RunOptions, SynthConfig};
use cortexloop::harness::{self, BenchConfig, BenchMode, DemoConfig};
use cortexloop::ring::{DEFAULT_CAPACITY_EVENTS, DEFAULT_CAPACITY_SAMPLES};
use cortexloop::server::{serve, DEFAULT_PORT};
use cortexloop::{Client, DataKind, RingStore, StopSignal};

#[derive(Parser)]
#[command(name = "cortexloop", version, about = "Real-time neural data streaming, epoching and closed-loop experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Endpoint {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
}

impl Endpoint {
    fn addr(&self) -> Result<SocketAddr> {
        (self.host.as_str(), self.port)
            .to_socket_addrs()?
            .next()
            .with_context(|| format!("cannot resolve {}", self.host))
    }

    fn connect(&self, stop: &StopSignal) -> Result<Client> {
        let (client, attempts) =
            Client::connect_with_retry(self.addr()?, cortexloop::client::DEFAULT_RETRY_INTERVAL, stop)?;
        info!("connected to {}:{} after {attempts} attempt(s)", self.host, self.port);
        Ok(client)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Int16,
    Int32,
    Float32,
    Float64,
}

impl From<Kind> for DataKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Int16 => DataKind::Int16,
            Kind::Int32 => DataKind::Int32,
            Kind::Float32 => DataKind::Float32,
            Kind::Float64 => DataKind::Float64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sliding,
    EventLocked,
}

#[derive(Subcommand)]
enum Command {
    /// Run a buffer server until interrupted.
    Serve {
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Samples retained per stream.
        #[arg(long, default_value_t = DEFAULT_CAPACITY_SAMPLES)]
        capacity: usize,
        #[arg(long, default_value_t = DEFAULT_CAPACITY_EVENTS)]
        event_capacity: usize,
    },
    /// Stream synthetic data into a buffer.
    Synth {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        #[arg(long)]
        packet_samples: Option<usize>,
        /// Comma-separated `label:seconds` entries; label 0 is rest and
        /// pushes no marker.
        #[arg(long, default_value = "0:60")]
        schedule: String,
        /// Repeat the schedule this many times.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Add the class-gated 12 Hz rhythm on channels 0 and 1.
        #[arg(long)]
        class_gated: bool,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        delay_ms: f64,
        #[arg(long, value_enum, default_value = "float32")]
        data_kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Push a replay file into a buffer, paced by its timestamps.
    Replay {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        file: PathBuf,
        /// Time compression; `inf` pushes as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Tap a live stream into a replay file until interrupted.
    Record {
        #[command(flatten)]
        endpoint: Endpoint,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Cued open/close training followed by asynchronous feedback.
    DemoOpenclose {
        /// Use an existing buffer instead of an in-process one.
        #[arg(long)]
        host: Option<String>,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = 40)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 0.1)]
        hop: f64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long, default_value_t = 30.0)]
        test_duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Also record the stream to `stream.clrp` in the run directory.
        #[arg(long)]
        record: bool,
    },
    /// Measure system latency and decision timing on loopback.
    BenchLatency {
        #[arg(long, default_value_t = 10.0)]
        decision_hz: f64,
        #[arg(long, default_value_t = 5.0)]
        processing_cost_ms: f64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, value_enum, default_value = "sliding")]
        mode: Mode,
        /// Epoch length in event-locked mode.
        #[arg(long, default_value_t = 2.0)]
        epoch: f64,
        /// Write per-decision records here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
}

fn parse_schedule(s: &str, repeat: usize) -> Result<Vec<(i32, f64)>> {
    let mut one = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, secs) = part
            .split_once(':')
            .with_context(|| format!("schedule entry {part:?} is not label:seconds"))?;
        let label: i32 = label.trim().parse().with_context(|| format!("bad label in {part:?}"))?;
        let secs: f64 = secs.trim().parse().with_context(|| format!("bad duration in {part:?}"))?;
        if !(secs >= 0.0) {
            bail!("negative duration in {part:?}");
        }
        one.push((label, secs));
    }
    if one.is_empty() {
        bail!("empty schedule");
    }
    Ok(one.iter().copied().cycle().take(one.len() * repeat).collect())
}

fn run(cmd: Command, stop: StopSignal) -> Result<()> {
    match cmd {
        Command::Serve { bind, port, capacity, event_capacity } => {
            let server = serve((bind.as_str(), port), Arc::new(RingStore::new(capacity, event_capacity)))?;
            println!("buffer listening on {}", server.local_addr());
            while !stop.wait_timeout(Duration::from_secs(3600)) {}
            info!("shutting down server");
            server.shutdown();
        }
        Command::Synth {
            endpoint,
            channels,
            rate,
            packet_samples,
            schedule,
            repeat,
            class_gated,
            speed,
            jitter_ms,
            delay_ms,
            data_kind,
            seed,
        } => {
            let mut cfg = if class_gated {
                SynthConfig::class_gated_demo(channels, rate)
            } else {
                SynthConfig::new(channels, rate)
            };
            if let Some(n) = packet_samples {
                cfg.packet_samples = n;
            }
            cfg.jitter_ms = jitter_ms;
            cfg.transmission_delay_ms = delay_ms;
            cfg.data_kind = data_kind.into();
            cfg.seed = seed;
            cfg.validate()?;
            let schedule = parse_schedule(&schedule, repeat)?;
            let mut client = endpoint.connect(&stop)?;
            let report = acquisition::run_synth(
                &cfg,
                &mut client,
                ClassSource::Schedule(schedule),
                &RunOptions { speed, stop },
            )?;
            println!(
                "sent {} samples in {} packets and {} events",
                report.total_samples,
                report.packets.len(),
                report.events.len()
            );
        }
        Command::Replay { endpoint, file, speed } => {
            let mut client = endpoint.connect(&stop)?;
            let report = acquisition::run_replay(&file, &mut client, &RunOptions { speed, stop })?;
            println!("replayed {} samples and {} events", report.total_samples, report.events.len());
        }
        Command::Record { endpoint, out, duration } => {
            let mut client = endpoint.connect(&stop)?;
            if let Some(secs) = duration {
                let stop = stop.clone();
                std::thread::spawn(move || {
                    stop.wait_timeout(Duration::from_secs_f64(secs));
                    stop.stop();
                });
            }
            let (samples, events) = acquisition::record(&mut client, &out, &stop)?;
            println!("recorded {samples} samples and {events} events to {}", out.display());
        }
        Command::DemoOpenclose {
            host,
            port,
            trials,
            blocks,
            hop,
            channels,
            rate,
            time_scale,
            test_duration,
            seed,
            out,
            record,
        } => {
            let server = match host {
                Some(h) => Some(Endpoint { host: h, port }.addr()?),
                None => None,
            };
            let cfg = DemoConfig {
                server,
                trials,
                blocks,
                hop_s: hop,
                n_channels: channels,
                fs: rate,
                time_scale,
                test_duration_s: test_duration,
                seed,
                out_root: out,
                record_stream: record,
                ..Default::default()
            };
            let outcome = harness::demo_openclose(&cfg, &stop)?;
            println!("run directory: {}", outcome.run_dir.display());
            println!(
                "training epochs: {}   5-fold accuracy: {:.1}%",
                outcome.n_train_epochs,
                outcome.cv_accuracy * 100.0
            );
            println!(
                "feedback accuracy: {:.1}% over {} decisions   window accuracy: {:.1}% over {} windows",
                outcome.feedback_accuracy * 100.0,
                outcome.n_scored,
                outcome.window_accuracy * 100.0,
                outcome.n_windows_scored
            );
            println!("timing violations: {}", outcome.timing_violations);
            print!("{}", outcome.latency.table());
        }
        Command::BenchLatency { decision_hz, processing_cost_ms, duration, mode, epoch, jsonl } => {
            let cfg = BenchConfig {
                decision_hz,
                processing_cost_ms,
                duration_s: duration,
                mode: match mode {
                    Mode::Sliding => BenchMode::Sliding,
                    Mode::EventLocked => BenchMode::EventLocked { epoch_s: epoch },
                },
                ..Default::default()
            };
            let outcome = harness::bench_latency(&cfg, &stop)?;
            print!("{}", outcome.report.table());
            if let Some(cue) = outcome.cue_to_feedback {
                println!(
                    "go cue to feedback: mean {:.2} ms, sd {:.2} ms (epoch length {:.0} ms)",
                    cue.mean,
                    cue.sd,
                    epoch * 1e3
                );
            }
            if outcome.report.overlap_warning() {
                println!(
                    "warning: {} decisions took longer than the {:.1} ms decision interval",
                    outcome.report.overlaps,
                    1e3 / decision_hz
                );
            }
            if let Some(path) = jsonl {
                outcome.report.write_jsonl(&path)?;
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORTEXLOOP_LOG", "info")).init();
    let cli = Cli::parse();
    let stop = StopSignal::new();
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || {
            info!("interrupt received; shutting down");
            stop.stop();
        })
        .context("installing the interrupt handler")?;
    }
    run(cli.command, stop)
}
