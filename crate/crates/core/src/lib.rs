//! Real-time biosignal streaming and closed-loop processing.
//!
//! The crate is organised around a ring-buffer streaming server and the
//! parties around it:
//!
//! - [`ring`], [`protocol`], [`server`], [`client`]: the buffer itself, its
//!   binary wire format, the TCP front end and a typed client.
//! - [`acquisition`]: synthetic and replayed data sources paced to real time.
//! - [`epoching`]: event-locked and sliding-window segmentation with chained
//!   processing stages.
//! - [`markers`]: marker sinks with send timestamps.
//! - [`scheduler`]: a headless segment/sequence experiment engine driven by
//!   a frame clock.
//! - [`decode`]: common average reference, filter-bank log band-power and a
//!   shrinkage LDA.
//! - [`harness`]: the closed-loop demo and the latency benchmark.

pub mod acquisition;
pub mod clock;
pub mod decode;
pub mod epoching;
pub mod harness;
pub mod markers;
pub mod client;
pub mod protocol;
pub mod ring;
pub mod scheduler;
pub mod server;
pub mod signal;
pub mod stream;

pub use client::{Client, ClientError};
pub use ring::{Counters, RingStore, StoreError};
pub use signal::StopSignal;
pub use stream::{DataKind, Event, SampleBlock, SampleData, StreamHeader};
