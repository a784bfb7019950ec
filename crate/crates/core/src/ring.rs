//! Bounded in-memory store of samples and events with absolute indexing.
//!
//! Samples and events are addressed by monotone absolute indices. Only the
//! most recent `capacity_samples` rows and `capacity_events` events are
//! retained; reads that reach into the evicted region fail instead of
//! returning partial data.
//!
//! One writer and any number of readers may share a store. All mutations
//! happen under a single lock, readers copy out under the same lock, and
//! [`RingStore::wait_until`] parks on a condition variable so a waiting
//! reader never holds the lock while blocked.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::stream::{Event, SampleBlock, SampleData, StreamHeader};

pub const DEFAULT_CAPACITY_SAMPLES: usize = 1 << 20;
pub const DEFAULT_CAPACITY_EVENTS: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("no header has been written")]
    NoHeader,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("range [{begin}, {end}) is empty or reversed")]
    InvalidRange { begin: u64, end: u64 },
    #[error("requested up to {end} but only {available} available")]
    NotYetAvailable { end: u64, available: u64 },
    #[error("index {begin} is before the eviction horizon {horizon}")]
    Evicted { begin: u64, horizon: u64 },
    #[error("event at sample {sample} precedes stored event at sample {last}")]
    EventOrder { sample: u64, last: u64 },
    #[error("event at sample {sample} is beyond the stream head {head}")]
    FutureEvent { sample: u64, head: u64 },
}

/// Counter snapshot returned by waits and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub n_samples: u64,
    pub n_events: u64,
}

struct SampleRing {
    row_bytes: usize,
    capacity: usize,
    bytes: Vec<u8>,
}

impl SampleRing {
    fn new(row_bytes: usize, capacity: usize) -> Self {
        Self {
            row_bytes,
            capacity,
            bytes: vec![0; row_bytes * capacity],
        }
    }

    fn write(&mut self, first_index: u64, rows: &[u8]) {
        let n_rows = rows.len() / self.row_bytes;
        // Only the last `capacity` rows of an oversized block survive.
        let skip = n_rows.saturating_sub(self.capacity);
        let mut index = first_index + skip as u64;
        let mut src = &rows[skip * self.row_bytes..];
        while !src.is_empty() {
            let slot = (index % self.capacity as u64) as usize;
            let run = (self.capacity - slot).min(src.len() / self.row_bytes);
            let n = run * self.row_bytes;
            let at = slot * self.row_bytes;
            self.bytes[at..at + n].copy_from_slice(&src[..n]);
            src = &src[n..];
            index += run as u64;
        }
    }

    fn read(&self, begin: u64, end: u64, out: &mut Vec<u8>) {
        let mut index = begin;
        while index < end {
            let slot = (index % self.capacity as u64) as usize;
            let run = ((self.capacity - slot) as u64).min(end - index) as usize;
            let at = slot * self.row_bytes;
            out.extend_from_slice(&self.bytes[at..at + run * self.row_bytes]);
            index += run as u64;
        }
    }
}

struct Inner {
    header: Option<StreamHeader>,
    samples: Option<SampleRing>,
    events: VecDeque<Event>,
    n_samples: u64,
    n_events: u64,
    /// Indices below these were discarded by a flush.
    sample_floor: u64,
    event_floor: u64,
    /// Bumped by [`RingStore::interrupt_waiters`].
    interrupt_generation: u64,
}

impl Inner {
    fn counters(&self) -> Counters {
        Counters {
            n_samples: self.n_samples,
            n_events: self.n_events,
        }
    }

    fn sample_horizon(&self, capacity: usize) -> u64 {
        self.n_samples
            .saturating_sub(capacity as u64)
            .max(self.sample_floor)
    }

    fn event_horizon(&self, capacity: usize) -> u64 {
        self.n_events
            .saturating_sub(capacity as u64)
            .max(self.event_floor)
    }
}

/// Shared ring-buffer state behind the buffer server.
pub struct RingStore {
    capacity_samples: usize,
    capacity_events: usize,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl Default for RingStore {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY_SAMPLES, DEFAULT_CAPACITY_EVENTS)
    }
}

impl RingStore {
    pub fn new(capacity_samples: usize, capacity_events: usize) -> Self {
        assert!(capacity_samples > 0 && capacity_events > 0, "capacities must be positive");
        Self {
            capacity_samples,
            capacity_events,
            inner: Mutex::new(Inner {
                header: None,
                samples: None,
                events: VecDeque::new(),
                n_samples: 0,
                n_events: 0,
                sample_floor: 0,
                event_floor: 0,
                interrupt_generation: 0,
            }),
            changed: Condvar::new(),
        }
    }

    pub fn capacity_samples(&self) -> usize {
        self.capacity_samples
    }

    pub fn capacity_events(&self) -> usize {
        self.capacity_events
    }

    /// Installs a new header and resets all stored data and counters.
    pub fn put_header(&self, header: &StreamHeader) -> Result<(), StoreError> {
        header.validate().map_err(StoreError::InvalidHeader)?;
        let mut fresh = header.clone();
        fresh.n_samples_total = 0;
        fresh.n_events_total = 0;
        let row_bytes = fresh.n_channels * fresh.data_kind.size();
        let mut inner = self.inner.lock();
        inner.samples = Some(SampleRing::new(row_bytes, self.capacity_samples));
        inner.header = Some(fresh);
        inner.events.clear();
        inner.n_samples = 0;
        inner.n_events = 0;
        inner.sample_floor = 0;
        inner.event_floor = 0;
        drop(inner);
        self.changed.notify_all();
        Ok(())
    }

    /// Current header with live counters.
    pub fn header(&self) -> Result<StreamHeader, StoreError> {
        let inner = self.inner.lock();
        let mut header = inner.header.clone().ok_or(StoreError::NoHeader)?;
        header.n_samples_total = inner.n_samples;
        header.n_events_total = inner.n_events;
        Ok(header)
    }

    pub fn counters(&self) -> Counters {
        self.inner.lock().counters()
    }

    /// Appends rows at the stream head and returns the new sample total.
    pub fn append_samples(&self, data: &SampleData) -> Result<u64, StoreError> {
        if !data.is_rectangular() || data.n_samples() == 0 {
            return Err(StoreError::Shape("block must hold at least one whole row".into()));
        }
        let bytes = data.to_le_bytes();
        let mut inner = self.inner.lock();
        let header = inner.header.as_ref().ok_or(StoreError::NoHeader)?;
        if data.n_channels() != header.n_channels {
            return Err(StoreError::Shape(format!(
                "block has {} channels, header has {}",
                data.n_channels(),
                header.n_channels
            )));
        }
        if data.kind() != header.data_kind {
            return Err(StoreError::Shape(format!(
                "block is {:?}, header is {:?}",
                data.kind(),
                header.data_kind
            )));
        }
        let first = inner.n_samples;
        inner
            .samples
            .as_mut()
            .expect("ring allocated with header")
            .write(first, &bytes);
        inner.n_samples += data.n_samples() as u64;
        let total = inner.n_samples;
        drop(inner);
        self.changed.notify_all();
        Ok(total)
    }

    /// Copies out samples `[begin, end)`.
    pub fn read_samples(&self, begin: u64, end: u64) -> Result<SampleBlock, StoreError> {
        if begin >= end {
            return Err(StoreError::InvalidRange { begin, end });
        }
        let inner = self.inner.lock();
        let header = inner.header.as_ref().ok_or(StoreError::NoHeader)?;
        if end > inner.n_samples {
            return Err(StoreError::NotYetAvailable {
                end,
                available: inner.n_samples,
            });
        }
        let horizon = inner.sample_horizon(self.capacity_samples);
        if begin < horizon {
            return Err(StoreError::Evicted { begin, horizon });
        }
        let (kind, n_channels) = (header.data_kind, header.n_channels);
        let mut bytes = Vec::with_capacity((end - begin) as usize * n_channels * kind.size());
        inner
            .samples
            .as_ref()
            .expect("ring allocated with header")
            .read(begin, end, &mut bytes);
        drop(inner);
        let data = SampleData::from_le_bytes(kind, n_channels, &bytes).expect("whole rows");
        Ok(SampleBlock {
            start_index: begin,
            data,
        })
    }

    /// Appends a batch of events. The batch is ordered by sample (stable)
    /// before insertion; it must not precede the last stored event and must
    /// not reference samples beyond the stream head.
    pub fn append_events(&self, events: &[Event]) -> Result<u64, StoreError> {
        let mut batch = events.to_vec();
        batch.sort_by_key(|e| e.sample);
        let mut inner = self.inner.lock();
        if inner.header.is_none() {
            return Err(StoreError::NoHeader);
        }
        if let (Some(first), Some(last)) = (batch.first(), inner.events.back()) {
            if first.sample < last.sample {
                return Err(StoreError::EventOrder {
                    sample: first.sample,
                    last: last.sample,
                });
            }
        }
        if let Some(latest) = batch.last() {
            if latest.sample > inner.n_samples {
                return Err(StoreError::FutureEvent {
                    sample: latest.sample,
                    head: inner.n_samples,
                });
            }
        }
        inner.n_events += batch.len() as u64;
        inner.events.extend(batch);
        while inner.events.len() > self.capacity_events {
            inner.events.pop_front();
        }
        let total = inner.n_events;
        drop(inner);
        self.changed.notify_all();
        Ok(total)
    }

    /// Events with absolute indices `[begin, end)`; an empty range yields an
    /// empty list.
    pub fn read_events(&self, begin: u64, end: u64) -> Result<Vec<Event>, StoreError> {
        if begin > end {
            return Err(StoreError::InvalidRange { begin, end });
        }
        let inner = self.inner.lock();
        if inner.header.is_none() {
            return Err(StoreError::NoHeader);
        }
        if end > inner.n_events {
            return Err(StoreError::NotYetAvailable {
                end,
                available: inner.n_events,
            });
        }
        if begin == end {
            return Ok(Vec::new());
        }
        let horizon = inner.event_horizon(self.capacity_events);
        if begin < horizon {
            return Err(StoreError::Evicted { begin, horizon });
        }
        // The deque holds indices [n_events - len, n_events).
        let first_held = inner.n_events - inner.events.len() as u64;
        let from = (begin - first_held) as usize;
        let to = (end - first_held) as usize;
        Ok(inner.events.range(from..to).cloned().collect())
    }

    /// Discards all retained samples and events. Counters are unchanged, so
    /// every index below the current totals becomes evicted.
    pub fn flush(&self) -> Result<Counters, StoreError> {
        let mut inner = self.inner.lock();
        if inner.header.is_none() {
            return Err(StoreError::NoHeader);
        }
        inner.sample_floor = inner.n_samples;
        inner.event_floor = inner.n_events;
        inner.events.clear();
        Ok(inner.counters())
    }

    /// Blocks until `n_samples >= min_samples` or `n_events >= min_events`,
    /// the timeout elapses, or [`interrupt_waiters`](Self::interrupt_waiters)
    /// is called. Always returns the counters current at return time.
    pub fn wait_until(
        &self,
        min_samples: u64,
        min_events: u64,
        timeout: Duration,
    ) -> Result<Counters, StoreError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        if inner.header.is_none() {
            return Err(StoreError::NoHeader);
        }
        let generation = inner.interrupt_generation;
        loop {
            let done = inner.n_samples >= min_samples
                || inner.n_events >= min_events
                || inner.interrupt_generation != generation
                || inner.header.is_none();
            if done {
                return Ok(inner.counters());
            }
            if self.changed.wait_until(&mut inner, deadline).timed_out() {
                return Ok(inner.counters());
            }
        }
    }

    /// Releases every thread currently parked in [`wait_until`](Self::wait_until).
    pub fn interrupt_waiters(&self) {
        self.inner.lock().interrupt_generation += 1;
        self.changed.notify_all();
    }
}
