//! Unbounded reference model of the ring store.

use cortexloop::{DataKind, Event, RingStore, SampleData, StoreError, StreamHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unbounded reference: keeps every row and every event ever appended.
pub struct Shadow {
    n_channels: usize,
    cap_samples: u64,
    cap_events: u64,
    rows: Vec<i32>,
    sample_floor: u64,
    events: Vec<Event>,
    event_floor: u64,
}

impl Shadow {
    fn n_samples(&self) -> u64 {
        (self.rows.len() / self.n_channels) as u64
    }

    fn n_events(&self) -> u64 {
        self.events.len() as u64
    }

    fn read_samples(&self, begin: u64, end: u64) -> Result<Vec<i32>, &'static str> {
        if begin >= end {
            return Err("range");
        }
        if end > self.n_samples() {
            return Err("not-yet");
        }
        if begin < self.n_samples().saturating_sub(self.cap_samples).max(self.sample_floor) {
            return Err("evicted");
        }
        let c = self.n_channels;
        Ok(self.rows[begin as usize * c..end as usize * c].to_vec())
    }

    fn read_events(&self, begin: u64, end: u64) -> Result<Vec<Event>, &'static str> {
        if begin > end {
            return Err("range");
        }
        if end > self.n_events() {
            return Err("not-yet");
        }
        if begin == end {
            return Ok(Vec::new());
        }
        if begin < self.n_events().saturating_sub(self.cap_events).max(self.event_floor) {
            return Err("evicted");
        }
        Ok(self.events[begin as usize..end as usize].to_vec())
    }

    fn append_events(&mut self, batch: &[Event]) -> Result<u64, &'static str> {
        let mut batch = batch.to_vec();
        batch.sort_by_key(|e| e.sample);
        let retained = self.n_events() > self.event_floor;
        if let (Some(first), Some(last), true) = (batch.first(), self.events.last(), retained) {
            if first.sample < last.sample {
                return Err("order");
            }
        }
        if batch.last().is_some_and(|e| e.sample > self.n_samples()) {
            return Err("future");
        }
        self.events.extend(batch);
        Ok(self.n_events())
    }
}

pub fn kind_of(err: &StoreError) -> &'static str {
    match err {
        StoreError::InvalidRange { .. } => "range",
        StoreError::NotYetAvailable { .. } => "not-yet",
        StoreError::Evicted { .. } => "evicted",
        StoreError::EventOrder { .. } => "order",
        StoreError::FutureEvent { .. } => "future",
        other => panic!("unexpected store error {other}"),
    }
}

pub fn int32_values(data: &SampleData) -> Vec<i32> {
    match data {
        SampleData::Int32 { values, .. } => values.clone(),
        other => panic!("expected int32 data, got {:?}", other.kind()),
    }
}

/// Drives the store and the shadow through the same random schedule and
/// compares every result, including the error kind.
pub fn run_schedule(seed: u64, steps: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_channels = rng.random_range(1..=4);
    let cap_samples = rng.random_range(1..=96usize);
    let cap_events = rng.random_range(1..=24usize);
    let store = RingStore::new(cap_samples, cap_events);
    store.put_header(&StreamHeader::new(n_channels, 100.0, DataKind::Int32)).unwrap();
    let mut shadow = Shadow {
        n_channels,
        cap_samples: cap_samples as u64,
        cap_events: cap_events as u64,
        rows: Vec::new(),
        sample_floor: 0,
        events: Vec::new(),
        event_floor: 0,
    };

    for step in 0..steps {
        let total = shadow.n_samples();
        match rng.random_range(0..100) {
            0..=34 => {
                let n = rng.random_range(1..=cap_samples * 2);
                let values: Vec<i32> = (0..n * n_channels).map(|_| rng.random()).collect();
                let got = store.append_samples(&SampleData::Int32 { n_channels, values: values.clone() });
                shadow.rows.extend(values);
                assert_eq!(got, Ok(shadow.n_samples()), "step {step}");
            }
            35..=64 => {
                let lo = total.saturating_sub(cap_samples as u64 + 8);
                let begin = rng.random_range(lo..=total + 2);
                let end = rng.random_range(begin.saturating_sub(2)..=total + 4);
                let got = store.read_samples(begin, end);
                let want = shadow.read_samples(begin, end);
                match (got, want) {
                    (Ok(block), Ok(rows)) => {
                        assert_eq!(block.start_index, begin);
                        assert_eq!(int32_values(&block.data), rows, "step {step} [{begin},{end})");
                    }
                    (Err(e), Err(w)) => assert_eq!(kind_of(&e), w, "step {step} [{begin},{end})"),
                    (g, w) => panic!("step {step} [{begin},{end}): store {g:?}, shadow {w:?}"),
                }
            }
            65..=79 => {
                let last = shadow.events.last().map_or(0, |e| e.sample);
                let n = rng.random_range(0..4);
                let batch: Vec<Event> = (0..n)
                    .map(|_| {
                        let s = if rng.random_bool(0.9) {
                            rng.random_range(last.min(total)..=total)
                        } else {
                            rng.random_range(0..=total + 3)
                        };
                        Event::marker(rng.random_range(0..256), s)
                    })
                    .collect();
                let got = store.append_events(&batch).map_err(|e| kind_of(&e));
                assert_eq!(got, shadow.append_events(&batch), "step {step}");
            }
            80..=96 => {
                let n = shadow.n_events();
                let begin = rng.random_range(n.saturating_sub(cap_events as u64 + 4)..=n + 1);
                let end = rng.random_range(begin.saturating_sub(1)..=n + 2);
                let got = store.read_events(begin, end).map_err(|e| kind_of(&e));
                assert_eq!(got, shadow.read_events(begin, end), "step {step} [{begin},{end})");
            }
            _ => {
                store.flush().unwrap();
                shadow.sample_floor = shadow.n_samples();
                shadow.event_floor = shadow.n_events();
            }
        }
        let c = store.counters();
        assert_eq!((c.n_samples, c.n_events), (shadow.n_samples(), shadow.n_events()));
    }
}
