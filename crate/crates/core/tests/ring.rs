mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::shadow::{int32_values, run_schedule};
use cortexloop::{DataKind, Event, RingStore, SampleData, StoreError, StreamHeader};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn store_matches_unbounded_shadow(seed in any::<u64>()) {
        run_schedule(seed, 10_000);
    }

    #[test]
    fn stored_events_are_sorted(batches in prop::collection::vec(prop::collection::vec(0u64..50, 0..6), 1..20)) {
        let store = RingStore::new(4096, 4096);
        store.put_header(&StreamHeader::new(1, 10.0, DataKind::Float32)).unwrap();
        let mut base = 0u64;
        for offsets in batches {
            let max = offsets.iter().copied().max().unwrap_or(0);
            store
                .append_samples(&SampleData::Float32 { n_channels: 1, values: vec![0.0; max as usize + 1] })
                .unwrap();
            let batch: Vec<Event> = offsets.iter().map(|&o| Event::marker(o as i32, base + o)).collect();
            store.append_events(&batch).unwrap();
            base += max;
        }
        let all = store.read_events(0, store.counters().n_events).unwrap();
        prop_assert!(all.windows(2).all(|w| w[0].sample <= w[1].sample));
    }
}

#[test]
fn append_past_capacity_moves_the_horizon() {
    let store = RingStore::new(1024, 16);
    store.put_header(&StreamHeader::new(1, 200.0, DataKind::Int32)).unwrap();
    store.append_samples(&SampleData::Int32 { n_channels: 1, values: (0..1000).collect() }).unwrap();
    assert_eq!(store.append_samples(&SampleData::Int32 { n_channels: 1, values: (1000..1500).collect() }), Ok(1500));
    assert!(matches!(store.read_samples(475, 480), Err(StoreError::Evicted { horizon: 476, .. })));
    assert_eq!(int32_values(&store.read_samples(476, 1500).unwrap().data), (476..1500).collect::<Vec<_>>());
}

/// Every row holds its own absolute index in each channel, so a torn read
/// would show up as a row whose cells disagree with its position.
#[test]
fn concurrent_readers_see_monotone_counters_and_whole_rows() {
    let n_channels = 16;
    let store = Arc::new(RingStore::new(4096, 64));
    store.put_header(&StreamHeader::new(n_channels, 1000.0, DataKind::Int32)).unwrap();
    let done = Arc::new(AtomicBool::new(false));

    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (store, done) = (store.clone(), done.clone());
            thread::spawn(move || {
                let mut last = 0;
                let mut checked = 0usize;
                while !done.load(Ordering::Relaxed) {
                    let n = store.counters().n_samples;
                    assert!(n >= last, "counter went backwards");
                    last = n;
                    if n == 0 {
                        continue;
                    }
                    let begin = n.saturating_sub(512);
                    match store.read_samples(begin, n) {
                        Ok(block) => {
                            for (i, row) in int32_values(&block.data).chunks(n_channels).enumerate() {
                                let want = (begin + i as u64) as i32;
                                assert!(row.iter().all(|&v| v == want), "torn row at {want}");
                            }
                            checked += 1;
                        }
                        Err(StoreError::Evicted { .. }) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
                checked
            })
        })
        .collect();

    let mut next = 0i32;
    for _ in 0..2000 {
        let rows = 37;
        let values = (next..next + rows).flat_map(|i| std::iter::repeat_n(i, n_channels)).collect();
        store.append_samples(&SampleData::Int32 { n_channels, values }).unwrap();
        next += rows;
    }
    thread::sleep(Duration::from_millis(20));
    done.store(true, Ordering::Relaxed);
    for r in readers {
        assert!(r.join().unwrap() > 0);
    }
}

#[test]
fn waiter_does_not_block_the_writer() {
    let store = Arc::new(RingStore::new(1024, 16));
    store.put_header(&StreamHeader::new(1, 200.0, DataKind::Float32)).unwrap();
    let waiter = {
        let store = store.clone();
        thread::spawn(move || store.wait_until(1_000_000, u64::MAX, Duration::from_millis(300)).unwrap())
    };
    thread::sleep(Duration::from_millis(20));
    let t = std::time::Instant::now();
    for _ in 0..100 {
        store.append_samples(&SampleData::Float32 { n_channels: 1, values: vec![0.0; 10] }).unwrap();
    }
    assert!(t.elapsed() < Duration::from_millis(100));
    assert_eq!(waiter.join().unwrap().n_samples, 1000);
}
