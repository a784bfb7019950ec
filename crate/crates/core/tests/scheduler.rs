mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use common::schedule::{build, expected_schedule, frames_for};
use cortexloop::markers::MarkerSink;
use cortexloop::scheduler::{
    no_adjacent_repeats, FrameClock, KeyInput, LoopingSequence, Runner, SchedulerError, Segment,
    SegmentAttr, Sequence, DEFAULT_SHUFFLE_TRIES,
};
use cortexloop::StopSignal;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn callback_schedule_and_frame_budget(
        durations in prop::collection::vec(0.01f64..2.5, 1..=10),
        rate in prop::sample::select(vec![30.0, 60.0, 75.0, 120.0, 144.0]),
        nest in any::<bool>(),
    ) {
        let mut seq = build(&durations, nest);
        let mut runner = Runner::new(FrameClock::simulated(rate));
        let log = runner.run_sequence(&mut seq);

        let order: Vec<_> = log.callbacks.iter().map(|c| (c.kind, c.position, c.during)).collect();
        prop_assert_eq!(order, expected_schedule(durations.len()));

        let want: u64 = durations.iter().map(|&d| frames_for(d, rate)).sum();
        prop_assert_eq!(log.total_frames(), want);
        prop_assert_eq!(runner.clock.frame(), want);
        let mut at = 0;
        for (s, &d) in log.segments.iter().zip(&durations) {
            prop_assert_eq!(s.start_frame, at);
            prop_assert_eq!(s.frames(), frames_for(d, rate));
            at = s.end_frame;
        }
        prop_assert_eq!(log.violations(), 0);
    }

    #[test]
    fn shuffling_preserves_the_multiset(m in 1usize..6, repeats in 1usize..8, seed in any::<u64>()) {
        let segs: Vec<Segment> = (0..m).map(|i| Segment::new(format!("s{i}"), Some(0.5))).collect();
        let mut seq = Sequence::repeated(segs, repeats).with_seed(seed);
        let names = |s: &Sequence| {
            let mut h = BTreeMap::new();
            for seg in s.segments() {
                *h.entry(seg.name).or_insert(0) += 1;
            }
            h
        };
        let before = names(&seq);
        let idcs_before = index_counts(seq.seg_idcs());
        seq.shuffle();
        prop_assert_eq!(names(&seq), before);
        prop_assert_eq!(index_counts(seq.seg_idcs()), idcs_before);
        for (seg, &idx) in seq.segments().iter().zip(seq.seg_idcs()) {
            prop_assert_eq!(&seg.name, &format!("s{idx}"));
        }
    }

    #[test]
    fn shuffle_until_satisfies_predicate(m in 3usize..6, repeats in 1usize..6, seed in any::<u64>()) {
        let segs: Vec<Segment> = (0..m).map(|i| Segment::new(format!("s{i}"), Some(0.5))).collect();
        let mut seq = Sequence::repeated(segs, repeats).with_seed(seed);
        seq.shuffle_until(no_adjacent_repeats, DEFAULT_SHUFFLE_TRIES).unwrap();
        prop_assert!(seq.seg_idcs().windows(2).all(|w| w[0] != w[1]));
    }
}

fn index_counts(idcs: &[usize]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &i in idcs {
        *h.entry(i).or_insert(0) += 1;
    }
    h
}

#[test]
fn three_one_second_segments() {
    let mut seq = build(&[1.0, 1.0, 1.0], false);
    let log = Runner::new(FrameClock::simulated(60.0)).run_sequence(&mut seq);
    assert_eq!(log.total_frames(), 180);
    assert_eq!(log.callbacks.len(), 6);
}

#[test]
fn repeated_and_listed_sequences_agree_on_segments() {
    let opened = Segment::new("opened", Some(1.0)).with_marker(1);
    let closed = Segment::new("closed", Some(1.0)).with_marker(2);
    let listed: Vec<Segment> = std::iter::repeat_n([opened.clone(), closed.clone()], 20).flatten().collect();
    let a = Sequence::new(listed);
    let b = Sequence::repeated([opened, closed], 20);
    assert_eq!(a.segments(), b.segments());
    assert_ne!(a.seg_idcs(), b.seg_idcs());
    assert_eq!(b.seg_idcs(), (0..40).map(|i| i % 2).collect::<Vec<_>>());
}

#[test]
fn shuffle_until_edge_cases() {
    let mut always = Sequence::repeated([Segment::new("a", Some(1.0)), Segment::new("b", Some(1.0))], 3);
    assert_eq!(always.shuffle_until(|_| true, DEFAULT_SHUFFLE_TRIES), Ok(1));
    let a = Segment::new("a", Some(1.0));
    let mut impossible = Sequence::repeated([a], 2);
    assert_eq!(
        impossible.shuffle_until(no_adjacent_repeats, 500),
        Err(SchedulerError::Exhausted { tries: 500 })
    );
}

#[test]
fn block_runs_five_times() {
    let (a, b, c) =
        (Segment::new("a", Some(0.5)), Segment::new("b", Some(1.0)), Segment::new("c", Some(1.0)));
    let mut block =
        Sequence::new([Sequence::new([a.clone(), b]), Sequence::new([a, c])]).shuffle_on_call(true).with_seed(3);
    let mut runner = Runner::new(FrameClock::simulated(60.0));
    let logs: Vec<_> = (0..5).map(|_| runner.run_sequence(&mut block)).collect();
    assert_eq!(logs.len(), 5);
    for log in &logs {
        let names: String = log.segments.iter().map(|s| s.name.as_str()).collect();
        assert!(names == "abac" || names == "acab", "{names}");
        assert_eq!(log.total_frames(), 2 * 30 + 2 * 60);
    }
}

#[test]
fn markers_follow_the_first_flip_of_each_segment() {
    let (sink, records) = MarkerSink::loopback();
    let sink = sink.shared();
    sink.lock().open().unwrap();
    let mut seq = Sequence::repeated(
        [Segment::new("open", Some(1.0)).with_marker(1), Segment::new("close", Some(1.0)).with_marker(2)],
        3,
    );
    seq.set_segment_attr(&SegmentAttr::MarkerSink(Some(sink.clone())));
    let log = Runner::new(FrameClock::simulated(60.0)).run_sequence(&mut seq);
    let records = records.lock();
    assert_eq!(records.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 2, 1, 2, 1, 2]);
    let clock = FrameClock::simulated(60.0);
    for s in &log.segments {
        assert_eq!(s.marker_us, Some(clock.simulated_us(s.start_frame)));
        assert_eq!(s.marker_error, None);
    }
}

#[test]
fn looping_feedback_stops_at_a_key_or_signal() {
    let stop_frame = (2.05 * 60.0f64).round() as u64;
    let mut runner = Runner::new(FrameClock::simulated(60.0)).with_keys(KeyInput::scheduled([(stop_frame, "return")]));
    let mut looping = LoopingSequence::new(Sequence::new([Segment::new("feedback", Some(0.1))]), StopSignal::new())
        .with_stop_keys(["return"]);
    let log = runner.run_looping(&mut looping);
    assert!((20..=21).contains(&log.iterations));

    let stop = StopSignal::new();
    let frames = Arc::new(AtomicU64::new(0));
    let counter = {
        let (frames, stop) = (frames.clone(), stop.clone());
        Arc::new(move |info: &cortexloop::scheduler::FrameInfo| {
            frames.store(info.frame, Ordering::Relaxed);
            if info.frame == 59 {
                stop.stop();
            }
        })
    };
    let seq = Sequence::new([Segment::new("feedback", Some(0.1))]).with_frame_callback(counter);
    let log = Runner::new(FrameClock::simulated(60.0)).run_looping(&mut LoopingSequence::new(seq, stop));
    assert_eq!(log.iterations, 10);
    assert_eq!(frames.load(Ordering::Relaxed), 59);
}

#[test]
fn unbounded_segment_waits_for_a_response_key() {
    let seg = Segment::new("task", None).with_response_keys(["space"]);
    let mut runner =
        Runner::new(FrameClock::simulated(60.0)).with_keys(KeyInput::scheduled([(40, "x"), (90, "space")]));
    let log = runner.run_segment(&seg);
    assert_eq!(log.end_frame, 90);
    assert_eq!(log.keys.iter().map(|k| (k.key.as_str(), k.response)).collect::<Vec<_>>(), vec![
        ("x", false),
        ("space", true)
    ]);
}
