//! The expected callback schedule and frame counts of a sequence.

use cortexloop::scheduler::{CallbackKind, Segment, Sequence};

/// Callback order for `n` segments: before(0) first, then for each segment
/// k the after-method of k−1 and the before-method of k+1 while k is on
/// screen, and finally after(n−1).
pub fn expected_schedule(n: usize) -> Vec<(CallbackKind, usize, Option<usize>)> {
    let mut out = vec![(CallbackKind::Before, 0, None)];
    for k in 0..n {
        if k >= 1 {
            out.push((CallbackKind::After, k - 1, Some(k)));
        }
        if k + 1 < n {
            out.push((CallbackKind::Before, k + 1, Some(k)));
        }
    }
    out.push((CallbackKind::After, n - 1, None));
    out
}

pub fn frames_for(d: f64, rate: f64) -> u64 {
    ((d * rate).round() as u64).max(1)
}

/// Splits `durations` into a flat sequence or, when `nest` is set, into
/// sub-sequences of at most three segments.
pub fn build(durations: &[f64], nest: bool) -> Sequence {
    let segs: Vec<Segment> =
        durations.iter().enumerate().map(|(i, &d)| Segment::new(format!("s{i}"), Some(d))).collect();
    if !nest {
        return Sequence::new(segs);
    }
    Sequence::new(segs.chunks(3).map(|c| Sequence::new(c.to_vec())).collect::<Vec<_>>())
}
