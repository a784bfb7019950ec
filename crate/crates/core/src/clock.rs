//! Process-wide monotonic timestamps. Every latency figure in the crate is
//! measured against this one clock.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn anchor() -> Instant {
    static ANCHOR: OnceLock<Instant> = OnceLock::new();
    *ANCHOR.get_or_init(Instant::now)
}

/// Microseconds since the process clock anchor.
pub fn now_us() -> u64 {
    anchor().elapsed().as_micros() as u64
}

/// Converts an `Instant` to the same microsecond scale as [`now_us`].
pub fn instant_us(at: Instant) -> u64 {
    at.saturating_duration_since(anchor()).as_micros() as u64
}

/// Sleeps until `deadline`, finishing with a short spin for sub-millisecond
/// accuracy.
pub fn sleep_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(500);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::hint::spin_loop();
        }
    }
}
