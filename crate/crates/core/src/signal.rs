//! Cancellation flag shared between tasks, waitable with a timeout.

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

#[derive(Default)]
struct Inner {
    set: Mutex<bool>,
    cond: Condvar,
}

/// A one-way stop flag. Clones share state.
#[derive(Clone, Default)]
pub struct StopSignal(Arc<Inner>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        *self.0.set.lock() = true;
        self.0.cond.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.0.set.lock()
    }

    /// Sleeps up to `timeout`; returns true as soon as the signal is set.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        self.wait_until(Instant::now() + timeout)
    }

    pub fn wait_until(&self, deadline: Instant) -> bool {
        let mut set = self.0.set.lock();
        while !*set {
            if self.0.cond.wait_until(&mut set, deadline).timed_out() {
                break;
            }
        }
        *set
    }
}

impl std::fmt::Debug for StopSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("StopSignal").field(&self.is_stopped()).finish()
    }
}
