//! Virtual time, in whole seconds.
//!
//! Brokered jobs run for hours of queue and compute time; everything
//! that stamps a timestamp reads one shared clock that tests and the
//! bench harness advance explicitly, so suites replay those hours in
//! milliseconds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// A shared monotone virtual clock. Cloning yields another handle to the
/// same clock.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new(start: u64) -> Self {
        VirtualClock(Arc::new(AtomicU64::new(start)))
    }

    pub fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn advance(&self, seconds: u64) -> u64 {
        self.0.fetch_add(seconds, Ordering::SeqCst) + seconds
    }

    /// Jump forward to `t`; never moves the clock backwards.
    pub fn set_at_least(&self, t: u64) {
        self.0.fetch_max(t, Ordering::SeqCst);
    }
}

/// Render a virtual timestamp (seconds since the epoch) as ISO-8601 UTC.
pub fn iso8601(t: u64) -> String {
    chrono::DateTime::from_timestamp(t as i64, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| format!("t+{t}s"))
}
