//! Wall-clock abstraction used for pacing and deadlines.
//!
//! [`SystemClock`] sleeps for real. [`VirtualClock`] jumps forward instead of
//! sleeping, so paced runs can be exercised in tests without waiting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock was created.
    fn elapsed(&self) -> Duration;

    /// Blocks until `elapsed() >= deadline`.
    fn sleep_until(&self, deadline: Duration);

    /// Wall-clock timestamp corresponding to `elapsed()`.
    fn wall(&self) -> DateTime<Utc>;

    /// Longest real time a consumer should block before re-checking a deadline.
    fn poll_budget(&self, deadline: Duration) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn elapsed(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.elapsed();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }

    fn wall(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn poll_budget(&self, deadline: Duration) -> Duration {
        deadline.saturating_sub(self.elapsed())
    }
}

/// Clock whose time only moves when someone sleeps on it.
#[derive(Debug)]
pub struct VirtualClock {
    nanos: AtomicU64,
    epoch: DateTime<Utc>,
}

impl VirtualClock {
    pub fn new(epoch: DateTime<Utc>) -> Self {
        Self {
            nanos: AtomicU64::new(0),
            epoch,
        }
    }
}

impl Clock for VirtualClock {
    fn elapsed(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, deadline: Duration) {
        self.nanos
            .fetch_max(deadline.as_nanos() as u64, Ordering::SeqCst);
    }

    fn wall(&self) -> DateTime<Utc> {
        self.epoch + chrono::Duration::from_std(self.elapsed()).expect("virtual time fits")
    }

    fn poll_budget(&self, _deadline: Duration) -> Duration {
        Duration::from_millis(2)
    }
}
