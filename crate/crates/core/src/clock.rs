//! Run clocks. Every timestamp in one run comes from a single [`Clock`].
//!
//! The virtual clock only moves when someone sleeps on it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Wall,
    Virtual,
}

/// Host monotonic clock, in milliseconds since construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }

    pub fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    /// Sleeps until the absolute deadline.
    pub fn sleep_until(&self, deadline_ms: f64) {
        loop {
            let remaining = deadline_ms - self.now_ms();
            if remaining <= 0.0 {
                return;
            }
            if remaining > 1.5 {
                std::thread::sleep(Duration::from_secs_f64((remaining - 1.0) / 1000.0));
            } else {
                std::thread::yield_now();
            }
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

/// Manually advanced clock; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    bits: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            bits: Arc::new(AtomicU64::new(0f64.to_bits())),
        }
    }

    pub fn now_ms(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    /// Moves time forward to `t`; never moves it backwards.
    pub fn advance_to(&self, t: f64) {
        let mut cur = self.bits.load(Ordering::SeqCst);
        while f64::from_bits(cur) < t {
            match self
                .bits
                .compare_exchange(cur, t.to_bits(), Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn advance(&self, ms: f64) {
        self.advance_to(self.now_ms() + ms.max(0.0));
    }
}

/// The clock of one run.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall(WallClock),
    Virtual(VirtualClock),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(WallClock::new())
    }

    pub fn virtual_clock() -> Self {
        Clock::Virtual(VirtualClock::new())
    }

    pub fn kind(&self) -> ClockKind {
        match self {
            Clock::Wall(_) => ClockKind::Wall,
            Clock::Virtual(_) => ClockKind::Virtual,
        }
    }

    pub fn now_ms(&self) -> f64 {
        match self {
            Clock::Wall(c) => c.now_ms(),
            Clock::Virtual(c) => c.now_ms(),
        }
    }

    pub fn sleep_until(&self, deadline_ms: f64) {
        match self {
            Clock::Wall(c) => c.sleep_until(deadline_ms),
            Clock::Virtual(c) => c.advance_to(deadline_ms),
        }
    }

    pub fn sleep_ms(&self, ms: f64) {
        self.sleep_until(self.now_ms() + ms.max(0.0));
    }

    /// True when both handles observe the same underlying time source.
    pub fn same_source(&self, other: &Clock) -> bool {
        match (self, other) {
            (Clock::Wall(a), Clock::Wall(b)) => a.origin == b.origin,
            (Clock::Virtual(a), Clock::Virtual(b)) => Arc::ptr_eq(&a.bits, &b.bits),
            _ => false,
        }
    }
}
