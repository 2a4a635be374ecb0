//! Time sources. Everything that reads time takes a [`Clock`] so the testnet
//! can compress multi-hour key lifetimes into milliseconds of real time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Millisecond-resolution wall clock abstraction.
pub trait Clock: Send + Sync {
    /// Unix time in milliseconds.
    fn now_millis(&self) -> u64;

    /// Unix time in whole seconds.
    fn now_secs(&self) -> u64 {
        self.now_millis() / 1000
    }
}

/// The real system clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system time before unix epoch")
            .as_millis() as u64
    }
}

/// A manually advanced clock. Never moves on its own; tests advance it at
/// explicit barriers.
#[derive(Debug)]
pub struct SimClock {
    millis: AtomicU64,
}

impl SimClock {
    pub fn new(start_millis: u64) -> Arc<Self> {
        Arc::new(Self {
            millis: AtomicU64::new(start_millis),
        })
    }

    /// Starts at a fixed, arbitrary epoch so tests are reproducible.
    pub fn default_epoch() -> Arc<Self> {
        Self::new(1_700_000_000_000)
    }

    pub fn advance_millis(&self, delta: u64) {
        self.millis.fetch_add(delta, Ordering::SeqCst);
    }

    pub fn advance_secs(&self, delta: u64) {
        self.advance_millis(delta * 1000);
    }

    pub fn set_millis(&self, value: u64) {
        self.millis.store(value, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_millis(&self) -> u64 {
        self.millis.load(Ordering::SeqCst)
    }
}
