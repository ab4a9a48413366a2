//! Injectable time source for heartbeat and liveness timers.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Logical time since the clock was created.
    fn now(&self) -> Duration;

    /// Wall-clock time that corresponds to a logical span.
    fn to_real(&self, logical: Duration) -> Duration;
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn to_real(&self, logical: Duration) -> Duration {
        logical
    }
}

/// Runs `scale` times faster than wall time: at 120x a 60 s interval passes
/// in half a second.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    start: Instant,
    scale: f64,
}

impl ScaledClock {
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0, "clock scale must be positive");
        ScaledClock { start: Instant::now(), scale }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Duration {
        self.start.elapsed().mul_f64(self.scale)
    }

    fn to_real(&self, logical: Duration) -> Duration {
        logical.div_f64(self.scale)
    }
}

/// Only moves when told to.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<Mutex<Duration>>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock().unwrap() += by;
    }

    pub fn set(&self, to: Duration) {
        let mut now = self.now.lock().unwrap();
        if to > *now {
            *now = to;
        }
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn to_real(&self, logical: Duration) -> Duration {
        logical
    }
}
