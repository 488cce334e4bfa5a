use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Fixed-step simulation clock. Elapsed time is always derived from the
/// integer tick, so it never accumulates rounding drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick: u64,
    pub tick_duration: f64,
    pub physics_substeps: u32,
}

impl Default for SimClock {
    fn default() -> Self {
        Self { tick: 0, tick_duration: 1.0 / 30.0, physics_substeps: 8 }
    }
}

impl SimClock {
    pub fn new(tick_duration: f64, physics_substeps: u32) -> Result<Self> {
        if !(tick_duration > 0.0 && tick_duration.is_finite()) {
            return Err(SimError::validation("tick duration must be positive"));
        }
        if physics_substeps == 0 {
            return Err(SimError::validation("physics substeps must be positive"));
        }
        Ok(Self { tick: 0, tick_duration, physics_substeps })
    }

    pub fn advance(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn elapsed(&self) -> f64 {
        self.tick as f64 * self.tick_duration
    }

    pub fn physics_dt(&self) -> f64 {
        self.tick_duration / self.physics_substeps as f64
    }

    pub fn ticks_per_second(&self) -> f64 {
        1.0 / self.tick_duration
    }

    /// Whole ticks covering `seconds`, rounded up.
    pub fn ticks_for(&self, seconds: f64) -> u64 {
        (seconds / self.tick_duration).ceil().max(0.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elapsed_is_exact_multiple() {
        let mut c = SimClock::default();
        for _ in 0..100_000 {
            c.advance();
        }
        assert_eq!(c.elapsed(), 100_000.0 * c.tick_duration);
        assert!((c.physics_dt() - 1.0 / 240.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SimClock::new(0.0, 8).is_err());
        assert!(SimClock::new(0.1, 0).is_err());
    }
}
