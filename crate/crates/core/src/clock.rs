use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Real,
    Virtual,
}

#[derive(Debug)]
enum Source {
    Real { epoch: f64, started: Instant },
    Virtual(Mutex<f64>),
}

/// Seconds-since-epoch time source shared by the registry, scheduler and
/// daemon. Monotone in both modes; a virtual clock only moves through
/// [`Clock::advance`] and [`Clock::advance_to`].
#[derive(Debug, Clone)]
pub struct Clock {
    source: Arc<Source>,
}

impl Clock {
    pub fn real() -> Self {
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Clock {
            source: Arc::new(Source::Real {
                epoch,
                started: Instant::now(),
            }),
        }
    }

    pub fn virtual_at(start: f64) -> Self {
        Clock {
            source: Arc::new(Source::Virtual(Mutex::new(start))),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match *self.source {
            Source::Real { .. } => ClockMode::Real,
            Source::Virtual(_) => ClockMode::Virtual,
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.mode() == ClockMode::Virtual
    }

    pub fn now(&self) -> f64 {
        match &*self.source {
            Source::Real { epoch, started } => epoch + started.elapsed().as_secs_f64(),
            Source::Virtual(t) => *t.lock().unwrap(),
        }
    }

    /// Moves a virtual clock forward by `seconds`; a no-op on a real clock.
    pub fn advance(&self, seconds: f64) {
        if let Source::Virtual(t) = &*self.source {
            let mut t = t.lock().unwrap();
            if seconds > 0.0 {
                *t += seconds;
            }
        }
    }

    /// Moves a virtual clock to `time` if that is later than now.
    pub fn advance_to(&self, time: f64) {
        if let Source::Virtual(t) = &*self.source {
            let mut t = t.lock().unwrap();
            if time > *t {
                *t = time;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_moves_only_forward() {
        let c = Clock::virtual_at(100.0);
        assert_eq!(c.now(), 100.0);
        c.advance(2.5);
        assert_eq!(c.now(), 102.5);
        c.advance(-1.0);
        c.advance_to(50.0);
        assert_eq!(c.now(), 102.5);
        c.advance_to(200.0);
        assert_eq!(c.clone().now(), 200.0);
    }

    #[test]
    fn real_clock_is_monotone() {
        let c = Clock::real();
        let a = c.now();
        c.advance(1000.0);
        let b = c.now();
        assert!(b >= a && b - a < 100.0);
        assert_eq!(c.mode(), ClockMode::Real);
    }
}
