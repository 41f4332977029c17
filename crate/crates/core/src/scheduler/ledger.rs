use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::config::{ShareConfig, SHARE_UNITS};

/// Per-user QPU busy time within a rolling accounting window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareLedger {
    enabled: bool,
    allocations: BTreeMap<String, u32>,
    consumed: BTreeMap<String, f64>,
    window_start: f64,
    window_length: f64,
}

impl ShareLedger {
    pub fn new(shares: &ShareConfig, window_length: f64, now: f64) -> Self {
        ShareLedger {
            enabled: shares.is_enabled(),
            allocations: shares.allocations.clone(),
            consumed: BTreeMap::new(),
            window_start: now,
            window_length,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn has_user(&self, user: &str) -> bool {
        self.allocations.contains_key(user)
    }

    pub fn window_start(&self) -> f64 {
        self.window_start
    }

    pub fn consumed(&self, user: &str) -> f64 {
        self.consumed.get(user).copied().unwrap_or(0.0)
    }

    pub fn total_consumed(&self) -> f64 {
        self.consumed.values().sum()
    }

    /// Allocated fraction minus consumed fraction of this window's busy
    /// time. Zero for everyone when shares are disabled.
    pub fn deficit(&self, user: &str) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let alloc = self.allocations.get(user).copied().unwrap_or(0) as f64 / SHARE_UNITS as f64;
        let total = self.total_consumed();
        let used = if total > 0.0 { self.consumed(user) / total } else { 0.0 };
        alloc - used
    }

    /// Starts a new window once `now` passes the end of the current one.
    pub fn roll(&mut self, now: f64) {
        if self.window_length > 0.0 && now >= self.window_start + self.window_length {
            let windows = ((now - self.window_start) / self.window_length).floor();
            self.window_start += windows * self.window_length;
            self.consumed.clear();
        }
    }

    pub fn record_usage(&mut self, user: &str, busy_seconds: f64, now: f64) -> Result<(), SchedulerError> {
        if !(busy_seconds >= 0.0) {
            return Err(SchedulerError::Domain(format!("negative busy time {busy_seconds}")));
        }
        if self.enabled && !self.has_user(user) {
            return Err(SchedulerError::ShareConfig(format!(
                "user {user:?} has no timeshare allocation"
            )));
        }
        self.roll(now);
        *self.consumed.entry(user.to_string()).or_insert(0.0) += busy_seconds;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger() -> ShareLedger {
        let shares = ShareConfig {
            enabled: None,
            allocations: [("a".to_string(), 7), ("b".to_string(), 3)].into_iter().collect(),
        };
        ShareLedger::new(&shares, 100.0, 0.0)
    }

    #[test]
    fn deficits_before_any_usage_are_allocations() {
        let l = ledger();
        assert!((l.deficit("a") - 0.7).abs() < 1e-12);
        assert!((l.deficit("b") - 0.3).abs() < 1e-12);
    }

    #[test]
    fn usage_accumulates_and_rolls() {
        let mut l = ledger();
        l.record_usage("a", 5.0, 1.0).unwrap();
        l.record_usage("a", 5.0, 2.0).unwrap();
        l.record_usage("b", 10.0, 3.0).unwrap();
        assert_eq!(l.total_consumed(), 20.0);
        assert!((l.deficit("a") - 0.2).abs() < 1e-12);
        l.record_usage("b", 1.0, 250.0).unwrap();
        assert_eq!(l.window_start(), 200.0);
        assert_eq!(l.consumed("a"), 0.0);
        assert_eq!(l.consumed("b"), 1.0);
    }

    #[test]
    fn rejects_unknown_user_and_negative_time() {
        let mut l = ledger();
        assert!(matches!(l.record_usage("c", 1.0, 0.0), Err(SchedulerError::ShareConfig(_))));
        assert!(matches!(l.record_usage("a", -1.0, 0.0), Err(SchedulerError::Domain(_))));
        let mut off = ShareLedger::new(&ShareConfig::default(), 100.0, 0.0);
        off.record_usage("anyone", 2.0, 0.0).unwrap();
        assert_eq!(off.deficit("anyone"), 0.0);
    }
}
