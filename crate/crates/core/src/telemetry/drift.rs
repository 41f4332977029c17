use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MetricsRegistry;
use crate::model::DeviceTarget;

/// Clamped Gaussian random walk of the device's maximum drive amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    /// Relative standard deviation of one tick.
    pub sigma: f64,
    /// Relative bound around the nominal value.
    pub clamp: f64,
    /// Seconds between ticks.
    pub tick_seconds: f64,
    pub rng_seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel {
            sigma: 0.001,
            clamp: 0.05,
            tick_seconds: 60.0,
            rng_seed: 0,
        }
    }
}

impl DriftModel {
    pub fn bounds(&self, nominal: f64) -> (f64, f64) {
        (nominal * (1.0 - self.clamp), nominal * (1.0 + self.clamp))
    }
}

/// One drift step: `max_amplitude ← clamp(max_amplitude · (1 + N(0, σ)))`,
/// calibration stamped `now`.
pub fn drift_tick(
    target: &DeviceTarget,
    model: &DriftModel,
    rng: &mut ChaCha8Rng,
    now: f64,
    metrics: Option<&MetricsRegistry>,
) -> DeviceTarget {
    let noise = Normal::new(0.0, model.sigma.max(0.0))
        .map(|n| n.sample(rng))
        .unwrap_or(0.0);
    let (lo, hi) = model.bounds(target.nominal_max_amplitude);
    let mut next = target.clone();
    next.max_amplitude = (target.max_amplitude * (1.0 + noise)).clamp(lo, hi);
    next.calibration_timestamp = now;
    if let Some(m) = metrics {
        publish_target(m, &next, now);
    }
    next
}

/// Sets the calibration gauges for `target` as seen at `now`.
pub fn publish_target(metrics: &MetricsRegistry, target: &DeviceTarget, now: f64) {
    let labels = [("resource", target.resource_id.as_str())];
    let _ = metrics.set("qmw_qpu_max_amplitude", &labels, target.max_amplitude);
    let _ = metrics.set(
        "qmw_qpu_calibration_age_seconds",
        &labels,
        (now - target.calibration_timestamp).max(0.0),
    );
}
