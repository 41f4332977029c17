//! Metrics registry, calibration drift feed and per-job metadata.

mod drift;
mod jobmeta;
mod lineproto;
mod metrics;

pub use drift::{drift_tick, publish_target, DriftModel};
pub use jobmeta::{DuplicateRecord, JobMetadataRecord, JobMetadataStore};
pub use lineproto::{line as line_protocol, LineProtocolSink};
pub use metrics::{Labels, MetricKind, MetricsError, MetricsRegistry, EXPOSITION_CONTENT_TYPE};

/// Families every daemon publishes from startup.
pub const REQUIRED_METRICS: &[(&str, MetricKind, &str)] = &[
    ("qmw_jobs_submitted_total", MetricKind::Counter, "Jobs accepted by the daemon"),
    ("qmw_jobs_completed_total", MetricKind::Counter, "Jobs finished successfully, by priority class"),
    ("qmw_qpu_busy_seconds_total", MetricKind::Counter, "Seconds the QPU spent executing shot batches"),
    ("qmw_qpu_idle_seconds_total", MetricKind::Counter, "Seconds the QPU spent without a batch"),
    ("qmw_queue_depth", MetricKind::Gauge, "Queued jobs, by priority class"),
    ("qmw_qpu_max_amplitude", MetricKind::Gauge, "Current calibrated maximum drive amplitude in rad/us"),
    ("qmw_qpu_calibration_age_seconds", MetricKind::Gauge, "Seconds since the last calibration update"),
    ("qmw_sessions_active", MetricKind::Gauge, "Open sessions"),
];
