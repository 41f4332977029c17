use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Content type of [`MetricsRegistry::render`].
pub const EXPOSITION_CONTENT_TYPE: &str = "text/plain; version=0.0.4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Counter,
    Gauge,
}

impl MetricKind {
    fn as_str(self) -> &'static str {
        match self {
            MetricKind::Counter => "counter",
            MetricKind::Gauge => "gauge",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid metric name {0:?}")]
    InvalidName(String),
    #[error("invalid label name {0:?}")]
    InvalidLabel(String),
    #[error("counter {name} cannot decrease (delta {delta})")]
    NegativeDelta { name: String, delta: f64 },
    #[error("metric {name} is registered as a {existing:?}")]
    KindMismatch { name: String, existing: MetricKind },
}

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone)]
struct Family {
    kind: MetricKind,
    help: String,
    /// Keyed by the rendered label set so iteration is in output order.
    series: BTreeMap<String, f64>,
}

fn valid_metric_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn valid_label_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.starts_with("__")
}

fn escape_label_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn escape_help(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn render_labels(labels: &[(&str, &str)]) -> Result<String, MetricsError> {
    let mut sorted: Vec<(&str, &str)> = labels.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    sorted.dedup_by(|a, b| a.0 == b.0);
    if sorted.is_empty() {
        return Ok(String::new());
    }
    let mut out = String::from("{");
    for (i, (k, v)) in sorted.iter().enumerate() {
        if !valid_label_name(k) {
            return Err(MetricsError::InvalidLabel(k.to_string()));
        }
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{k}=\"{}\"", escape_label_value(v));
    }
    out.push('}');
    Ok(out)
}

pub(crate) fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        format!("{v}")
    }
}

/// Named counters and gauges rendered in the Prometheus text format.
///
/// Cloning shares the underlying series.
#[derive(Debug, Clone, Default)]
pub struct MetricsRegistry {
    families: Arc<Mutex<BTreeMap<String, Family>>>,
}

impl MetricsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a metric family with help text; idempotent for the same kind.
    pub fn describe(&self, name: &str, kind: MetricKind, help: &str) -> Result<(), MetricsError> {
        if !valid_metric_name(name) {
            return Err(MetricsError::InvalidName(name.to_string()));
        }
        let mut families = self.families.lock().unwrap();
        match families.get_mut(name) {
            Some(f) if f.kind != kind => Err(MetricsError::KindMismatch {
                name: name.to_string(),
                existing: f.kind,
            }),
            Some(f) => {
                f.help = help.to_string();
                Ok(())
            }
            None => {
                families.insert(
                    name.to_string(),
                    Family {
                        kind,
                        help: help.to_string(),
                        series: BTreeMap::new(),
                    },
                );
                Ok(())
            }
        }
    }

    /// Counters add `value`; gauges are set to it. The series is created on
    /// first touch.
    pub fn record(
        &self,
        name: &str,
        kind: MetricKind,
        labels: &[(&str, &str)],
        value: f64,
    ) -> Result<(), MetricsError> {
        if !valid_metric_name(name) {
            return Err(MetricsError::InvalidName(name.to_string()));
        }
        if kind == MetricKind::Counter && !(value >= 0.0) {
            return Err(MetricsError::NegativeDelta {
                name: name.to_string(),
                delta: value,
            });
        }
        let key = render_labels(labels)?;
        let mut families = self.families.lock().unwrap();
        let family = families.entry(name.to_string()).or_insert_with(|| Family {
            kind,
            help: name.replace('_', " "),
            series: BTreeMap::new(),
        });
        if family.kind != kind {
            return Err(MetricsError::KindMismatch {
                name: name.to_string(),
                existing: family.kind,
            });
        }
        let slot = family.series.entry(key).or_insert(0.0);
        match kind {
            MetricKind::Counter => *slot += value,
            MetricKind::Gauge => *slot = value,
        }
        Ok(())
    }

    pub fn inc(&self, name: &str, labels: &[(&str, &str)], delta: f64) -> Result<(), MetricsError> {
        self.record(name, MetricKind::Counter, labels, delta)
    }

    pub fn set(&self, name: &str, labels: &[(&str, &str)], value: f64) -> Result<(), MetricsError> {
        self.record(name, MetricKind::Gauge, labels, value)
    }

    /// Raises a counter to `total` if it is currently lower.
    pub fn raise_to(&self, name: &str, labels: &[(&str, &str)], total: f64) -> Result<(), MetricsError> {
        let current = self.get(name, labels).unwrap_or(0.0);
        if total > current {
            self.inc(name, labels, total - current)
        } else {
            self.record(name, MetricKind::Counter, labels, 0.0)
        }
    }

    pub fn get(&self, name: &str, labels: &[(&str, &str)]) -> Option<f64> {
        let key = render_labels(labels).ok()?;
        let families = self.families.lock().unwrap();
        families.get(name)?.series.get(&key).copied()
    }

    pub fn kind(&self, name: &str) -> Option<MetricKind> {
        self.families.lock().unwrap().get(name).map(|f| f.kind)
    }

    /// Text exposition of a consistent snapshot: `# HELP` and `# TYPE` once
    /// per family, then one sample line per series, families and series in
    /// lexicographic order. Families without series are omitted.
    pub fn render(&self) -> String {
        let families = self.families.lock().unwrap().clone();
        let mut out = String::new();
        for (name, family) in &families {
            if family.series.is_empty() {
                continue;
            }
            let _ = writeln!(out, "# HELP {name} {}", escape_help(&family.help));
            let _ = writeln!(out, "# TYPE {name} {}", family.kind.as_str());
            for (labels, value) in &family.series {
                let _ = writeln!(out, "{name}{labels} {}", format_value(*value));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_accumulates() {
        let m = MetricsRegistry::new();
        m.inc("qmw_jobs_submitted_total", &[], 1.0).unwrap();
        m.inc("qmw_jobs_submitted_total", &[], 1.0).unwrap();
        assert_eq!(m.get("qmw_jobs_submitted_total", &[]), Some(2.0));
    }

    #[test]
    fn gauge_last_write_wins() {
        let m = MetricsRegistry::new();
        m.set("qmw_qpu_max_amplitude", &[], 12.3).unwrap();
        m.set("qmw_qpu_max_amplitude", &[], 12.1).unwrap();
        assert_eq!(m.get("qmw_qpu_max_amplitude", &[]), Some(12.1));
    }

    #[test]
    fn counter_cannot_decrease() {
        let m = MetricsRegistry::new();
        assert!(matches!(m.inc("c_total", &[], -1.0), Err(MetricsError::NegativeDelta { .. })));
        m.inc("c_total", &[], 5.0).unwrap();
        m.raise_to("c_total", &[], 3.0).unwrap();
        assert_eq!(m.get("c_total", &[]), Some(5.0));
        m.raise_to("c_total", &[], 7.5).unwrap();
        assert_eq!(m.get("c_total", &[]), Some(7.5));
    }

    #[test]
    fn kind_mismatch_and_bad_names() {
        let m = MetricsRegistry::new();
        m.inc("x_total", &[], 1.0).unwrap();
        assert!(matches!(m.set("x_total", &[], 1.0), Err(MetricsError::KindMismatch { .. })));
        assert!(matches!(m.set("Bad", &[], 1.0), Err(MetricsError::InvalidName(_))));
        assert!(matches!(m.set("ok", &[("1x", "v")], 1.0), Err(MetricsError::InvalidLabel(_))));
    }

    #[test]
    fn empty_registry_renders_nothing() {
        assert_eq!(MetricsRegistry::new().render(), "");
    }

    #[test]
    fn single_counter_is_three_lines() {
        let m = MetricsRegistry::new();
        m.describe("qmw_jobs_submitted_total", MetricKind::Counter, "Jobs accepted").unwrap();
        m.inc("qmw_jobs_submitted_total", &[], 4.0).unwrap();
        let text = m.render();
        assert_eq!(
            text,
            "# HELP qmw_jobs_submitted_total Jobs accepted\n\
             # TYPE qmw_jobs_submitted_total counter\n\
             qmw_jobs_submitted_total 4\n"
        );
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn series_sorted_and_escaped() {
        let m = MetricsRegistry::new();
        m.set("b", &[("z", "1"), ("a", "x\"y")], 1.5).unwrap();
        m.set("b", &[("a", "w")], f64::INFINITY).unwrap();
        m.set("a", &[], -2.0).unwrap();
        let text = m.render();
        let samples: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(samples, vec!["a -2", "b{a=\"w\"} +Inf", "b{a=\"x\\\"y\",z=\"1\"} 1.5"]);
        assert_eq!(text, m.render());
    }
}
