//! Configuration document and environment overrides.
//!
//! The document is JSON with three top-level sections:
//!
//! ```json
//! {
//!   "resources": [{"resource_id": "pasqal0", "kind": "qpu-mock", "parameters": {"shot_rate": 1.0, ...}}],
//!   "queues": {"partitions": {"prod": "production", "test": "test", "dev": "development"}, "max_batch": 1000},
//!   "shares": {"allocations": {"alice": 7, "bob": 3}}
//! }
//! ```
//!
//! Any resource parameter can be overridden with an environment variable
//! `QMW_RESOURCE_<ID>_<FIELD>`, where `<ID>` is the upper-cased resource id
//! with every non-alphanumeric character replaced by `_`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeviceTarget, DEFAULT_C6};
use crate::scheduler::Priority;
use crate::telemetry::DriftModel;

pub const OVERRIDE_PREFIX: &str = "QMW_RESOURCE_";

/// Total timeshare units that allocations divide.
pub const SHARE_UNITS: u32 = 10;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate resource_id {0:?}")]
    DuplicateResource(String),
    #[error("resource {resource_id:?} has unknown kind {kind:?}")]
    UnknownKind { resource_id: String, kind: String },
    #[error("resource {resource_id:?} is missing mandatory parameter {parameter:?}")]
    MissingParameter {
        resource_id: String,
        parameter: String,
    },
    #[error("resource {resource_id:?} does not accept parameter {parameter:?}")]
    UnknownParameter {
        resource_id: String,
        parameter: String,
    },
    #[error("resource {resource_id:?} parameter {parameter:?}: {reason}")]
    InvalidParameter {
        resource_id: String,
        parameter: String,
        reason: String,
    },
    #[error("environment override {variable}: {reason}")]
    Override { variable: String, reason: String },
    #[error("share configuration: {0}")]
    Shares(String),
    #[error("queue configuration: {0}")]
    Queues(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceKind {
    QpuMock,
    EmulatorSv,
    EmulatorPs,
    CloudStub,
}

impl ResourceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "qpu-mock" => Some(ResourceKind::QpuMock),
            "emulator-sv" => Some(ResourceKind::EmulatorSv),
            "emulator-ps" => Some(ResourceKind::EmulatorPs),
            "cloud-stub" => Some(ResourceKind::CloudStub),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::QpuMock => "qpu-mock",
            ResourceKind::EmulatorSv => "emulator-sv",
            ResourceKind::EmulatorPs => "emulator-ps",
            ResourceKind::CloudStub => "cloud-stub",
        }
    }

    /// Whether at most one acquisition may be live at a time.
    pub fn is_exclusive(self) -> bool {
        self == ResourceKind::QpuMock
    }

    fn mandatory(self) -> &'static [&'static str] {
        match self {
            ResourceKind::QpuMock => &["shot_rate", "max_atoms", "nominal_max_amplitude"],
            ResourceKind::EmulatorSv | ResourceKind::EmulatorPs => &["max_atoms"],
            ResourceKind::CloudStub => &[],
        }
    }

    fn defaults(self) -> Vec<(&'static str, f64)> {
        let mut d = vec![
            ("shot_rate", 1.0),
            ("nominal_max_amplitude", 12.0),
            ("detuning_min", -40.0),
            ("detuning_max", 40.0),
            ("max_duration", 100_000.0),
            ("min_spacing", 4.0),
            ("c6", DEFAULT_C6),
            ("max_atoms", if self == ResourceKind::EmulatorSv { 12.0 } else { 100.0 }),
        ];
        if self == ResourceKind::QpuMock {
            let drift = DriftModel::default();
            d.extend([
                ("drift_sigma", drift.sigma),
                ("drift_clamp", drift.clamp),
                ("drift_tick_seconds", drift.tick_seconds),
                ("drift_seed", drift.rng_seed as f64),
            ]);
        }
        d
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fully resolved resource: every parameter the kind accepts is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub resource_id: String,
    pub kind: ResourceKind,
    pub parameters: BTreeMap<String, f64>,
}

impl ResourceDescriptor {
    pub fn param(&self, name: &str) -> f64 {
        self.parameters[name]
    }

    /// Device target at nominal calibration, stamped `calibration_timestamp`.
    pub fn nominal_target(&self, calibration_timestamp: f64) -> DeviceTarget {
        let nominal = self.param("nominal_max_amplitude");
        DeviceTarget {
            resource_id: self.resource_id.clone(),
            max_atoms: self.param("max_atoms") as usize,
            max_amplitude: nominal,
            detuning_range: (self.param("detuning_min"), self.param("detuning_max")),
            max_duration: self.param("max_duration") as u64,
            min_spacing: self.param("min_spacing"),
            c6_coefficient: self.param("c6"),
            shot_rate: self.param("shot_rate"),
            calibration_timestamp,
            nominal_max_amplitude: nominal,
        }
    }

    pub fn drift_model(&self) -> Option<DriftModel> {
        (self.kind == ResourceKind::QpuMock).then(|| DriftModel {
            sigma: self.param("drift_sigma"),
            clamp: self.param("drift_clamp"),
            tick_seconds: self.param("drift_tick_seconds"),
            rng_seed: self.param("drift_seed") as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    /// Partition name → priority class.
    pub partitions: BTreeMap<String, Priority>,
    pub max_batch: u64,
    pub test_batch: u64,
    /// Share accounting window, seconds.
    pub window_length: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            partitions: [
                ("prod".to_string(), Priority::Production),
                ("test".to_string(), Priority::Test),
                ("dev".to_string(), Priority::Development),
            ]
            .into_iter()
            .collect(),
            max_batch: 1000,
            test_batch: 10,
            window_length: 3600.0,
        }
    }
}

impl QueueConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.partitions.is_empty() {
            return Err(ConfigError::Queues("no partitions configured".into()));
        }
        if self.max_batch == 0 || self.test_batch == 0 {
            return Err(ConfigError::Queues("batch sizes must be positive".into()));
        }
        if !(self.window_length > 0.0) {
            return Err(ConfigError::Queues("window_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShareConfig {
    /// Defaults to true whenever allocations are given.
    #[serde(default)]
    pub enabled: Option<bool>,
    #[serde(default)]
    pub allocations: BTreeMap<String, u32>,
}

impl ShareConfig {
    pub fn is_enabled(&self) -> bool {
        self.enabled.unwrap_or(!self.allocations.is_empty())
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let total: u32 = self.allocations.values().sum();
        if total > SHARE_UNITS {
            return Err(ConfigError::Shares(format!(
                "allocations sum to {total} units, at most {SHARE_UNITS} exist"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct RawResource {
    resource_id: String,
    kind: String,
    #[serde(default)]
    parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    resources: Vec<RawResource>,
    #[serde(default)]
    queues: QueueConfig,
    #[serde(default)]
    shares: ShareConfig,
}

/// The parsed and override-resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub resources: Vec<ResourceDescriptor>,
    pub queues: QueueConfig,
    pub shares: ShareConfig,
}

/// Normalized form of a resource id inside an environment variable name.
pub fn env_key(resource_id: &str) -> String {
    resource_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect()
}

impl ConfigDocument {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn load(
        path: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, env)
    }

    /// Parses `text` and applies the `QMW_RESOURCE_*` entries of `env`.
    /// Other variables are ignored.
    pub fn parse(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let raw: RawDocument = serde_json::from_str(text)?;
        raw.queues.check()?;
        raw.shares.check()?;

        let mut resources: Vec<ResourceDescriptor> = Vec::with_capacity(raw.resources.len());
        for r in raw.resources {
            if resources.iter().any(|d| d.resource_id == r.resource_id) {
                return Err(ConfigError::DuplicateResource(r.resource_id));
            }
            let kind = ResourceKind::parse(&r.kind).ok_or_else(|| ConfigError::UnknownKind {
                resource_id: r.resource_id.clone(),
                kind: r.kind.clone(),
            })?;
            let defaults = kind.defaults();
            for name in r.parameters.keys() {
                if !defaults.iter().any(|(d, _)| d == name) {
                    return Err(ConfigError::UnknownParameter {
                        resource_id: r.resource_id.clone(),
                        parameter: name.clone(),
                    });
                }
            }
            for name in kind.mandatory() {
                if !r.parameters.contains_key(*name) {
                    return Err(ConfigError::MissingParameter {
                        resource_id: r.resource_id.clone(),
                        parameter: name.to_string(),
                    });
                }
            }
            let mut parameters: BTreeMap<String, f64> =
                defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            parameters.extend(r.parameters);
            resources.push(ResourceDescriptor {
                resource_id: r.resource_id,
                kind,
                parameters,
            });
        }

        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(OVERRIDE_PREFIX))
            .collect();
        overrides.sort();
        for (variable, value) in overrides {
            apply_override(&mut resources, &variable, &value)?;
        }
        for r in &resources {
            check_parameters(r)?;
        }

        Ok(ConfigDocument {
            resources,
            queues: raw.queues,
            shares: raw.shares,
        })
    }

    pub fn resource(&self, id: &str) -> Option<&ResourceDescriptor> {
        self.resources.iter().find(|r| r.resource_id == id)
    }
}

fn apply_override(
    resources: &mut [ResourceDescriptor],
    variable: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let err = |reason: String| ConfigError::Override {
        variable: variable.to_string(),
        reason,
    };
    let rest = &variable[OVERRIDE_PREFIX.len()..];
    // Longest id wins when one id is a prefix of another.
    let target = resources
        .iter_mut()
        .filter(|r| {
            let key = env_key(&r.resource_id);
            rest.len() > key.len() + 1 && rest.starts_with(&key) && rest.as_bytes()[key.len()] == b'_'
        })
        .max_by_key(|r| r.resource_id.len())
        .ok_or_else(|| err("does not name a configured resource".into()))?;
    let field = rest[env_key(&target.resource_id).len() + 1..].to_ascii_lowercase();
    if !target.parameters.contains_key(&field) {
        return Err(err(format!(
            "resource {:?} has no parameter {field:?}",
            target.resource_id
        )));
    }
    let parsed: f64 = value
        .trim()
        .parse()
        .map_err(|_| err(format!("value {value:?} is not a number")))?;
    target.parameters.insert(field, parsed);
    Ok(())
}

fn check_parameters(r: &ResourceDescriptor) -> Result<(), ConfigError> {
    let invalid = |parameter: &str, reason: &str| ConfigError::InvalidParameter {
        resource_id: r.resource_id.clone(),
        parameter: parameter.to_string(),
        reason: reason.to_string(),
    };
    for (name, v) in &r.parameters {
        if !v.is_finite() {
            return Err(invalid(name, "must be finite"));
        }
    }
    for name in ["shot_rate", "nominal_max_amplitude", "min_spacing", "max_duration"] {
        if r.param(name) <= 0.0 {
            return Err(invalid(name, "must be positive"));
        }
    }
    let atoms = r.param("max_atoms");
    if atoms < 1.0 || atoms.fract() != 0.0 {
        return Err(invalid("max_atoms", "must be a positive integer"));
    }
    if r.kind == ResourceKind::EmulatorSv && atoms > crate::emulator::MAX_EXACT_ATOMS as f64 {
        return Err(invalid("max_atoms", "exact emulator supports at most 12 atoms"));
    }
    if r.param("detuning_min") > r.param("detuning_max") {
        return Err(invalid("detuning_min", "exceeds detuning_max"));
    }
    if r.param("c6") < 0.0 {
        return Err(invalid("c6", "must be non-negative"));
    }
    if r.kind == ResourceKind::QpuMock {
        if r.param("drift_sigma") < 0.0 {
            return Err(invalid("drift_sigma", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&r.param("drift_clamp")) {
            return Err(invalid("drift_clamp", "must lie in [0, 1)"));
        }
        if r.param("drift_tick_seconds") <= 0.0 {
            return Err(invalid("drift_tick_seconds", "must be positive"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "resources": [
            {"resource_id": "pasqal0", "kind": "qpu-mock",
             "parameters": {"shot_rate": 1.0, "max_atoms": 50, "nominal_max_amplitude": 12.0}},
            {"resource_id": "emulator-sv", "kind": "emulator-sv", "parameters": {"max_atoms": 12}}
        ],
        "shares": {"allocations": {"alice": 7, "bob": 3}}
    }"#;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn override_takes_precedence() {
        let doc = ConfigDocument::parse(DOC, env(&[("QMW_RESOURCE_PASQAL0_SHOT_RATE", "2.0")])).unwrap();
        assert_eq!(doc.resource("pasqal0").unwrap().param("shot_rate"), 2.0);
    }

    #[test]
    fn empty_environment_keeps_file_values() {
        let doc = ConfigDocument::parse(DOC, env(&[("PATH", "/bin")])).unwrap();
        let q = doc.resource("pasqal0").unwrap();
        assert_eq!(q.param("shot_rate"), 1.0);
        assert_eq!(q.param("max_atoms"), 50.0);
        assert_eq!(q.param("drift_clamp"), 0.05);
        assert!(doc.shares.is_enabled());
        assert_eq!(doc.queues.partitions["dev"], Priority::Development);
    }

    #[test]
    fn dashed_ids_map_to_underscores() {
        let doc = ConfigDocument::parse(DOC, env(&[("QMW_RESOURCE_EMULATOR_SV_MIN_SPACING", "5.5")])).unwrap();
        assert_eq!(doc.resource("emulator-sv").unwrap().param("min_spacing"), 5.5);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = r#"{"resources": [
            {"resource_id": "a", "kind": "cloud-stub"},
            {"resource_id": "a", "kind": "cloud-stub"}]}"#;
        let err = ConfigDocument::parse(text, env(&[])).unwrap_err();
        assert!(matches!(&err, ConfigError::DuplicateResource(id) if id == "a"));
        assert!(err.to_string().contains("\"a\""));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let text = r#"{"resources": [{"resource_id": "x", "kind": "fpga"}]}"#;
        assert!(matches!(
            ConfigDocument::parse(text, env(&[])),
            Err(ConfigError::UnknownKind { .. })
        ));
    }

    #[test]
    fn malformed_overrides_name_the_variable() {
        for (var, val) in [
            ("QMW_RESOURCE_NOPE_SHOT_RATE", "1"),
            ("QMW_RESOURCE_PASQAL0_COLOR", "1"),
            ("QMW_RESOURCE_PASQAL0_SHOT_RATE", "fast"),
        ] {
            match ConfigDocument::parse(DOC, env(&[(var, val)])) {
                Err(ConfigError::Override { variable, .. }) => assert_eq!(variable, var),
                other => panic!("{var}: {other:?}"),
            }
        }
    }

    #[test]
    fn mandatory_and_range_checks() {
        let missing = r#"{"resources": [{"resource_id": "q", "kind": "qpu-mock", "parameters": {"shot_rate": 1}}]}"#;
        assert!(matches!(
            ConfigDocument::parse(missing, env(&[])),
            Err(ConfigError::MissingParameter { .. })
        ));
        let big = r#"{"resources": [{"resource_id": "e", "kind": "emulator-sv", "parameters": {"max_atoms": 20}}]}"#;
        assert!(matches!(
            ConfigDocument::parse(big, env(&[])),
            Err(ConfigError::InvalidParameter { .. })
        ));
        let shares = r#"{"resources": [], "shares": {"allocations": {"a": 8, "b": 3}}}"#;
        assert!(matches!(ConfigDocument::parse(shares, env(&[])), Err(ConfigError::Shares(_))));
    }
}
