//! The daemon's application layer: sessions, jobs, admin controls, the
//! per-QPU batch drivers and metric publication.
//!
//! All mutations go through [`Service::commit`], which applies an event to
//! the in-memory [`State`] and appends it to the event log while holding the
//! state lock. Batches execute outside that lock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use qmw_core::clock::{Clock, ClockMode};
use qmw_core::config::{ConfigDocument, ConfigError, ResourceKind};
use qmw_core::emulator::{Backend, BitstringCounts};
use qmw_core::model::{DeviceTarget, PulseProgram, ValidationReport};
use qmw_core::par::ExecPolicy;
use qmw_core::resource::{AcquisitionToken, Registry, ResourceError, TaskEvent, TaskRecord, TaskSpec, TaskState};
use qmw_core::scheduler::{BatchPlan, Decision, Hint, JobPhase, Policy, Priority, QueueEntry};
use qmw_core::telemetry::{
    JobMetadataRecord, JobMetadataStore, LineProtocolSink, MetricKind, MetricsRegistry, REQUIRED_METRICS,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::events::{Event, EventKind, EventLog};
use crate::state::{Applied, JobRecord, SessionState, State};

/// Configuration used when `QMW_CONFIG` is not set.
pub const DEFAULT_CONFIG: &str = include_str!("../assets/default-config.json");

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:8470";

/// Error surfaced to API clients; the variant fixes the HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    BadRequest(String),
    Unauthorized(String),
    Forbidden(String),
    NotFound(String),
    Conflict(String),
    /// Semantic rejection; `detail` is merged into the response body.
    Unprocessable { message: String, detail: Value },
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::Unauthorized(_) => 401,
            ApiError::Forbidden(_) => 403,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) => 409,
            ApiError::Unprocessable { .. } => 422,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> Value {
        let (code, message) = match self {
            ApiError::BadRequest(m) => ("bad_request", m),
            ApiError::Unauthorized(m) => ("unauthorized", m),
            ApiError::Forbidden(m) => ("forbidden", m),
            ApiError::NotFound(m) => ("not_found", m),
            ApiError::Conflict(m) => ("conflict", m),
            ApiError::Unprocessable { message, .. } => ("unprocessable", message),
            ApiError::Internal(m) => ("internal", m),
        };
        let mut body = json!({"error": code, "message": message});
        if let ApiError::Unprocessable { detail: Value::Object(extra), .. } = self {
            body.as_object_mut().unwrap().extend(extra.clone());
        }
        body
    }

    fn unprocessable(message: impl Into<String>, detail: Value) -> Self {
        ApiError::Unprocessable {
            message: message.into(),
            detail,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status(), self.body())
    }
}

impl std::error::Error for ApiError {}

impl From<ResourceError> for ApiError {
    fn from(e: ResourceError) -> Self {
        match e {
            ResourceError::NotFound { .. } => ApiError::NotFound(e.to_string()),
            ResourceError::Rejected(report) => rejection(&report),
            ResourceError::Safeguard { value, min, max } => ApiError::unprocessable(
                e.to_string(),
                json!({"safeguard": {"value": value, "min": min, "max": max}}),
            ),
            ResourceError::Busy(_) | ResourceError::Conflict(_) | ResourceError::NotReady { .. } => {
                ApiError::Conflict(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

fn rejection(report: &ValidationReport) -> ApiError {
    ApiError::unprocessable("program failed validation against the current device target", json!({"report": report}))
}

/// Startup configuration, normally read from the environment.
#[derive(Debug, Clone)]
pub struct Settings {
    pub config: ConfigDocument,
    pub admin_token: Option<String>,
    pub event_log: Option<PathBuf>,
    pub lineproto: Option<PathBuf>,
    pub clock: ClockMode,
    pub policy: Policy,
    pub exec: ExecPolicy,
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Env(String),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
    #[error("replaying event {index}: {message}")]
    Replay { index: usize, message: String },
}

impl Settings {
    pub fn new(config: ConfigDocument) -> Self {
        Settings {
            config,
            admin_token: None,
            event_log: None,
            lineproto: None,
            clock: ClockMode::Real,
            policy: Policy::Interleave,
            exec: ExecPolicy::default(),
        }
    }

    /// Reads `QMW_CONFIG`, `QMW_ADMIN_TOKEN`, `QMW_EVENT_LOG`,
    /// `QMW_LINEPROTO_PATH`, `QMW_CLOCK` (`real`|`virtual`) and
    /// `QMW_POLICY` (`interleave`|`sequential`).
    pub fn from_env() -> Result<Self, StartupError> {
        Self::from_vars(std::env::vars().collect())
    }

    pub fn from_vars(vars: BTreeMap<String, String>) -> Result<Self, StartupError> {
        let get = |k: &str| vars.get(k).filter(|v| !v.is_empty()).cloned();
        let env = vars.clone().into_iter();
        let config = match get("QMW_CONFIG") {
            Some(path) => ConfigDocument::load(path.as_ref(), env)?,
            None => ConfigDocument::parse(DEFAULT_CONFIG, env)?,
        };
        let mut s = Settings::new(config);
        s.admin_token = get("QMW_ADMIN_TOKEN");
        s.event_log = get("QMW_EVENT_LOG").map(PathBuf::from);
        s.lineproto = get("QMW_LINEPROTO_PATH").map(PathBuf::from);
        s.clock = match get("QMW_CLOCK").as_deref() {
            None | Some("real") => ClockMode::Real,
            Some("virtual") => ClockMode::Virtual,
            Some(other) => return Err(StartupError::Env(format!("QMW_CLOCK must be real or virtual, got {other:?}"))),
        };
        if let Some(p) = get("QMW_POLICY") {
            s.policy = Policy::parse(&p)
                .ok_or_else(|| StartupError::Env(format!("QMW_POLICY must be interleave or sequential, got {p:?}")))?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRequest {
    pub user: String,
    pub partition: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub session_token: String,
    pub user: String,
    pub partition: String,
    pub priority: Priority,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub resource_id: String,
    pub program: Value,
    #[serde(default)]
    pub hint: Option<String>,
    /// Replaces the program's shot count.
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default)]
    pub expected_qpu_seconds: Option<f64>,
    #[serde(default)]
    pub expected_cc_seconds: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub backend: Backend,
    pub counts: BitstringCounts,
    pub shots: u64,
    pub calibration_timestamp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetadataView {
    pub calibration_timestamp: f64,
    pub batches_executed: u64,
    pub qpu_busy_seconds: f64,
    pub norm_drift: Option<f64>,
    pub hint: Hint,
    pub priority: Priority,
    pub batch_plan: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub state: TaskState,
    pub resource_id: String,
    pub resource_kind: ResourceKind,
    pub user: String,
    pub partition: String,
    pub priority: Priority,
    pub hint: Hint,
    pub shots: u64,
    pub submitted_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub cancel_requested: bool,
    pub queue_position: Option<usize>,
    pub error: Option<String>,
    pub result: Option<ResultDocument>,
    pub metadata: JobMetadataView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceView {
    pub resource_id: String,
    pub kind: ResourceKind,
    pub target: DeviceTarget,
    pub queue_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueDump {
    pub resource_id: String,
    pub drained: bool,
    pub in_flight: Option<String>,
    pub queue: Vec<QueueEntry>,
}

/// Who is making a request.
#[derive(Debug, Clone, Copy)]
pub enum Caller<'a> {
    Session(&'a str),
    Admin(&'a str),
}

struct Core {
    state: State,
    log: Option<EventLog>,
    replaying: bool,
    seen_ticks: BTreeMap<String, u64>,
}

struct Inner {
    config: ConfigDocument,
    admin_token: Option<String>,
    clock: Clock,
    registry: Registry,
    metrics: MetricsRegistry,
    metadata: JobMetadataStore,
    lineproto: Option<LineProtocolSink>,
    tokens: BTreeMap<String, AcquisitionToken>,
    core: Mutex<Core>,
    wake: Condvar,
    shutdown: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// Shared handle to a running daemon core.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn secret() -> String {
    hex::encode(rand::random::<[u8; 32]>())
}

fn short_id(prefix: &str) -> String {
    format!("{prefix}{:016x}", rand::rng().random::<u64>())
}

impl Service {
    /// Builds the service, replays the event log if there is one, and
    /// starts the batch drivers.
    pub fn start(settings: Settings) -> Result<Service, StartupError> {
        let clock = match settings.clock {
            ClockMode::Real => Clock::real(),
            ClockMode::Virtual => Clock::virtual_at(0.0),
        };
        let metrics = MetricsRegistry::new();
        for (name, kind, help) in REQUIRED_METRICS {
            metrics.describe(name, *kind, help).expect("static metric names are valid");
        }
        for (name, help) in [
            ("qmw_jobs_failed_total", "Jobs that ended FAILED"),
            ("qmw_jobs_cancelled_total", "Jobs that ended CANCELLED"),
            ("qmw_batches_total", "Shot batches executed"),
        ] {
            metrics.describe(name, MetricKind::Counter, help).expect("valid name");
        }
        let registry = Registry::with_policy(&settings.config, clock.clone(), Some(metrics.clone()), settings.exec);
        let mut tokens = BTreeMap::new();
        for r in &settings.config.resources {
            let tok = registry
                .acquire(&r.resource_id)
                .map_err(|e| StartupError::Env(format!("acquire {}: {e}", r.resource_id)))?;
            tokens.insert(r.resource_id.clone(), tok);
        }
        let (tx, rx) = mpsc::channel::<TaskEvent>();
        registry.set_listener(Arc::new(move |e: &TaskEvent| {
            let _ = tx.send(e.clone());
        }));

        let (log, events) = match &settings.event_log {
            Some(path) => {
                let (log, events) = EventLog::open(path)?;
                (Some(log), events)
            }
            None => (None, Vec::new()),
        };
        let lineproto = settings.lineproto.as_deref().map(LineProtocolSink::open).transpose()?;
        let state = State::new(&settings.config, settings.policy, clock.now());
        let service = Service {
            inner: Arc::new(Inner {
                config: settings.config.clone(),
                admin_token: settings.admin_token.clone(),
                clock,
                registry,
                metrics,
                metadata: JobMetadataStore::new(),
                lineproto,
                tokens,
                core: Mutex::new(Core {
                    state,
                    log,
                    replaying: true,
                    seen_ticks: BTreeMap::new(),
                }),
                wake: Condvar::new(),
                shutdown: AtomicBool::new(false),
                threads: Mutex::new(Vec::new()),
            }),
        };
        service.replay(events)?;
        service.spawn_threads(rx);
        Ok(service)
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        self.inner.core.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.clock
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn metrics(&self) -> &MetricsRegistry {
        &self.inner.metrics
    }

    pub fn metadata(&self) -> &JobMetadataStore {
        &self.inner.metadata
    }

    pub fn config(&self) -> &ConfigDocument {
        &self.inner.config
    }

    fn replay(&self, events: Vec<Event>) -> Result<(), StartupError> {
        let mut core = self.lock();
        for (index, ev) in events.iter().enumerate() {
            self.inner.clock.advance_to(ev.ts);
            core.state
                .apply(ev)
                .map_err(|e| StartupError::Replay { index, message: e.to_string() })?;
            if let EventKind::CalibrationSet { resource_id, max_amplitude } = &ev.kind {
                let _ = self.inner.registry.set_calibration(resource_id, *max_amplitude);
            }
            self.after_apply(&core, ev);
        }
        core.replaying = false;
        // marks the boot in the log; applying it reverts interrupted batches
        self.commit(&mut core, EventKind::Started {})
            .map_err(|e| StartupError::Replay { index: events.len(), message: e.to_string() })?;

        let live: Vec<JobRecord> = core.state.jobs.values().filter(|j| !j.state.is_terminal()).cloned().collect();
        for job in live {
            let running = job.resource_kind == ResourceKind::QpuMock && job.batches_executed > 0;
            let record = TaskRecord {
                task_id: job.job_id.clone(),
                resource_id: job.resource_id.clone(),
                token: self.inner.tokens[&job.resource_id].token.clone(),
                state: if running { TaskState::Running } else { TaskState::Queued },
                payload: job.program.clone(),
                target: job.target.clone(),
                seed: job.seed,
                counts: job.counts.clone(),
                batches_executed: job.batches_executed,
                busy_seconds: job.busy_seconds,
                norm_drift: 0.0,
                error: None,
            };
            self.inner
                .registry
                .task_restore(record)
                .map_err(|e| StartupError::Replay { index: events.len(), message: e.to_string() })?;
        }
        for (job_id, phase) in core.state.dangling_jobs() {
            let result = match phase {
                JobPhase::Completed => self.complete_qpu_job(&mut core, &job_id),
                _ => self.cancel_qpu_job(&mut core, &job_id),
            };
            result.map_err(|e| StartupError::Replay { index: events.len(), message: e.to_string() })?;
        }
        self.refresh_metrics(&mut core);
        Ok(())
    }

    fn spawn_threads(&self, rx: Receiver<TaskEvent>) {
        let mut threads = self.inner.threads.lock().unwrap();
        let svc = self.clone();
        threads.push(std::thread::spawn(move || svc.task_events(rx)));
        let qpus: Vec<String> = self.lock().state.schedulers.keys().cloned().collect();
        for rid in qpus {
            let svc = self.clone();
            threads.push(std::thread::spawn(move || svc.drive(&rid)));
        }
    }

    /// Stops the drivers. Nothing is flushed or finalised: every committed
    /// event is already on disk, so this is equivalent to a crash.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.wake.notify_all();
        let threads: Vec<JoinHandle<()>> = self.inner.threads.lock().unwrap().drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
    }

    fn stopping(&self) -> bool {
        self.inner.shutdown.load(Ordering::SeqCst)
    }

    /// Applies and logs one event. The single mutation point.
    fn commit(&self, core: &mut Core, kind: EventKind) -> Result<Applied, ApiError> {
        let event = Event {
            ts: self.inner.clock.now().max(core.state.last_ts),
            kind,
        };
        let applied = core
            .state
            .apply(&event)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", event.kind.name())))?;
        if let Some(log) = core.log.as_mut() {
            log.append(&event)
                .map_err(|e| ApiError::Internal(format!("event log write failed: {e}")))?;
        }
        self.after_apply(core, &event);
        self.inner.wake.notify_all();
        Ok(applied)
    }

    /// Derived effects of an event that are rebuilt on replay.
    fn after_apply(&self, core: &Core, event: &Event) {
        let m = &self.inner.metrics;
        match &event.kind {
            EventKind::JobSubmitted { .. } => {
                let _ = m.inc("qmw_jobs_submitted_total", &[], 1.0);
            }
            EventKind::BatchCompleted { job_id, .. } => {
                let rid = &core.state.jobs[job_id].resource_id;
                let _ = m.inc("qmw_batches_total", &[("resource", rid)], 1.0);
            }
            EventKind::JobCompleted { job_id, .. } | EventKind::JobFailed { job_id, .. } | EventKind::JobCancelled { job_id } => {
                let job = &core.state.jobs[job_id];
                let name = match job.state {
                    TaskState::Completed => "qmw_jobs_completed_total",
                    TaskState::Failed => "qmw_jobs_failed_total",
                    _ => "qmw_jobs_cancelled_total",
                };
                let _ = m.inc(name, &[("priority", job.priority.as_str())], 1.0);
                let record = JobMetadataRecord {
                    job_id: job.job_id.clone(),
                    resource_id: job.resource_id.clone(),
                    calibration_timestamp: job.target.calibration_timestamp,
                    batches_executed: job.batches_executed,
                    qpu_busy_seconds: job.busy_seconds,
                    norm_drift: job.norm_drift,
                    hint: job.hint,
                    priority: job.priority,
                };
                let _ = self.inner.metadata.record(record);
                if let (Some(sink), false) = (&self.inner.lineproto, core.replaying) {
                    let _ = sink.write(
                        "qmw_job",
                        &[
                            ("resource", &job.resource_id),
                            ("priority", job.priority.as_str()),
                            ("state", job.state.as_str()),
                        ],
                        &[
                            ("batches", job.batches_executed as f64),
                            ("busy_seconds", job.busy_seconds),
                            ("shots", job.counts.total() as f64),
                        ],
                        event.ts,
                    );
                }
            }
            _ => {}
        }
    }

    /// Recomputes gauges and the busy/idle counters for `now`.
    fn refresh_metrics(&self, core: &mut Core) {
        let m = &self.inner.metrics;
        let now = self.inner.clock.now();
        let st = &core.state;
        for p in Priority::ALL {
            let depth: usize = st.schedulers.values().map(|s| s.queued_count(p)).sum();
            let _ = m.set("qmw_queue_depth", &[("priority", p.as_str())], depth as f64);
            let _ = m.inc("qmw_jobs_completed_total", &[("priority", p.as_str())], 0.0);
        }
        let _ = m.inc("qmw_jobs_submitted_total", &[], 0.0);
        let active = st.sessions.values().filter(|s| s.state == SessionState::Active).count();
        let _ = m.set("qmw_sessions_active", &[], active as f64);
        let elapsed = st.started_at.map_or(0.0, |t| (now - t).max(0.0));
        let mut new_ticks = Vec::new();
        for (rid, busy) in &st.busy_seconds {
            let in_flight = st.in_flight_since.get(rid).map_or(0.0, |t| (now - t).max(0.0));
            let busy_total = busy + in_flight;
            let labels = [("resource", rid.as_str())];
            let _ = m.raise_to("qmw_qpu_busy_seconds_total", &labels, busy_total);
            let _ = m.raise_to("qmw_qpu_idle_seconds_total", &labels, (elapsed - busy_total).max(0.0));
            if let Ok(target) = self.inner.registry.fetch_target(rid) {
                let ticks = self.inner.registry.drift_ticks(rid).unwrap_or(0);
                if core.seen_ticks.get(rid) != Some(&ticks) {
                    new_ticks.push((rid.clone(), target, ticks));
                }
            }
        }
        for (rid, target, ticks) in new_ticks {
            if let Some(sink) = &self.inner.lineproto {
                let _ = sink.write(
                    "qmw_qpu_calibration",
                    &[("resource", &rid)],
                    &[("max_amplitude", target.max_amplitude), ("drift_ticks", ticks as f64)],
                    now,
                );
            }
            core.seen_ticks.insert(rid, ticks);
        }
    }

    pub fn render_metrics(&self) -> String {
        let mut core = self.lock();
        self.refresh_metrics(&mut core);
        drop(core);
        self.inner.metrics.render()
    }

    // ---- sessions ----

    pub fn create_session(&self, req: &SessionRequest) -> Result<SessionCreated, ApiError> {
        if req.user.trim().is_empty() {
            return Err(ApiError::unprocessable("user must not be empty", json!({})));
        }
        let partitions = &self.inner.config.queues.partitions;
        let Some(priority) = partitions.get(&req.partition).copied() else {
            return Err(ApiError::unprocessable(
                format!("unknown partition {:?}", req.partition),
                json!({"partitions": partitions.keys().collect::<Vec<_>>()}),
            ));
        };
        let token = secret();
        let session_id = short_id("s");
        let mut core = self.lock();
        self.commit(
            &mut core,
            EventKind::SessionOpened {
                session_id: session_id.clone(),
                user: req.user.clone(),
                partition: req.partition.clone(),
                priority,
                token_hash: hash_token(&token),
            },
        )?;
        Ok(SessionCreated {
            session_id,
            session_token: token,
            user: req.user.clone(),
            partition: req.partition.clone(),
            priority,
        })
    }

    /// Session id of an ACTIVE session.
    fn authenticate(&self, core: &Core, token: &str) -> Result<String, ApiError> {
        let id = core
            .state
            .token_index
            .get(&hash_token(token))
            .ok_or_else(|| ApiError::Unauthorized("unknown session token".into()))?;
        match core.state.sessions[id].state {
            SessionState::Active => Ok(id.clone()),
            SessionState::Closed => Err(ApiError::Unauthorized("session is closed".into())),
        }
    }

    pub fn check_admin(&self, token: &str) -> Result<(), ApiError> {
        match &self.inner.admin_token {
            Some(t) if !token.is_empty() && hash_token(t) == hash_token(token) => Ok(()),
            _ => Err(ApiError::Unauthorized("invalid admin token".into())),
        }
    }

    pub fn close_session(&self, token: &str) -> Result<Value, ApiError> {
        let mut core = self.lock();
        let id = core
            .state
            .token_index
            .get(&hash_token(token))
            .cloned()
            .ok_or_else(|| ApiError::Unauthorized("unknown session token".into()))?;
        if core.state.sessions[&id].state == SessionState::Closed {
            return Err(ApiError::Conflict("session is already closed".into()));
        }
        let jobs: Vec<String> = core
            .state
            .jobs
            .values()
            .filter(|j| j.session_id == id && !j.state.is_terminal())
            .map(|j| j.job_id.clone())
            .collect();
        for job in &jobs {
            self.cancel_locked(&mut core, job)?;
        }
        self.commit(&mut core, EventKind::SessionClosed { session_id: id.clone() })?;
        Ok(json!({"session_id": id, "state": "CLOSED", "cancelled_jobs": jobs}))
    }

    // ---- jobs ----

    pub fn submit(&self, token: &str, req: SubmitRequest) -> Result<JobView, ApiError> {
        let mut program: PulseProgram = serde_json::from_value(req.program.clone())
            .map_err(|e| ApiError::unprocessable(format!("program does not parse: {e}"), json!({})))?;
        if let Some(shots) = req.shots {
            program.shots = shots;
        }
        if let Err(e) = program.check() {
            return Err(ApiError::unprocessable(format!("malformed program: {e}"), json!({})));
        }
        let hint = match req.hint.as_deref() {
            None => Hint::None,
            Some(h) => Hint::parse(h).ok_or_else(|| {
                ApiError::unprocessable(
                    format!("unknown hint {h:?}"),
                    json!({"hints": ["qc-heavy", "cc-heavy", "qc-balanced", "none"]}),
                )
            })?,
        };
        for (name, v) in [
            ("expected_qpu_seconds", req.expected_qpu_seconds),
            ("expected_cc_seconds", req.expected_cc_seconds),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(ApiError::unprocessable(format!("{name} must be a non-negative number"), json!({})));
                }
            }
        }

        let mut core = self.lock();
        let session_id = self.authenticate(&core, token)?;
        let descriptor = self.inner.registry.descriptor(&req.resource_id)?;
        if descriptor.kind == ResourceKind::QpuMock {
            let user = &core.state.sessions[&session_id].user;
            let ledger = core.state.schedulers[&req.resource_id].ledger();
            if ledger.enabled() && !ledger.has_user(user) {
                return Err(ApiError::unprocessable(
                    format!("user {user:?} has no timeshare allocation on {}", req.resource_id),
                    json!({}),
                ));
            }
        }
        let job_id = short_id("j");
        let seed = req.seed.unwrap_or_else(rand::random);
        let handle = self.inner.registry.task_start_with(
            &self.inner.tokens[&req.resource_id].token,
            program.clone(),
            TaskSpec {
                task_id: Some(job_id.clone()),
                seed,
            },
        )?;
        let target = self.inner.registry.task_record(&job_id)?.target;
        self.commit(
            &mut core,
            EventKind::JobSubmitted {
                job_id: job_id.clone(),
                session_id,
                resource_id: req.resource_id.clone(),
                resource_kind: descriptor.kind,
                hint,
                program,
                expected_qpu_seconds: req.expected_qpu_seconds,
                expected_cc_seconds: req.expected_cc_seconds,
                seed,
                target,
            },
        )?;
        if handle.state == TaskState::Failed {
            let reason = match self.inner.registry.task_result(&job_id) {
                Err(ResourceError::Failed(r)) => r,
                _ => "failed".into(),
            };
            self.commit(&mut core, EventKind::JobFailed { job_id: job_id.clone(), reason })?;
        }
        self.view_locked(&core, &job_id)
    }

    fn owned<'a>(&self, core: &'a Core, caller: Caller, job_id: &str) -> Result<&'a JobRecord, ApiError> {
        let session = match caller {
            Caller::Admin(t) => {
                self.check_admin(t)?;
                None
            }
            Caller::Session(t) => Some(self.authenticate(core, t)?),
        };
        let job = core
            .state
            .jobs
            .get(job_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown job {job_id:?}")))?;
        match session {
            Some(s) if s != job.session_id => Err(ApiError::Forbidden("job belongs to another session".into())),
            _ => Ok(job),
        }
    }

    pub fn job(&self, caller: Caller, job_id: &str) -> Result<JobView, ApiError> {
        let core = self.lock();
        self.owned(&core, caller, job_id)?;
        self.view_locked(&core, job_id)
    }

    pub fn list_jobs(&self, token: &str) -> Result<Vec<JobView>, ApiError> {
        let core = self.lock();
        let sid = self.authenticate(&core, token)?;
        let ids: Vec<String> = core
            .state
            .jobs
            .values()
            .filter(|j| j.session_id == sid)
            .map(|j| j.job_id.clone())
            .collect();
        ids.iter().map(|id| self.view_locked(&core, id)).collect()
    }

    fn view_locked(&self, core: &Core, job_id: &str) -> Result<JobView, ApiError> {
        let job = core
            .state
            .jobs
            .get(job_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown job {job_id:?}")))?;
        let now = self.inner.clock.now();
        let mut state = job.state;
        if !state.is_terminal() && job.resource_kind != ResourceKind::QpuMock {
            if let Ok(live) = self.inner.registry.task_status(job_id) {
                if !live.is_terminal() {
                    state = live;
                }
            }
        }
        let queue_position = if job.resource_kind == ResourceKind::QpuMock && !state.is_terminal() {
            core.state.schedulers[&job.resource_id]
                .ordered_queue(now)
                .iter()
                .position(|e| e.job_id == job_id)
        } else {
            None
        };
        let backend = match job.resource_kind {
            ResourceKind::EmulatorSv => Backend::StateVector,
            _ => Backend::ProductMock,
        };
        let batch_plan = if job.resource_kind == ResourceKind::QpuMock {
            BatchPlan::new(job.priority, job.program.shots, &self.inner.config.queues).batches
        } else {
            vec![job.program.shots]
        };
        Ok(JobView {
            job_id: job.job_id.clone(),
            state,
            resource_id: job.resource_id.clone(),
            resource_kind: job.resource_kind,
            user: job.user.clone(),
            partition: job.partition.clone(),
            priority: job.priority,
            hint: job.hint,
            shots: job.program.shots,
            submitted_at: job.submitted_at,
            started_at: job.started_at,
            finished_at: job.finished_at,
            cancel_requested: job.cancel_requested,
            queue_position,
            error: job.error.clone(),
            result: (job.state == TaskState::Completed).then(|| ResultDocument {
                backend,
                counts: job.counts.clone(),
                shots: job.counts.total(),
                calibration_timestamp: job.target.calibration_timestamp,
                norm_drift: job.norm_drift,
            }),
            metadata: JobMetadataView {
                calibration_timestamp: job.target.calibration_timestamp,
                batches_executed: job.batches_executed,
                qpu_busy_seconds: job.busy_seconds,
                norm_drift: job.norm_drift,
                hint: job.hint,
                priority: job.priority,
                batch_plan,
            },
        })
    }

    pub fn cancel(&self, caller: Caller, job_id: &str) -> Result<JobView, ApiError> {
        let mut core = self.lock();
        self.owned(&core, caller, job_id)?;
        self.cancel_locked(&mut core, job_id)?;
        self.view_locked(&core, job_id)
    }

    fn cancel_locked(&self, core: &mut Core, job_id: &str) -> Result<(), ApiError> {
        let job = &core.state.jobs[job_id];
        if job.state.is_terminal() || job.cancel_requested {
            return Ok(());
        }
        if job.resource_kind == ResourceKind::QpuMock {
            let in_flight = core.state.schedulers[&job.resource_id]
                .in_flight()
                .is_some_and(|(j, _)| j == job_id);
            if in_flight {
                self.commit(core, EventKind::CancelRequested { job_id: job_id.into() })?;
            } else {
                self.cancel_qpu_job(core, job_id)?;
            }
            return Ok(());
        }
        match self.inner.registry.task_status(job_id)? {
            TaskState::Queued => {
                self.inner.registry.task_stop(job_id)?;
                self.commit(core, EventKind::JobCancelled { job_id: job_id.into() })?;
            }
            TaskState::Running => {
                self.inner.registry.task_stop(job_id)?;
                self.commit(core, EventKind::CancelRequested { job_id: job_id.into() })?;
            }
            // finished in the registry; the event thread records the outcome
            _ => {}
        }
        Ok(())
    }

    fn cancel_qpu_job(&self, core: &mut Core, job_id: &str) -> Result<(), ApiError> {
        self.inner.registry.task_stop(job_id)?;
        self.commit(core, EventKind::JobCancelled { job_id: job_id.into() })?;
        Ok(())
    }

    fn complete_qpu_job(&self, core: &mut Core, job_id: &str) -> Result<(), ApiError> {
        self.inner.registry.task_complete(job_id)?;
        let counts = core.state.jobs[job_id].counts.clone();
        self.commit(
            core,
            EventKind::JobCompleted {
                job_id: job_id.into(),
                counts,
                norm_drift: None,
            },
        )?;
        Ok(())
    }

    // ---- resources ----

    pub fn resources(&self, caller: Caller) -> Result<Vec<ResourceView>, ApiError> {
        let core = self.lock();
        self.check_caller(&core, caller)?;
        self.inner
            .config
            .resources
            .iter()
            .map(|r| {
                Ok(ResourceView {
                    resource_id: r.resource_id.clone(),
                    kind: r.kind,
                    target: self.inner.registry.fetch_target(&r.resource_id)?,
                    queue_depth: core.state.queued_jobs(&r.resource_id),
                })
            })
            .collect()
    }

    pub fn target(&self, caller: Caller, resource_id: &str) -> Result<DeviceTarget, ApiError> {
        let core = self.lock();
        self.check_caller(&core, caller)?;
        drop(core);
        Ok(self.inner.registry.fetch_target(resource_id)?)
    }

    fn check_caller(&self, core: &Core, caller: Caller) -> Result<(), ApiError> {
        match caller {
            Caller::Admin(t) => self.check_admin(t),
            Caller::Session(t) => self.authenticate(core, t).map(|_| ()),
        }
    }

    // ---- admin ----

    pub fn drain(&self, admin: &str) -> Result<Value, ApiError> {
        self.check_admin(admin)?;
        let mut core = self.lock();
        if !core.state.drained {
            self.commit(&mut core, EventKind::Drained {})?;
        }
        Ok(json!({"drained": true}))
    }

    pub fn resume(&self, admin: &str) -> Result<Value, ApiError> {
        self.check_admin(admin)?;
        let mut core = self.lock();
        if core.state.drained {
            self.commit(&mut core, EventKind::Resumed {})?;
        }
        Ok(json!({"drained": false}))
    }

    pub fn set_calibration(&self, admin: &str, resource_id: &str, max_amplitude: f64) -> Result<DeviceTarget, ApiError> {
        self.check_admin(admin)?;
        let mut core = self.lock();
        let target = self.inner.registry.set_calibration(resource_id, max_amplitude)?;
        self.commit(
            &mut core,
            EventKind::CalibrationSet {
                resource_id: resource_id.into(),
                max_amplitude,
            },
        )?;
        Ok(target)
    }

    /// Full ordered queue of every QPU resource, in decision order.
    pub fn dump_queue(&self, admin: &str) -> Result<Vec<QueueDump>, ApiError> {
        self.check_admin(admin)?;
        let core = self.lock();
        let now = self.inner.clock.now();
        Ok(core
            .state
            .schedulers
            .iter()
            .map(|(rid, s)| QueueDump {
                resource_id: rid.clone(),
                drained: core.state.drained,
                in_flight: s.in_flight().map(|(j, _)| j.to_string()),
                queue: s.ordered_queue(now),
            })
            .collect())
    }

    /// Sessions, unfinished jobs, queues and share ledgers; equal before a
    /// crash and after the restart that replays its log.
    pub fn durable_view(&self) -> Value {
        self.lock().state.durable_view()
    }

    pub fn event_count(&self) -> u64 {
        self.lock().state.events_applied
    }

    pub fn health(&self) -> Value {
        let core = self.lock();
        json!({
            "status": "ok",
            "clock": self.inner.clock.mode(),
            "now": self.inner.clock.now(),
            "started_at": core.state.started_at,
            "drained": core.state.drained,
            "events": core.state.events_applied,
        })
    }

    /// Blocks until no QPU job is waiting or executing and no emulator job is
    /// unfinished, or until `timeout`. Intended for tests and demos.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut core = self.lock();
        loop {
            let busy = core.state.jobs.values().any(|j| !j.state.is_terminal());
            if !busy {
                return true;
            }
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return false;
            }
            core = self
                .inner
                .wake
                .wait_timeout(core, left.min(Duration::from_millis(50)))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    // ---- background work ----

    fn task_events(&self, rx: Receiver<TaskEvent>) {
        loop {
            match rx.recv_timeout(Duration::from_millis(100)) {
                Ok(ev) => self.on_task_event(&ev),
                Err(RecvTimeoutError::Timeout) => {
                    if self.stopping() {
                        return;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }

    fn on_task_event(&self, ev: &TaskEvent) {
        if self.stopping() {
            return;
        }
        let mut core = self.lock();
        let Some(job) = core.state.jobs.get(&ev.task_id) else { return };
        if job.state.is_terminal() || job.resource_kind == ResourceKind::QpuMock {
            return;
        }
        let kind = match self.inner.registry.task_result(&ev.task_id) {
            Ok(res) => EventKind::JobCompleted {
                job_id: ev.task_id.clone(),
                counts: res.counts,
                norm_drift: Some(res.norm_drift),
            },
            Err(ResourceError::Failed(reason)) => EventKind::JobFailed {
                job_id: ev.task_id.clone(),
                reason,
            },
            Err(ResourceError::Cancelled) => EventKind::JobCancelled { job_id: ev.task_id.clone() },
            Err(_) => return,
        };
        if let Err(e) = self.commit(&mut core, kind) {
            tracing::error!("recording task outcome: {e}");
        }
    }

    /// Batch loop of one QPU resource.
    fn drive(&self, rid: &str) {
        let virtual_clock = self.inner.clock.is_virtual();
        loop {
            let ticket = {
                let mut core = self.lock();
                loop {
                    if self.stopping() {
                        return;
                    }
                    let now = self.inner.clock.now();
                    let mut wait = Duration::from_millis(250);
                    if !core.state.drained {
                        let sched = &core.state.schedulers[rid];
                        match sched.next_decision(now) {
                            Decision::Run {
                                job_id,
                                batch_index,
                                shots,
                            } => {
                                match self.commit(
                                    &mut core,
                                    EventKind::BatchStarted {
                                        job_id: job_id.clone(),
                                        batch_index,
                                    },
                                ) {
                                    Ok(_) => break (job_id, batch_index, shots, now),
                                    Err(e) => tracing::error!("starting batch: {e}"),
                                }
                            }
                            Decision::Idle => {
                                if let Some(t) = sched.next_ready_time(now) {
                                    if virtual_clock {
                                        self.inner.clock.advance_to(t);
                                        continue;
                                    }
                                    wait = wait.min(Duration::from_secs_f64((t - now).max(0.001)));
                                }
                            }
                        }
                    }
                    core = self
                        .inner
                        .wake
                        .wait_timeout(core, wait)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            };
            let (job_id, batch_index, shots, started) = ticket;
            let outcome = self.inner.registry.task_run_batch(&job_id, batch_index as u64, shots);
            if let Ok(o) = &outcome {
                let end = started + o.busy_seconds;
                if virtual_clock {
                    self.inner.clock.advance_to(end);
                } else {
                    while self.inner.clock.now() < end {
                        if self.stopping() {
                            return;
                        }
                        let left = end - self.inner.clock.now();
                        std::thread::sleep(Duration::from_secs_f64(left.clamp(0.0, 0.05)));
                    }
                }
            }
            if self.stopping() {
                return;
            }
            let mut core = self.lock();
            if let Err(e) = self.finish_batch(&mut core, &job_id, batch_index, outcome) {
                tracing::error!("finishing batch {batch_index} of {job_id}: {e}");
            }
            self.refresh_metrics(&mut core);
        }
    }

    fn finish_batch(
        &self,
        core: &mut Core,
        job_id: &str,
        batch_index: usize,
        outcome: Result<qmw_core::resource::BatchOutcome, ResourceError>,
    ) -> Result<(), ApiError> {
        match outcome {
            Ok(o) => {
                let applied = self.commit(
                    core,
                    EventKind::BatchCompleted {
                        job_id: job_id.into(),
                        batch_index,
                        busy_seconds: o.busy_seconds,
                        counts: o.counts,
                    },
                )?;
                match applied {
                    Applied::Batch(done) => match done.finished {
                        Some(JobPhase::Completed) => self.complete_qpu_job(core, job_id),
                        Some(_) => self.cancel_qpu_job(core, job_id),
                        None => Ok(()),
                    },
                    Applied::Nothing => Ok(()),
                }
            }
            Err(e) => {
                self.commit(core, EventKind::BatchAborted { job_id: job_id.into() })?;
                if core.state.jobs[job_id].state.is_terminal() {
                    return Ok(());
                }
                let kind = match e {
                    ResourceError::Cancelled => EventKind::JobCancelled { job_id: job_id.into() },
                    other => {
                        let _ = self.inner.registry.task_fail(job_id, &other.to_string());
                        EventKind::JobFailed {
                            job_id: job_id.into(),
                            reason: other.to_string(),
                        }
                    }
                };
                self.commit(core, kind).map(|_| ())
            }
        }
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}
