//! Uniform resource layer over the mock QPU, the emulators and the cloud stub.
//!
//! Lifecycle: `acquire` → `task_start` (validates against the target as it
//! is *now*) → poll `task_status` / `task_result` → `release`. Emulator tasks
//! run on a worker thread. QPU-mock tasks stay QUEUED until the caller (the
//! daemon's scheduler loop) feeds them batches through [`Registry::task_run_batch`].
//!
//! The QPU mock drifts lazily: tick `k` happens at `origin + k·tick_seconds`
//! and is applied the first time anything looks at the target after that
//! instant, so the trajectory does not depend on how often it is observed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::config::{ConfigDocument, ConfigError, ResourceDescriptor, ResourceKind};
use crate::emulator::{prepare, Backend, BitstringCounts, CancelFlag, EmulatorError, EmulatorOptions, FinalState, RunResult};
use crate::model::{validate_program, DeviceTarget, PulseProgram, ValidationReport};
use crate::par::ExecPolicy;
use crate::telemetry::{drift_tick, publish_target, DriftModel, MetricsRegistry};

/// Failure reason of every cloud-stub task.
pub const NOT_SUPPORTED: &str = "NOT_SUPPORTED";

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("unknown {what} {id:?}")]
    NotFound { what: &'static str, id: String },
    #[error("resource {0:?} is held by another acquisition")]
    Busy(String),
    #[error("invalid or released token")]
    InvalidToken,
    #[error("program rejected: {0}")]
    Rejected(ValidationReport),
    #[error("task {task_id} is {state}, no result yet")]
    NotReady { task_id: String, state: TaskState },
    #[error("task failed: {0}")]
    Failed(String),
    #[error("task was cancelled")]
    Cancelled,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("calibration {value} outside safeguard [{min}, {max}]")]
    Safeguard { value: f64, min: f64, max: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ResourceError {
    fn task(id: &str) -> Self {
        ResourceError::NotFound {
            what: "task",
            id: id.to_string(),
        }
    }

    fn resource(id: &str) -> Self {
        ResourceError::NotFound {
            what: "resource",
            id: id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed | TaskState::Cancelled)
    }

    /// Edges of QUEUED→RUNNING→{COMPLETED|FAILED|CANCELLED}, QUEUED→{CANCELLED|FAILED}.
    pub fn can_move_to(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Queued, Failed) | (Running, Completed) | (Running, Failed) | (Running, Cancelled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::Running => "RUNNING",
            TaskState::Completed => "COMPLETED",
            TaskState::Failed => "FAILED",
            TaskState::Cancelled => "CANCELLED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionToken {
    pub token: String,
    pub resource_id: String,
    pub acquired_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHandle {
    pub task_id: String,
    pub state: TaskState,
}

/// Per-task knobs. The task id defaults to a random one.
#[derive(Debug, Clone, Default)]
pub struct TaskSpec {
    pub task_id: Option<String>,
    pub seed: u64,
}

/// Everything needed to recreate a task after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub resource_id: String,
    pub token: String,
    pub state: TaskState,
    pub payload: PulseProgram,
    /// Target the payload was validated against.
    pub target: DeviceTarget,
    pub seed: u64,
    pub counts: BitstringCounts,
    pub batches_executed: u64,
    pub busy_seconds: f64,
    pub norm_drift: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUsage {
    pub batches_executed: u64,
    pub busy_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub batch_index: u64,
    pub counts: BitstringCounts,
    pub busy_seconds: f64,
    /// CANCELLED when a stop arrived while the batch ran; the batch is still
    /// charged but its counts are dropped.
    pub state_after: TaskState,
}

/// Terminal transition notification.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvent {
    pub task_id: String,
    pub resource_id: String,
    pub state: TaskState,
}

pub type TaskListener = Arc<dyn Fn(&TaskEvent) + Send + Sync>;

struct Task {
    record: TaskRecord,
    kind: ResourceKind,
    cancel: CancelFlag,
    cancel_requested: bool,
    batch_in_flight: bool,
    prepared: Option<Arc<FinalState>>,
    result: Option<RunResult>,
}

struct DriftState {
    model: DriftModel,
    rng: ChaCha8Rng,
    origin: f64,
    ticks: u64,
}

struct ResourceSlot {
    descriptor: ResourceDescriptor,
    target: DeviceTarget,
    drift: Option<DriftState>,
    holder: Option<String>,
}

#[derive(Default)]
struct Tables {
    resources: BTreeMap<String, ResourceSlot>,
    tokens: BTreeMap<String, AcquisitionToken>,
    tasks: BTreeMap<String, Task>,
}

struct Inner {
    tables: Mutex<Tables>,
    changed: Condvar,
    clock: Clock,
    metrics: Option<MetricsRegistry>,
    policy: ExecPolicy,
    listener: Mutex<Option<TaskListener>>,
}

/// Shared handle to the resource tables; clones refer to the same registry.
#[derive(Clone)]
pub struct Registry {
    inner: Arc<Inner>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.lock();
        f.debug_struct("Registry")
            .field("resources", &t.resources.keys().collect::<Vec<_>>())
            .field("tasks", &t.tasks.len())
            .finish()
    }
}

fn random_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn backend_for(kind: ResourceKind) -> Option<Backend> {
    match kind {
        ResourceKind::EmulatorSv => Some(Backend::StateVector),
        ResourceKind::EmulatorPs | ResourceKind::QpuMock => Some(Backend::ProductMock),
        ResourceKind::CloudStub => None,
    }
}

/// Seed of batch `index` of a task seeded `seed` (splitmix64 finaliser).
pub fn batch_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a registry from a config document and the process environment.
pub fn load_registry(
    text: &str,
    env: impl IntoIterator<Item = (String, String)>,
    clock: Clock,
) -> Result<Registry, ResourceError> {
    let doc = ConfigDocument::parse(text, env)?;
    Ok(Registry::new(&doc, clock, None))
}

impl Registry {
    pub fn new(doc: &ConfigDocument, clock: Clock, metrics: Option<MetricsRegistry>) -> Self {
        Self::with_policy(doc, clock, metrics, ExecPolicy::default())
    }

    pub fn with_policy(
        doc: &ConfigDocument,
        clock: Clock,
        metrics: Option<MetricsRegistry>,
        policy: ExecPolicy,
    ) -> Self {
        let now = clock.now();
        let mut tables = Tables::default();
        for d in &doc.resources {
            let target = d.nominal_target(now);
            let drift = d.drift_model().map(|model| DriftState {
                rng: ChaCha8Rng::seed_from_u64(model.rng_seed),
                model,
                origin: now,
                ticks: 0,
            });
            if let (Some(m), Some(_)) = (&metrics, &drift) {
                publish_target(m, &target, now);
            }
            tables.resources.insert(
                d.resource_id.clone(),
                ResourceSlot {
                    descriptor: d.clone(),
                    target,
                    drift,
                    holder: None,
                },
            );
        }
        Registry {
            inner: Arc::new(Inner {
                tables: Mutex::new(tables),
                changed: Condvar::new(),
                clock,
                metrics,
                policy,
                listener: Mutex::new(None),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Tables> {
        self.inner.tables.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.clock
    }

    /// Called after every terminal task transition, outside the registry lock.
    pub fn set_listener(&self, listener: TaskListener) {
        *self.inner.listener.lock().unwrap() = Some(listener);
    }

    fn notify(&self, events: Vec<TaskEvent>) {
        self.inner.changed.notify_all();
        if events.is_empty() {
            return;
        }
        let listener = self.inner.listener.lock().unwrap().clone();
        if let Some(l) = listener {
            for e in &events {
                l(e);
            }
        }
    }

    pub fn resources(&self) -> Vec<ResourceDescriptor> {
        self.lock().resources.values().map(|s| s.descriptor.clone()).collect()
    }

    pub fn descriptor(&self, resource_id: &str) -> Result<ResourceDescriptor, ResourceError> {
        self.lock()
            .resources
            .get(resource_id)
            .map(|s| s.descriptor.clone())
            .ok_or_else(|| ResourceError::resource(resource_id))
    }

    fn advance_drift(&self, slot: &mut ResourceSlot, now: f64) {
        let Some(d) = slot.drift.as_mut() else { return };
        if !(d.model.tick_seconds > 0.0) {
            return;
        }
        let due = ((now - d.origin) / d.model.tick_seconds).floor();
        if !(due > d.ticks as f64) {
            return;
        }
        let due = due as u64;
        while d.ticks < due {
            d.ticks += 1;
            let at = d.origin + d.ticks as f64 * d.model.tick_seconds;
            slot.target = drift_tick(&slot.target, &d.model, &mut d.rng, at, None);
        }
        if let Some(m) = &self.inner.metrics {
            publish_target(m, &slot.target, now);
        }
    }

    /// Current calibration snapshot, with drift applied up to now.
    pub fn fetch_target(&self, resource_id: &str) -> Result<DeviceTarget, ResourceError> {
        let now = self.inner.clock.now();
        let mut t = self.lock();
        let slot = t
            .resources
            .get_mut(resource_id)
            .ok_or_else(|| ResourceError::resource(resource_id))?;
        self.advance_drift(slot, now);
        if let (Some(m), Some(_)) = (&self.inner.metrics, &slot.drift) {
            publish_target(m, &slot.target, now);
        }
        Ok(slot.target.clone())
    }

    /// Number of drift ticks applied so far.
    pub fn drift_ticks(&self, resource_id: &str) -> Result<u64, ResourceError> {
        let t = self.lock();
        let slot = t.resources.get(resource_id).ok_or_else(|| ResourceError::resource(resource_id))?;
        Ok(slot.drift.as_ref().map_or(0, |d| d.ticks))
    }

    /// Admin override of the QPU mock's `max_amplitude`, accepted only inside
    /// the drift clamp around nominal. Drift continues from the new value.
    pub fn set_calibration(&self, resource_id: &str, max_amplitude: f64) -> Result<DeviceTarget, ResourceError> {
        let now = self.inner.clock.now();
        let mut t = self.lock();
        let slot = t
            .resources
            .get_mut(resource_id)
            .ok_or_else(|| ResourceError::resource(resource_id))?;
        let Some(model) = slot.drift.as_ref().map(|d| d.model) else {
            return Err(ResourceError::Conflict(format!(
                "{resource_id} is a {} and has no calibration",
                slot.descriptor.kind
            )));
        };
        let (min, max) = model.bounds(slot.target.nominal_max_amplitude);
        if !(max_amplitude >= min && max_amplitude <= max) {
            return Err(ResourceError::Safeguard {
                value: max_amplitude,
                min,
                max,
            });
        }
        self.advance_drift(slot, now);
        slot.target.max_amplitude = max_amplitude;
        slot.target.calibration_timestamp = now;
        if let Some(m) = &self.inner.metrics {
            publish_target(m, &slot.target, now);
        }
        Ok(slot.target.clone())
    }

    pub fn acquire(&self, resource_id: &str) -> Result<AcquisitionToken, ResourceError> {
        let now = self.inner.clock.now();
        let mut t = self.lock();
        let slot = t
            .resources
            .get_mut(resource_id)
            .ok_or_else(|| ResourceError::resource(resource_id))?;
        if slot.descriptor.kind.is_exclusive() && slot.holder.is_some() {
            return Err(ResourceError::Busy(resource_id.to_string()));
        }
        let token = AcquisitionToken {
            token: random_id(),
            resource_id: resource_id.to_string(),
            acquired_at: now,
        };
        if slot.descriptor.kind.is_exclusive() {
            slot.holder = Some(token.token.clone());
        }
        t.tokens.insert(token.token.clone(), token.clone());
        Ok(token)
    }

    /// Invalidates the token and cancels every unfinished task started under it.
    pub fn release(&self, token: &str) -> Result<(), ResourceError> {
        let mut events = Vec::new();
        {
            let mut t = self.lock();
            let acq = t.tokens.remove(token).ok_or(ResourceError::InvalidToken)?;
            if let Some(slot) = t.resources.get_mut(&acq.resource_id) {
                if slot.holder.as_deref() == Some(token) {
                    slot.holder = None;
                }
            }
            for task in t.tasks.values_mut().filter(|x| x.record.token == token) {
                if !task.record.state.is_terminal() {
                    task.cancel.cancel();
                    cancel_now(task);
                    events.push(event_of(task));
                }
            }
        }
        self.notify(events);
        Ok(())
    }

    pub fn is_token_live(&self, token: &str) -> bool {
        self.lock().tokens.contains_key(token)
    }

    /// Validates `payload` against the current target and creates a task.
    pub fn task_start(&self, token: &str, payload: PulseProgram) -> Result<TaskHandle, ResourceError> {
        self.task_start_with(
            token,
            payload,
            TaskSpec {
                task_id: None,
                seed: rand::random(),
            },
        )
    }

    pub fn task_start_with(&self, token: &str, payload: PulseProgram, spec: TaskSpec) -> Result<TaskHandle, ResourceError> {
        let now = self.inner.clock.now();
        let (handle, run, events) = {
            let mut t = self.lock();
            let resource_id = t.tokens.get(token).ok_or(ResourceError::InvalidToken)?.resource_id.clone();
            let slot = t
                .resources
                .get_mut(&resource_id)
                .ok_or_else(|| ResourceError::resource(&resource_id))?;
            self.advance_drift(slot, now);
            let kind = slot.descriptor.kind;
            let target = slot.target.clone();
            let report = validate_program(&payload, &target);
            if !report.valid {
                return Err(ResourceError::Rejected(report));
            }
            let task_id = spec.task_id.unwrap_or_else(random_id);
            if t.tasks.contains_key(&task_id) {
                return Err(ResourceError::Conflict(format!("task {task_id} already exists")));
            }
            let mut task = Task {
                record: TaskRecord {
                    task_id: task_id.clone(),
                    resource_id,
                    token: token.to_string(),
                    state: TaskState::Queued,
                    payload,
                    target,
                    seed: spec.seed,
                    counts: BitstringCounts::default(),
                    batches_executed: 0,
                    busy_seconds: 0.0,
                    norm_drift: 0.0,
                    error: None,
                },
                kind,
                cancel: CancelFlag::new(),
                cancel_requested: false,
                batch_in_flight: false,
                prepared: None,
                result: None,
            };
            let mut events = Vec::new();
            if kind == ResourceKind::CloudStub {
                task.record.state = TaskState::Failed;
                task.record.error = Some(NOT_SUPPORTED.to_string());
                events.push(event_of(&task));
            }
            let run = matches!(kind, ResourceKind::EmulatorSv | ResourceKind::EmulatorPs);
            let handle = TaskHandle {
                task_id: task_id.clone(),
                state: task.record.state,
            };
            t.tasks.insert(task_id, task);
            (handle, run, events)
        };
        self.notify(events);
        if run {
            let reg = self.clone();
            let id = handle.task_id.clone();
            std::thread::spawn(move || reg.run_emulator_task(&id));
        }
        Ok(handle)
    }

    fn run_emulator_task(&self, task_id: &str) {
        let (payload, target, seed, kind, cancel) = {
            let mut t = self.lock();
            let Some(task) = t.tasks.get_mut(task_id) else { return };
            if task.record.state != TaskState::Queued {
                return;
            }
            task.record.state = TaskState::Running;
            (
                task.record.payload.clone(),
                task.record.target.clone(),
                task.record.seed,
                task.kind,
                task.cancel.clone(),
            )
        };
        self.inner.changed.notify_all();
        let backend = backend_for(kind).expect("emulator kind");
        let opts = EmulatorOptions {
            cancel: Some(cancel),
            policy: self.inner.policy,
            ..EmulatorOptions::default()
        };
        let outcome = prepare(&payload, backend, &target, &opts)
            .and_then(|(state, drift)| state.sample(payload.shots, seed, opts.policy).map(|c| (c, drift)));
        let event = {
            let mut t = self.lock();
            let Some(task) = t.tasks.get_mut(task_id) else { return };
            if task.record.state != TaskState::Running {
                return;
            }
            match outcome {
                Ok((counts, norm_drift)) => {
                    task.record.counts = counts.clone();
                    task.record.norm_drift = norm_drift;
                    task.record.state = TaskState::Completed;
                    task.result = Some(RunResult {
                        backend,
                        counts,
                        shots: payload.shots,
                        calibration_timestamp: target.calibration_timestamp,
                        norm_drift,
                    });
                }
                Err(EmulatorError::Cancelled) => cancel_now(task),
                Err(e) => {
                    task.record.state = TaskState::Failed;
                    task.record.error = Some(e.to_string());
                }
            }
            event_of(task)
        };
        self.notify(vec![event]);
    }

    pub fn task_status(&self, task_id: &str) -> Result<TaskState, ResourceError> {
        self.lock()
            .tasks
            .get(task_id)
            .map(|t| t.record.state)
            .ok_or_else(|| ResourceError::task(task_id))
    }

    pub fn task_result(&self, task_id: &str) -> Result<RunResult, ResourceError> {
        let t = self.lock();
        let task = t.tasks.get(task_id).ok_or_else(|| ResourceError::task(task_id))?;
        match task.record.state {
            TaskState::Completed => Ok(task.result.clone().expect("completed task has a result")),
            TaskState::Failed => Err(ResourceError::Failed(task.record.error.clone().unwrap_or_default())),
            TaskState::Cancelled => Err(ResourceError::Cancelled),
            state => Err(ResourceError::NotReady {
                task_id: task_id.to_string(),
                state,
            }),
        }
    }

    pub fn task_usage(&self, task_id: &str) -> Result<TaskUsage, ResourceError> {
        let t = self.lock();
        let task = t.tasks.get(task_id).ok_or_else(|| ResourceError::task(task_id))?;
        Ok(TaskUsage {
            batches_executed: task.record.batches_executed,
            busy_seconds: task.record.busy_seconds,
        })
    }

    pub fn task_record(&self, task_id: &str) -> Result<TaskRecord, ResourceError> {
        let t = self.lock();
        t.tasks
            .get(task_id)
            .map(|t| t.record.clone())
            .ok_or_else(|| ResourceError::task(task_id))
    }

    /// QUEUED → CANCELLED now; RUNNING QPU batch → at the batch boundary;
    /// RUNNING emulator → at the next integrator checkpoint; terminal → no-op.
    pub fn task_stop(&self, task_id: &str) -> Result<(), ResourceError> {
        let events = {
            let mut t = self.lock();
            let task = t.tasks.get_mut(task_id).ok_or_else(|| ResourceError::task(task_id))?;
            match task.record.state {
                s if s.is_terminal() => vec![],
                TaskState::Queued => {
                    cancel_now(task);
                    vec![event_of(task)]
                }
                _ if task.kind == ResourceKind::QpuMock && !task.batch_in_flight => {
                    cancel_now(task);
                    vec![event_of(task)]
                }
                _ if task.kind == ResourceKind::QpuMock => {
                    task.cancel_requested = true;
                    vec![]
                }
                _ => {
                    task.cancel.cancel();
                    vec![]
                }
            }
        };
        self.notify(events);
        Ok(())
    }

    /// Executes one shot batch of a QPU-mock task. The final state is
    /// evolved once per task and sampled per batch with a seed derived from
    /// the batch index, so replays reproduce the same counts.
    pub fn task_run_batch(&self, task_id: &str, batch_index: u64, shots: u64) -> Result<BatchOutcome, ResourceError> {
        let (payload, target, seed, prepared) = {
            let mut t = self.lock();
            let task = t.tasks.get_mut(task_id).ok_or_else(|| ResourceError::task(task_id))?;
            if task.kind != ResourceKind::QpuMock {
                return Err(ResourceError::Conflict(format!("task {task_id} is not batched")));
            }
            match task.record.state {
                TaskState::Cancelled => return Err(ResourceError::Cancelled),
                TaskState::Failed => {
                    return Err(ResourceError::Failed(task.record.error.clone().unwrap_or_default()))
                }
                TaskState::Completed => return Err(ResourceError::Conflict(format!("task {task_id} is complete"))),
                _ => {}
            }
            if task.batch_in_flight {
                return Err(ResourceError::Conflict(format!("task {task_id} already has a batch executing")));
            }
            if task.record.batches_executed != batch_index {
                return Err(ResourceError::Conflict(format!(
                    "task {task_id} expects batch {}, got {batch_index}",
                    task.record.batches_executed
                )));
            }
            task.batch_in_flight = true;
            task.record.state = TaskState::Running;
            (
                task.record.payload.clone(),
                task.record.target.clone(),
                task.record.seed,
                task.prepared.clone(),
            )
        };
        self.inner.changed.notify_all();

        let opts = EmulatorOptions {
            policy: self.inner.policy,
            ..EmulatorOptions::default()
        };
        let state = match prepared {
            Some(s) => Ok((s, None)),
            None => prepare(&payload, Backend::ProductMock, &target, &opts).map(|(s, d)| (Arc::new(s), Some(d))),
        };
        let sampled = state.and_then(|(s, drift)| {
            s.sample(shots, batch_seed(seed, batch_index), opts.policy)
                .map(|c| (s, drift, c))
        });

        let (outcome, events) = {
            let mut t = self.lock();
            let task = t.tasks.get_mut(task_id).ok_or_else(|| ResourceError::task(task_id))?;
            task.batch_in_flight = false;
            match sampled {
                Err(e) => {
                    if !task.record.state.is_terminal() {
                        task.record.state = TaskState::Failed;
                        task.record.error = Some(e.to_string());
                    }
                    let ev = event_of(task);
                    (Err(ResourceError::Failed(e.to_string())), vec![ev])
                }
                Ok((state, drift, counts)) => {
                    if let Some(d) = drift {
                        task.record.norm_drift = d;
                    }
                    task.prepared = Some(state);
                    let busy = target.shot_seconds(shots);
                    task.record.batches_executed += 1;
                    task.record.busy_seconds += busy;
                    let mut events = vec![];
                    if task.record.state == TaskState::Running {
                        task.record.counts.merge(&counts);
                    }
                    if task.cancel_requested && task.record.state == TaskState::Running {
                        cancel_now(task);
                        events.push(event_of(task));
                    }
                    let outcome = BatchOutcome {
                        batch_index,
                        counts,
                        busy_seconds: busy,
                        state_after: task.record.state,
                    };
                    (Ok(outcome), events)
                }
            }
        };
        self.notify(events);
        outcome
    }

    /// Marks a QPU-mock task COMPLETED with the counts of all its batches.
    pub fn task_complete(&self, task_id: &str) -> Result<RunResult, ResourceError> {
        let (result, event) = {
            let mut t = self.lock();
            let task = t.tasks.get_mut(task_id).ok_or_else(|| ResourceError::task(task_id))?;
            if task.record.state != TaskState::Running || task.batch_in_flight {
                return Err(ResourceError::Conflict(format!(
                    "task {task_id} is {} and cannot complete",
                    task.record.state
                )));
            }
            task.record.state = TaskState::Completed;
            let result = RunResult {
                backend: backend_for(task.kind).unwrap_or(Backend::ProductMock),
                counts: task.record.counts.clone(),
                shots: task.record.counts.total(),
                calibration_timestamp: task.record.target.calibration_timestamp,
                norm_drift: task.record.norm_drift,
            };
            task.result = Some(result.clone());
            task.prepared = None;
            (result, event_of(task))
        };
        self.notify(vec![event]);
        Ok(result)
    }

    /// Marks a non-terminal task FAILED.
    pub fn task_fail(&self, task_id: &str, reason: &str) -> Result<(), ResourceError> {
        let event = {
            let mut t = self.lock();
            let task = t.tasks.get_mut(task_id).ok_or_else(|| ResourceError::task(task_id))?;
            if task.record.state.is_terminal() {
                return Ok(());
            }
            task.record.state = TaskState::Failed;
            task.record.error = Some(reason.to_string());
            task.cancel.cancel();
            event_of(task)
        };
        self.notify(vec![event]);
        Ok(())
    }

    /// Blocks until the task is terminal or `timeout` passes; returns the
    /// state seen last.
    pub fn task_wait(&self, task_id: &str, timeout: Duration) -> Result<TaskState, ResourceError> {
        let deadline = Instant::now() + timeout;
        let mut t = self.lock();
        loop {
            let state = t.tasks.get(task_id).ok_or_else(|| ResourceError::task(task_id))?.record.state;
            let left = deadline.saturating_duration_since(Instant::now());
            if state.is_terminal() || left.is_zero() {
                return Ok(state);
            }
            t = self
                .inner
                .changed
                .wait_timeout(t, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Recreates a token with a known value, e.g. when replaying a log.
    pub fn restore_token(&self, token: AcquisitionToken) -> Result<(), ResourceError> {
        let mut t = self.lock();
        let slot = t
            .resources
            .get_mut(&token.resource_id)
            .ok_or_else(|| ResourceError::resource(&token.resource_id))?;
        if slot.descriptor.kind.is_exclusive() {
            if slot.holder.as_ref().is_some_and(|h| h != &token.token) {
                return Err(ResourceError::Busy(token.resource_id));
            }
            slot.holder = Some(token.token.clone());
        }
        t.tokens.insert(token.token.clone(), token);
        Ok(())
    }

    /// Recreates a task from a record without re-validating it. Emulator
    /// tasks that were not finished are started again.
    pub fn task_restore(&self, record: TaskRecord) -> Result<TaskHandle, ResourceError> {
        let (handle, run) = {
            let mut t = self.lock();
            let kind = t
                .resources
                .get(&record.resource_id)
                .ok_or_else(|| ResourceError::resource(&record.resource_id))?
                .descriptor
                .kind;
            let mut record = record;
            let run = matches!(kind, ResourceKind::EmulatorSv | ResourceKind::EmulatorPs) && !record.state.is_terminal();
            if run {
                record.state = TaskState::Queued;
            }
            let result = (record.state == TaskState::Completed).then(|| RunResult {
                backend: backend_for(kind).unwrap_or(Backend::ProductMock),
                counts: record.counts.clone(),
                shots: record.counts.total(),
                calibration_timestamp: record.target.calibration_timestamp,
                norm_drift: record.norm_drift,
            });
            let handle = TaskHandle {
                task_id: record.task_id.clone(),
                state: record.state,
            };
            t.tasks.insert(
                record.task_id.clone(),
                Task {
                    record,
                    kind,
                    cancel: CancelFlag::new(),
                    cancel_requested: false,
                    batch_in_flight: false,
                    prepared: None,
                    result,
                },
            );
            (handle, run)
        };
        if run {
            let reg = self.clone();
            let id = handle.task_id.clone();
            std::thread::spawn(move || reg.run_emulator_task(&id));
        }
        Ok(handle)
    }
}

fn cancel_now(task: &mut Task) {
    task.record.state = TaskState::Cancelled;
    task.record.counts = BitstringCounts::default();
    task.prepared = None;
}

fn event_of(task: &Task) -> TaskEvent {
    TaskEvent {
        task_id: task.record.task_id.clone(),
        resource_id: task.record.resource_id.clone(),
        state: task.record.state,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AtomRegister, Pulse, ViolationCode};
    use std::f64::consts::PI;

    const CONFIG: &str = r#"{
      "resources": [
        {"resource_id": "qpu", "kind": "qpu-mock",
         "parameters": {"shot_rate": 1.0, "max_atoms": 10, "nominal_max_amplitude": 12.0, "drift_sigma": 0.01}},
        {"resource_id": "sv", "kind": "emulator-sv", "parameters": {"max_atoms": 12}},
        {"resource_id": "ps", "kind": "emulator-ps", "parameters": {"max_atoms": 50}},
        {"resource_id": "cloud", "kind": "cloud-stub"}
      ]
    }"#;

    fn registry(start: f64) -> Registry {
        load_registry(CONFIG, Vec::new(), Clock::virtual_at(start)).unwrap()
    }

    fn pi_pulse(shots: u64) -> PulseProgram {
        PulseProgram::new(AtomRegister::line(1, 5.0), vec![Pulse::square(1000, PI, 0.0)], shots)
    }

    const WAIT: Duration = Duration::from_secs(20);

    #[test]
    fn load_with_override() {
        let env = vec![("QMW_RESOURCE_QPU_SHOT_RATE".to_string(), "2.0".to_string())];
        let r = load_registry(CONFIG, env, Clock::virtual_at(0.0)).unwrap();
        assert_eq!(r.fetch_target("qpu").unwrap().shot_rate, 2.0);
        assert!(matches!(r.fetch_target("nope"), Err(ResourceError::NotFound { .. })));
    }

    #[test]
    fn exclusive_acquisition() {
        let r = registry(0.0);
        let a = r.acquire("sv").unwrap();
        let b = r.acquire("sv").unwrap();
        assert_ne!(a.token, b.token);
        let q = r.acquire("qpu").unwrap();
        assert!(matches!(r.acquire("qpu"), Err(ResourceError::Busy(_))));
        r.release(&q.token).unwrap();
        assert!(matches!(r.release(&q.token), Err(ResourceError::InvalidToken)));
        r.acquire("qpu").unwrap();
        assert!(matches!(r.acquire("missing"), Err(ResourceError::NotFound { .. })));
    }

    #[test]
    fn emulator_task_completes_with_rabi_counts() {
        let r = registry(50.0);
        let tok = r.acquire("sv").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(100)).unwrap();
        assert_eq!(h.state, TaskState::Queued);
        assert_eq!(r.task_wait(&h.task_id, WAIT).unwrap(), TaskState::Completed);
        let res = r.task_result(&h.task_id).unwrap();
        assert_eq!(res.counts, BitstringCounts::from([("1", 100)]));
        assert_eq!(res.calibration_timestamp, 50.0);
        assert_eq!(r.task_status(&h.task_id).unwrap(), TaskState::Completed);
        r.task_stop(&h.task_id).unwrap();
        assert_eq!(r.task_status(&h.task_id).unwrap(), TaskState::Completed);
    }

    #[test]
    fn emulator_targets_are_static() {
        let r = registry(0.0);
        let a = r.fetch_target("sv").unwrap();
        r.clock().advance(1e5);
        assert_eq!(r.fetch_target("sv").unwrap(), a);
    }

    #[test]
    fn drift_is_clamped_and_observation_independent() {
        let a = registry(0.0);
        let b = registry(0.0);
        let fresh = a.fetch_target("qpu").unwrap();
        assert_eq!(fresh.max_amplitude, fresh.nominal_max_amplitude);
        for _ in 0..600 {
            a.clock().advance(60.0);
            let t = a.fetch_target("qpu").unwrap();
            assert!((t.max_amplitude / 12.0 - 1.0).abs() <= 0.05 + 1e-12);
            assert_eq!(t.detuning_range, fresh.detuning_range);
        }
        b.clock().advance(600.0 * 60.0);
        assert_eq!(a.fetch_target("qpu").unwrap(), b.fetch_target("qpu").unwrap());
        assert_eq!(a.drift_ticks("qpu").unwrap(), 600);
    }

    #[test]
    fn drifted_target_rejects_program() {
        let r = registry(0.0);
        let tok = r.acquire("qpu").unwrap();
        r.set_calibration("qpu", 11.5).unwrap();
        let p = PulseProgram::new(AtomRegister::line(1, 5.0), vec![Pulse::square(1000, 11.8, 0.0)], 10);
        match r.task_start(&tok.token, p) {
            Err(ResourceError::Rejected(report)) => assert!(report.has(ViolationCode::AmplitudeExceedsMax)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(r.set_calibration("qpu", 20.0), Err(ResourceError::Safeguard { .. })));
        assert!(matches!(r.set_calibration("sv", 12.0), Err(ResourceError::Conflict(_))));
    }

    #[test]
    fn qpu_batches_and_completion() {
        let r = registry(0.0);
        let tok = r.acquire("qpu").unwrap();
        let h = r
            .task_start_with(&tok.token, pi_pulse(30), TaskSpec { task_id: Some("t1".into()), seed: 9 })
            .unwrap();
        assert_eq!(r.task_status("t1").unwrap(), TaskState::Queued);
        assert!(matches!(r.task_result("t1"), Err(ResourceError::NotReady { .. })));
        for i in 0..3 {
            let out = r.task_run_batch(&h.task_id, i, 10).unwrap();
            assert_eq!(out.counts, BitstringCounts::from([("1", 10)]));
            assert_eq!(out.busy_seconds, 10.0);
        }
        assert!(matches!(r.task_run_batch("t1", 7, 10), Err(ResourceError::Conflict(_))));
        let res = r.task_complete("t1").unwrap();
        assert_eq!(res.counts.total(), 30);
        assert_eq!(r.task_usage("t1").unwrap(), TaskUsage { batches_executed: 3, busy_seconds: 30.0 });
    }

    #[test]
    fn stop_between_batches_discards_counts() {
        let r = registry(0.0);
        let tok = r.acquire("qpu").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(30)).unwrap();
        r.task_run_batch(&h.task_id, 0, 10).unwrap();
        r.task_stop(&h.task_id).unwrap();
        assert_eq!(r.task_status(&h.task_id).unwrap(), TaskState::Cancelled);
        assert_eq!(r.task_record(&h.task_id).unwrap().counts.total(), 0);
        assert_eq!(r.task_usage(&h.task_id).unwrap().batches_executed, 1);
        assert!(matches!(r.task_run_batch(&h.task_id, 1, 10), Err(ResourceError::Cancelled)));
    }

    #[test]
    fn release_cancels_unfinished_tasks() {
        let r = registry(0.0);
        let tok = r.acquire("qpu").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(30)).unwrap();
        r.task_run_batch(&h.task_id, 0, 10).unwrap();
        assert_eq!(r.task_status(&h.task_id).unwrap(), TaskState::Running);
        r.release(&tok.token).unwrap();
        assert_eq!(r.task_status(&h.task_id).unwrap(), TaskState::Cancelled);
        assert!(matches!(r.task_start(&tok.token, pi_pulse(1)), Err(ResourceError::InvalidToken)));
    }

    #[test]
    fn cloud_stub_fails_not_supported() {
        let r = registry(0.0);
        let tok = r.acquire("cloud").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(1)).unwrap();
        assert_eq!(h.state, TaskState::Failed);
        match r.task_result(&h.task_id) {
            Err(ResourceError::Failed(reason)) => assert_eq!(reason, NOT_SUPPORTED),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn listener_sees_terminal_transitions() {
        let r = registry(0.0);
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        r.set_listener(Arc::new(move |e: &TaskEvent| sink.lock().unwrap().push(e.state)));
        let tok = r.acquire("ps").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(5)).unwrap();
        r.task_wait(&h.task_id, WAIT).unwrap();
        // the listener runs just after the state change becomes visible
        let deadline = Instant::now() + WAIT;
        while seen.lock().unwrap().is_empty() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        let q = r.acquire("qpu").unwrap();
        let h2 = r.task_start(&q.token, pi_pulse(5)).unwrap();
        r.task_stop(&h2.task_id).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![TaskState::Completed, TaskState::Cancelled]);
    }

    #[test]
    fn restore_round_trip() {
        let r = registry(0.0);
        let tok = r.acquire("qpu").unwrap();
        let h = r.task_start(&tok.token, pi_pulse(20)).unwrap();
        r.task_run_batch(&h.task_id, 0, 10).unwrap();
        let record = r.task_record(&h.task_id).unwrap();

        let fresh = registry(0.0);
        fresh.restore_token(tok.clone()).unwrap();
        fresh.task_restore(record.clone()).unwrap();
        assert_eq!(fresh.task_record(&h.task_id).unwrap(), record);
        let a = r.task_run_batch(&h.task_id, 1, 10).unwrap();
        let b = fresh.task_run_batch(&h.task_id, 1, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transitions() {
        use TaskState::*;
        assert!(Queued.can_move_to(Running));
        assert!(!Completed.can_move_to(Running));
        assert!(!Running.can_move_to(Queued));
        assert!(!Cancelled.can_move_to(Completed));
    }
}
