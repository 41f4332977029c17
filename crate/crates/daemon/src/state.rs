//! In-memory daemon state and the single function that mutates it.

use std::collections::BTreeMap;

use qmw_core::config::{ConfigDocument, ResourceKind};
use qmw_core::emulator::BitstringCounts;
use qmw_core::model::{DeviceTarget, PulseProgram};
use qmw_core::resource::TaskState;
use qmw_core::scheduler::{
    BatchCompletion, Hint, Job, JobPhase, Policy, Priority, Scheduler, SchedulerConfig, SchedulerError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventKind};

#[derive(Debug, Error, PartialEq)]
pub enum ApplyError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("no scheduler for resource {0}")]
    NoScheduler(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user: String,
    pub partition: String,
    pub priority: Priority,
    pub token_hash: String,
    pub created_at: f64,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub session_id: String,
    pub user: String,
    pub partition: String,
    pub priority: Priority,
    pub hint: Hint,
    pub resource_id: String,
    pub resource_kind: ResourceKind,
    pub program: PulseProgram,
    pub expected_qpu_seconds: Option<f64>,
    pub expected_cc_seconds: Option<f64>,
    pub seed: u64,
    /// Calibration snapshot the program was validated against.
    pub target: DeviceTarget,
    pub state: TaskState,
    pub submitted_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub batches_executed: u64,
    pub busy_seconds: f64,
    pub counts: BitstringCounts,
    pub norm_drift: Option<f64>,
    pub error: Option<String>,
    pub cancel_requested: bool,
}

/// What `apply` reports back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    Nothing,
    Batch(BatchCompletion),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub started_at: Option<f64>,
    pub last_ts: f64,
    pub drained: bool,
    pub sessions: BTreeMap<String, Session>,
    pub token_index: BTreeMap<String, String>,
    pub jobs: BTreeMap<String, JobRecord>,
    pub schedulers: BTreeMap<String, Scheduler>,
    /// Busy seconds per QPU resource since the log began.
    pub busy_seconds: BTreeMap<String, f64>,
    /// Start time of the batch currently executing, per QPU resource.
    pub in_flight_since: BTreeMap<String, f64>,
    pub events_applied: u64,
}

impl State {
    pub fn new(config: &ConfigDocument, policy: Policy, now: f64) -> Self {
        let mut schedulers = BTreeMap::new();
        let mut busy = BTreeMap::new();
        for r in config.resources.iter().filter(|r| r.kind == ResourceKind::QpuMock) {
            let cfg = SchedulerConfig {
                resource_id: r.resource_id.clone(),
                queues: config.queues.clone(),
                shares: config.shares.clone(),
                policy,
            };
            schedulers.insert(r.resource_id.clone(), Scheduler::new(cfg, now));
            busy.insert(r.resource_id.clone(), 0.0);
        }
        State {
            started_at: None,
            last_ts: now,
            drained: false,
            sessions: BTreeMap::new(),
            token_index: BTreeMap::new(),
            jobs: BTreeMap::new(),
            schedulers,
            busy_seconds: busy,
            in_flight_since: BTreeMap::new(),
            events_applied: 0,
        }
    }

    fn job_mut(&mut self, id: &str) -> Result<&mut JobRecord, ApplyError> {
        self.jobs.get_mut(id).ok_or_else(|| ApplyError::UnknownJob(id.to_string()))
    }

    fn scheduler_of(&mut self, job_id: &str) -> Result<Option<&mut Scheduler>, ApplyError> {
        let job = self.jobs.get(job_id).ok_or_else(|| ApplyError::UnknownJob(job_id.to_string()))?;
        if job.resource_kind != ResourceKind::QpuMock {
            return Ok(None);
        }
        let rid = job.resource_id.clone();
        self.schedulers
            .get_mut(&rid)
            .map(Some)
            .ok_or(ApplyError::NoScheduler(rid))
    }

    fn finish(&mut self, job_id: &str, state: TaskState, ts: f64) -> Result<(), ApplyError> {
        let job = self.job_mut(job_id)?;
        job.state = state;
        job.finished_at = Some(ts);
        if state != TaskState::Completed {
            job.counts = BitstringCounts::default();
        }
        if let Some(s) = self.scheduler_of(job_id)? {
            if s.job(job_id).is_some_and(|e| !e.phase.is_terminal()) {
                s.cancel(job_id)?;
            }
            if s.in_flight().is_none_or(|(j, _)| j != job_id) {
                s.prune();
            }
        }
        Ok(())
    }

    /// Applies one event. Live operation and log replay both go through here.
    pub fn apply(&mut self, event: &Event) -> Result<Applied, ApplyError> {
        let ts = event.ts;
        let out = match &event.kind {
            EventKind::Started {} => {
                if self.started_at.is_none() {
                    self.started_at = Some(ts);
                    // share windows open at the first start, whenever the
                    // state object itself was built
                    for sched in self.schedulers.values_mut() {
                        *sched = Scheduler::new(sched.config().clone(), ts);
                    }
                } else {
                    // a restart: whatever was executing died with the process
                    self.revert_in_flight();
                }
                Applied::Nothing
            }
            EventKind::SessionOpened {
                session_id,
                user,
                partition,
                priority,
                token_hash,
            } => {
                if self.sessions.contains_key(session_id) || self.token_index.contains_key(token_hash) {
                    return Err(ApplyError::Duplicate(format!("session {session_id}")));
                }
                self.token_index.insert(token_hash.clone(), session_id.clone());
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id: session_id.clone(),
                        user: user.clone(),
                        partition: partition.clone(),
                        priority: *priority,
                        token_hash: token_hash.clone(),
                        created_at: ts,
                        state: SessionState::Active,
                    },
                );
                Applied::Nothing
            }
            EventKind::SessionClosed { session_id } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| ApplyError::UnknownSession(session_id.clone()))?;
                s.state = SessionState::Closed;
                Applied::Nothing
            }
            EventKind::JobSubmitted {
                job_id,
                session_id,
                resource_id,
                resource_kind,
                hint,
                program,
                expected_qpu_seconds,
                expected_cc_seconds,
                seed,
                target,
            } => {
                if self.jobs.contains_key(job_id) {
                    return Err(ApplyError::Duplicate(format!("job {job_id}")));
                }
                let session = self
                    .sessions
                    .get(session_id)
                    .ok_or_else(|| ApplyError::UnknownSession(session_id.clone()))?;
                let record = JobRecord {
                    job_id: job_id.clone(),
                    session_id: session_id.clone(),
                    user: session.user.clone(),
                    partition: session.partition.clone(),
                    priority: session.priority,
                    hint: *hint,
                    resource_id: resource_id.clone(),
                    resource_kind: *resource_kind,
                    program: program.clone(),
                    expected_qpu_seconds: *expected_qpu_seconds,
                    expected_cc_seconds: *expected_cc_seconds,
                    seed: *seed,
                    target: target.clone(),
                    state: TaskState::Queued,
                    submitted_at: ts,
                    started_at: None,
                    finished_at: None,
                    batches_executed: 0,
                    busy_seconds: 0.0,
                    counts: BitstringCounts::default(),
                    norm_drift: None,
                    error: None,
                    cancel_requested: false,
                };
                if *resource_kind == ResourceKind::QpuMock {
                    let sched = self
                        .schedulers
                        .get_mut(resource_id)
                        .ok_or_else(|| ApplyError::NoScheduler(resource_id.clone()))?;
                    sched.enqueue(Job {
                        job_id: job_id.clone(),
                        session_id: session_id.clone(),
                        user: record.user.clone(),
                        priority: record.priority,
                        hint: *hint,
                        shots: program.shots,
                        resource_id: resource_id.clone(),
                        expected_qpu_seconds: *expected_qpu_seconds,
                        expected_cc_seconds: *expected_cc_seconds,
                        enqueue_time: ts,
                    })?;
                }
                self.jobs.insert(job_id.clone(), record);
                Applied::Nothing
            }
            EventKind::BatchStarted { job_id, batch_index } => {
                let sched = self.scheduler_of(job_id)?.ok_or_else(|| ApplyError::NoScheduler(job_id.clone()))?;
                sched.batch_started(job_id, *batch_index, ts)?;
                let job = self.job_mut(job_id)?;
                job.state = TaskState::Running;
                job.started_at.get_or_insert(ts);
                let rid = job.resource_id.clone();
                self.in_flight_since.insert(rid, ts);
                Applied::Nothing
            }
            EventKind::BatchCompleted {
                job_id,
                batch_index,
                busy_seconds,
                counts,
            } => {
                let sched = self.scheduler_of(job_id)?.ok_or_else(|| ApplyError::NoScheduler(job_id.clone()))?;
                let done = sched.batch_completed(job_id, *batch_index, ts, *busy_seconds)?;
                let job = self.job_mut(job_id)?;
                job.batches_executed += 1;
                job.busy_seconds += busy_seconds;
                if !job.cancel_requested {
                    job.counts.merge(counts);
                }
                let rid = job.resource_id.clone();
                // the resource was occupied for the whole interval, not just
                // the nominal shot time
                let since = self.in_flight_since.remove(&rid).unwrap_or(ts - busy_seconds);
                *self.busy_seconds.entry(rid).or_insert(0.0) += (ts - since).max(*busy_seconds);
                Applied::Batch(done)
            }
            EventKind::BatchAborted { job_id } => {
                let sched = self.scheduler_of(job_id)?.ok_or_else(|| ApplyError::NoScheduler(job_id.clone()))?;
                sched.batch_aborted(job_id)?;
                let rid = self.jobs[job_id].resource_id.clone();
                self.in_flight_since.remove(&rid);
                Applied::Nothing
            }
            EventKind::CancelRequested { job_id } => {
                if let Some(s) = self.scheduler_of(job_id)? {
                    s.cancel(job_id)?;
                }
                self.job_mut(job_id)?.cancel_requested = true;
                Applied::Nothing
            }
            EventKind::JobCompleted {
                job_id,
                counts,
                norm_drift,
            } => {
                let job = self.job_mut(job_id)?;
                job.counts = counts.clone();
                job.norm_drift = *norm_drift;
                if job.resource_kind != ResourceKind::QpuMock {
                    job.started_at.get_or_insert(job.submitted_at);
                }
                self.finish(job_id, TaskState::Completed, ts)?;
                Applied::Nothing
            }
            EventKind::JobFailed { job_id, reason } => {
                self.job_mut(job_id)?.error = Some(reason.clone());
                self.finish(job_id, TaskState::Failed, ts)?;
                Applied::Nothing
            }
            EventKind::JobCancelled { job_id } => {
                self.finish(job_id, TaskState::Cancelled, ts)?;
                Applied::Nothing
            }
            EventKind::Drained {} => {
                self.drained = true;
                Applied::Nothing
            }
            EventKind::Resumed {} => {
                self.drained = false;
                Applied::Nothing
            }
            EventKind::CalibrationSet { .. } => Applied::Nothing,
        };
        self.last_ts = self.last_ts.max(ts);
        self.events_applied += 1;
        Ok(out)
    }

    /// Reverts batches that were executing when the log ended.
    pub fn revert_in_flight(&mut self) {
        for (rid, sched) in self.schedulers.iter_mut() {
            if let Some((job, _)) = sched.in_flight().map(|(j, i)| (j.to_string(), i)) {
                let _ = sched.batch_aborted(&job);
                self.in_flight_since.remove(rid);
            }
        }
    }

    /// Jobs whose scheduler entry is terminal while the job record is not,
    /// i.e. the follow-up event was lost.
    pub fn dangling_jobs(&self) -> Vec<(String, JobPhase)> {
        self.jobs
            .values()
            .filter(|j| !j.state.is_terminal() && j.resource_kind == ResourceKind::QpuMock)
            .filter_map(|j| {
                let phase = self.schedulers.get(&j.resource_id)?.job(&j.job_id)?.phase;
                phase.is_terminal().then(|| (j.job_id.clone(), phase))
            })
            .collect()
    }

    /// The part of the state that must survive a restart: sessions,
    /// unfinished jobs and the schedulers (queues and share ledgers), with
    /// any executing batch reverted.
    pub fn durable_view(&self) -> serde_json::Value {
        let mut s = self.clone();
        s.revert_in_flight();
        let live: BTreeMap<&String, &JobRecord> = s.jobs.iter().filter(|(_, j)| !j.state.is_terminal()).collect();
        serde_json::json!({
            "sessions": s.sessions,
            "jobs": live,
            "schedulers": s.schedulers,
            "busy_seconds": s.busy_seconds,
            "drained": s.drained,
        })
    }

    /// Rebuilds the state from a complete event sequence.
    pub fn replay(config: &ConfigDocument, policy: Policy, events: &[Event]) -> Result<Self, ApplyError> {
        let mut st = State::new(config, policy, events.first().map_or(0.0, |e| e.ts));
        for e in events {
            st.apply(e)?;
        }
        Ok(st)
    }

    pub fn queued_jobs(&self, resource_id: &str) -> usize {
        self.jobs
            .values()
            .filter(|j| j.resource_id == resource_id && j.state == TaskState::Queued)
            .count()
    }
}
