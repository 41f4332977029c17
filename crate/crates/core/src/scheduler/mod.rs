//! Second-level QPU scheduler.
//!
//! Jobs are split into shot batches and the QPU runs one batch at a time.
//! Every batch boundary is a scheduling point, so a production job waits at
//! most one lower-class batch; development jobs run in single-shot batches
//! and test jobs in small ones to keep that wait short.
//!
//! At a boundary the scheduler:
//! 1. keeps jobs with a READY batch (arrived, not cancelled, not inside a
//!    declared classical gap),
//! 2. keeps only the highest priority class present,
//! 3. orders by share deficit (allocated fraction minus consumed fraction of
//!    busy time, largest first), then enqueue time, then job id,
//! 4. re-selects the previous job instead if it is a `qc-heavy` job of the
//!    surviving class with batches left.
//!
//! Priority always dominates shares; shares only order jobs within a class.

mod ledger;
mod sim;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::ShareLedger;
pub use sim::{
    simulate_sweep, simulate_workload, simulate_workload_traced, Arrival, BatchRecord, ClassWait, Scenario,
    ScenarioSettings, SimOutcome, SimReport,
};

use crate::config::{QueueConfig, ShareConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("unknown resource {0:?}")]
    UnknownResource(String),
    #[error("share configuration: {0}")]
    ShareConfig(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("duplicate job id {0:?}")]
    DuplicateJob(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Production,
    Test,
    Development,
}

impl Priority {
    pub const ALL: [Priority; 3] = [Priority::Production, Priority::Test, Priority::Development];

    /// Larger is more urgent.
    pub fn rank(self) -> u8 {
        match self {
            Priority::Production => 2,
            Priority::Test => 1,
            Priority::Development => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Priority::Production => "production",
            Priority::Test => "test",
            Priority::Development => "development",
        }
    }
}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Workload pattern declared by the submitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hint {
    /// QPU-dominant: keep the QPU on this job once it has it.
    QcHeavy,
    /// Classical-dominant: not READY for `expected_cc_seconds` after each
    /// batch, leaving the QPU to other jobs.
    CcHeavy,
    /// Accepted and recorded; currently scheduled like `none`.
    QcBalanced,
    #[default]
    None,
}

impl Hint {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Hint::QcHeavy => "qc-heavy",
            Hint::CcHeavy => "cc-heavy",
            Hint::QcBalanced => "qc-balanced",
            Hint::None => "none",
        }
    }
}

impl fmt::Display for Hint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A schedulable unit. The pulse payload itself stays with the caller; the
/// scheduler only needs its shot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub session_id: String,
    pub user: String,
    pub priority: Priority,
    pub hint: Hint,
    pub shots: u64,
    pub resource_id: String,
    pub expected_qpu_seconds: Option<f64>,
    pub expected_cc_seconds: Option<f64>,
    pub enqueue_time: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<u64>,
}

impl BatchPlan {
    /// Production: batches of up to `max_batch` (one batch when shots fit);
    /// test: up to `test_batch`; development: single shots.
    pub fn new(priority: Priority, shots: u64, queues: &QueueConfig) -> Self {
        let size = match priority {
            Priority::Production => queues.max_batch,
            Priority::Test => queues.test_batch.min(queues.max_batch),
            Priority::Development => 1,
        }
        .max(1);
        let mut batches = vec![size; (shots / size) as usize];
        if shots % size != 0 {
            batches.push(shots % size);
        }
        BatchPlan { batches }
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.batches.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Re-decide at every batch boundary.
    #[default]
    Interleave,
    /// Baseline: a job holds the QPU from its first batch to its last,
    /// including its classical gaps.
    Sequential,
}

impl Policy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "interleave" => Some(Policy::Interleave),
            "sequential" => Some(Policy::Sequential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub resource_id: String,
    pub queues: QueueConfig,
    pub shares: ShareConfig,
    pub policy: Policy,
}

impl SchedulerConfig {
    pub fn new(resource_id: impl Into<String>) -> Self {
        SchedulerConfig {
            resource_id: resource_id.into(),
            queues: QueueConfig::default(),
            shares: ShareConfig::default(),
            policy: Policy::Interleave,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Run {
        job_id: String,
        batch_index: usize,
        shots: u64,
    },
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobPhase {
    /// No batch started yet.
    Queued,
    /// At least one batch started.
    Running,
    Completed,
    Cancelled,
}

impl JobPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobPhase::Completed | JobPhase::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEntry {
    pub job: Job,
    pub plan: BatchPlan,
    pub next_batch: usize,
    /// Earliest time the next batch may start.
    pub ready_at: f64,
    pub phase: JobPhase,
    pub cancel_requested: bool,
    pub first_start: Option<f64>,
    pub busy_seconds: f64,
}

impl JobEntry {
    pub fn remaining_batches(&self) -> usize {
        self.plan.len() - self.next_batch
    }
}

/// One row of the ordered queue snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub job_id: String,
    pub user: String,
    pub priority: Priority,
    pub hint: Hint,
    pub deficit: f64,
    pub enqueue_time: f64,
    pub ready: bool,
    pub remaining_batches: usize,
    pub phase: JobPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CancelOutcome {
    /// No batch in flight; the job is cancelled now.
    Immediate,
    /// A batch is executing; the job stops when it completes.
    AtBatchBoundary,
    /// Already completed or cancelled.
    AlreadyTerminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCompletion {
    pub job_id: String,
    pub batch_index: usize,
    /// Terminal phase reached with this batch, if any.
    pub finished: Option<JobPhase>,
}

/// Full scheduler state; serializable so snapshots can be compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    config: SchedulerConfig,
    jobs: BTreeMap<String, JobEntry>,
    ledger: ShareLedger,
    last_job: Option<String>,
    in_flight: Option<(String, usize)>,
    held_by: Option<String>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, now: f64) -> Self {
        let ledger = ShareLedger::new(&config.shares, config.queues.window_length, now);
        Scheduler {
            config,
            jobs: BTreeMap::new(),
            ledger,
            last_job: None,
            in_flight: None,
            held_by: None,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn ledger(&self) -> &ShareLedger {
        &self.ledger
    }

    pub fn job(&self, job_id: &str) -> Option<&JobEntry> {
        self.jobs.get(job_id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobEntry> {
        self.jobs.values()
    }

    pub fn in_flight(&self) -> Option<(&str, usize)> {
        self.in_flight.as_ref().map(|(j, i)| (j.as_str(), *i))
    }

    /// Adds a job at the back of its class and computes its batch plan.
    pub fn enqueue(&mut self, job: Job) -> Result<String, SchedulerError> {
        if job.resource_id != self.config.resource_id {
            return Err(SchedulerError::UnknownResource(job.resource_id));
        }
        if self.ledger.enabled() && !self.ledger.has_user(&job.user) {
            return Err(SchedulerError::ShareConfig(format!(
                "user {:?} has no timeshare allocation",
                job.user
            )));
        }
        for v in [job.expected_qpu_seconds, job.expected_cc_seconds].into_iter().flatten() {
            if !(v >= 0.0) {
                return Err(SchedulerError::Domain("expected times must be non-negative".into()));
            }
        }
        if job.shots == 0 {
            return Err(SchedulerError::Domain("job has no shots".into()));
        }
        if self.jobs.contains_key(&job.job_id) {
            return Err(SchedulerError::DuplicateJob(job.job_id));
        }
        let plan = BatchPlan::new(job.priority, job.shots, &self.config.queues);
        let id = job.job_id.clone();
        self.jobs.insert(
            id.clone(),
            JobEntry {
                ready_at: job.enqueue_time,
                job,
                plan,
                next_batch: 0,
                phase: JobPhase::Queued,
                cancel_requested: false,
                first_start: None,
                busy_seconds: 0.0,
            },
        );
        Ok(id)
    }

    fn is_active(e: &JobEntry) -> bool {
        !e.phase.is_terminal() && !e.cancel_requested && e.remaining_batches() > 0
    }

    fn is_ready(&self, e: &JobEntry, now: f64) -> bool {
        Self::is_active(e)
            && e.ready_at <= now
            && self.in_flight.as_ref().is_none_or(|(j, _)| j != &e.job.job_id)
    }

    /// Every live job in decision order (priority, deficit, enqueue time,
    /// id), READY or not. The contiguity rule is not applied here.
    pub fn ordered_queue(&self, now: f64) -> Vec<QueueEntry> {
        let mut rows: Vec<QueueEntry> = self
            .jobs
            .values()
            .filter(|e| Self::is_active(e))
            .map(|e| QueueEntry {
                job_id: e.job.job_id.clone(),
                user: e.job.user.clone(),
                priority: e.job.priority,
                hint: e.job.hint,
                deficit: self.ledger.deficit(&e.job.user),
                enqueue_time: e.job.enqueue_time,
                ready: self.is_ready(e, now),
                remaining_batches: e.remaining_batches(),
                phase: e.phase,
            })
            .collect();
        rows.sort_by(|a, b| {
            b.priority
                .cmp(&a.priority)
                .then(b.deficit.total_cmp(&a.deficit))
                .then(a.enqueue_time.total_cmp(&b.enqueue_time))
                .then(a.job_id.cmp(&b.job_id))
        });
        rows
    }

    fn run(&self, job_id: &str) -> Decision {
        let e = &self.jobs[job_id];
        Decision::Run {
            job_id: job_id.to_string(),
            batch_index: e.next_batch,
            shots: e.plan.batches[e.next_batch],
        }
    }

    /// Chooses the next batch for a free QPU.
    pub fn next_decision(&self, now: f64) -> Decision {
        if self.in_flight.is_some() {
            return Decision::Idle;
        }
        if self.config.policy == Policy::Sequential {
            if let Some(held) = &self.held_by {
                return match self.jobs.get(held) {
                    Some(e) if self.is_ready(e, now) => self.run(held),
                    Some(e) if Self::is_active(e) => Decision::Idle,
                    _ => self.first_ready(now),
                };
            }
        }
        self.first_ready(now)
    }

    fn first_ready(&self, now: f64) -> Decision {
        let ready: Vec<QueueEntry> = self.ordered_queue(now).into_iter().filter(|r| r.ready).collect();
        let Some(top) = ready.first() else {
            return Decision::Idle;
        };
        if let Some(last) = &self.last_job {
            if let Some(e) = self.jobs.get(last) {
                if e.job.hint == Hint::QcHeavy
                    && e.job.priority == top.priority
                    && self.is_ready(e, now)
                {
                    return self.run(last);
                }
            }
        }
        self.run(&top.job_id)
    }

    /// Earliest future time a currently gapped job becomes READY.
    pub fn next_ready_time(&self, now: f64) -> Option<f64> {
        self.jobs
            .values()
            .filter(|e| Self::is_active(e) && e.ready_at > now)
            .map(|e| e.ready_at)
            .min_by(f64::total_cmp)
    }

    pub fn batch_started(&mut self, job_id: &str, batch_index: usize, now: f64) -> Result<(), SchedulerError> {
        if let Some((j, i)) = &self.in_flight {
            return Err(SchedulerError::Conflict(format!("batch {i} of {j} is still executing")));
        }
        let e = self
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        if e.phase.is_terminal() || e.next_batch != batch_index || batch_index >= e.plan.len() {
            return Err(SchedulerError::Conflict(format!(
                "job {job_id} cannot start batch {batch_index}"
            )));
        }
        e.phase = JobPhase::Running;
        e.first_start.get_or_insert(now);
        self.in_flight = Some((job_id.to_string(), batch_index));
        if self.config.policy == Policy::Sequential {
            self.held_by = Some(job_id.to_string());
        }
        Ok(())
    }

    /// Records the end of the in-flight batch and charges `busy_seconds` to
    /// the job's user.
    pub fn batch_completed(
        &mut self,
        job_id: &str,
        batch_index: usize,
        now: f64,
        busy_seconds: f64,
    ) -> Result<BatchCompletion, SchedulerError> {
        match &self.in_flight {
            Some((j, i)) if j == job_id && *i == batch_index => {}
            _ => {
                return Err(SchedulerError::Conflict(format!(
                    "batch {batch_index} of {job_id} is not executing"
                )))
            }
        }
        self.in_flight = None;
        let user = self.jobs[job_id].job.user.clone();
        self.ledger.record_usage(&user, busy_seconds, now)?;
        let e = self.jobs.get_mut(job_id).expect("in-flight job exists");
        e.next_batch += 1;
        e.busy_seconds += busy_seconds;
        self.last_job = Some(job_id.to_string());
        let finished = if e.cancel_requested {
            Some(JobPhase::Cancelled)
        } else if e.remaining_batches() == 0 {
            Some(JobPhase::Completed)
        } else {
            if e.job.hint == Hint::CcHeavy {
                e.ready_at = now + e.job.expected_cc_seconds.unwrap_or(0.0);
            }
            None
        };
        if let Some(phase) = finished {
            e.phase = phase;
            if self.held_by.as_deref() == Some(job_id) {
                self.held_by = None;
            }
        }
        Ok(BatchCompletion {
            job_id: job_id.to_string(),
            batch_index,
            finished,
        })
    }

    /// Abandons the in-flight batch without charging it (resource released).
    pub fn batch_aborted(&mut self, job_id: &str) -> Result<(), SchedulerError> {
        match &self.in_flight {
            Some((j, _)) if j == job_id => {
                self.in_flight = None;
                Ok(())
            }
            _ => Err(SchedulerError::Conflict(format!("{job_id} has no batch executing"))),
        }
    }

    pub fn cancel(&mut self, job_id: &str) -> Result<CancelOutcome, SchedulerError> {
        let in_flight = self.in_flight.as_ref().map(|(j, _)| j.clone());
        let e = self
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        if e.phase.is_terminal() {
            return Ok(CancelOutcome::AlreadyTerminal);
        }
        if in_flight.as_deref() == Some(job_id) {
            e.cancel_requested = true;
            return Ok(CancelOutcome::AtBatchBoundary);
        }
        e.phase = JobPhase::Cancelled;
        if self.held_by.as_deref() == Some(job_id) {
            self.held_by = None;
        }
        Ok(CancelOutcome::Immediate)
    }

    /// Overrides when a job's next batch may start.
    pub fn set_ready_at(&mut self, job_id: &str, time: f64) -> Result<(), SchedulerError> {
        let e = self
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        e.ready_at = time;
        Ok(())
    }

    /// Drops terminal jobs from the table.
    pub fn prune(&mut self) {
        self.jobs.retain(|_, e| !e.phase.is_terminal());
    }

    /// Jobs with no batch started yet, for the given class.
    pub fn queued_count(&self, priority: Priority) -> usize {
        self.jobs
            .values()
            .filter(|e| e.phase == JobPhase::Queued && e.job.priority == priority)
            .count()
    }

    pub fn record_usage(&mut self, user: &str, busy_seconds: f64, now: f64) -> Result<(), SchedulerError> {
        self.ledger.record_usage(user, busy_seconds, now)
    }
}

/// Busy fraction of `window`, given busy intervals `(start, end)`.
pub fn utilization(busy: &[(f64, f64)], window: (f64, f64)) -> Result<f64, SchedulerError> {
    let (w0, w1) = window;
    if !(w1 > w0) {
        return Err(SchedulerError::Domain(format!("empty window [{w0}, {w1}]")));
    }
    let covered: f64 = busy
        .iter()
        .map(|&(a, b)| (b.min(w1) - a.max(w0)).max(0.0))
        .sum();
    Ok((covered / (w1 - w0)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn job(id: &str, user: &str, priority: Priority, shots: u64, t: f64) -> Job {
        Job {
            job_id: id.into(),
            session_id: "s".into(),
            user: user.into(),
            priority,
            hint: Hint::None,
            shots,
            resource_id: "qpu".into(),
            expected_qpu_seconds: None,
            expected_cc_seconds: None,
            enqueue_time: t,
        }
    }

    fn sched(allocs: &[(&str, u32)]) -> Scheduler {
        let mut cfg = SchedulerConfig::new("qpu");
        cfg.shares.allocations = allocs.iter().map(|(u, a)| (u.to_string(), *a)).collect();
        Scheduler::new(cfg, 0.0)
    }

    fn run_one(s: &mut Scheduler, now: f64) -> Option<String> {
        match s.next_decision(now) {
            Decision::Run { job_id, batch_index, shots } => {
                s.batch_started(&job_id, batch_index, now).unwrap();
                s.batch_completed(&job_id, batch_index, now + shots as f64, shots as f64).unwrap();
                Some(job_id)
            }
            Decision::Idle => None,
        }
    }

    #[test]
    fn batch_plans_follow_class_rules() {
        let q = QueueConfig::default();
        assert_eq!(BatchPlan::new(Priority::Development, 5, &q).batches, vec![1; 5]);
        assert_eq!(BatchPlan::new(Priority::Production, 1000, &q).batches, vec![1000]);
        assert_eq!(BatchPlan::new(Priority::Production, 2500, &q).batches, vec![1000, 1000, 500]);
        assert_eq!(BatchPlan::new(Priority::Test, 25, &q).batches, vec![10, 10, 5]);
        for p in Priority::ALL {
            for shots in [1, 7, 10, 999, 1001] {
                let plan = BatchPlan::new(p, shots, &q);
                assert_eq!(plan.total(), shots);
                assert!(plan.batches.iter().all(|&b| b > 0));
            }
        }
    }

    #[test]
    fn fifo_within_class() {
        let mut s = sched(&[]);
        s.enqueue(job("b", "u", Priority::Test, 10, 0.0)).unwrap();
        s.enqueue(job("a", "u", Priority::Test, 10, 1.0)).unwrap();
        assert_eq!(run_one(&mut s, 2.0).as_deref(), Some("b"));
        assert_eq!(run_one(&mut s, 12.0).as_deref(), Some("a"));
        assert_eq!(run_one(&mut s, 22.0), None);
    }

    #[test]
    fn production_preempts_at_boundary() {
        let mut s = sched(&[]);
        s.enqueue(job("dev", "u", Priority::Development, 5, 0.0)).unwrap();
        assert_eq!(run_one(&mut s, 0.0).as_deref(), Some("dev"));
        s.enqueue(job("prod", "u", Priority::Production, 3, 0.5)).unwrap();
        assert_eq!(s.job("dev").unwrap().phase, JobPhase::Running);
        assert_eq!(run_one(&mut s, 1.0).as_deref(), Some("prod"));
        assert_eq!(run_one(&mut s, 4.0).as_deref(), Some("dev"));
    }

    #[test]
    fn larger_deficit_runs_first() {
        let mut s = sched(&[("a", 5), ("b", 5)]);
        // a used 10% of busy time, b 90%: deficits 0.4 and -0.4.
        s.record_usage("a", 10.0, 0.0).unwrap();
        s.record_usage("b", 90.0, 0.0).unwrap();
        assert!((s.ledger().deficit("a") - 0.4).abs() < 1e-12);
        assert!((s.ledger().deficit("b") + 0.4).abs() < 1e-12);
        s.enqueue(job("jb", "b", Priority::Test, 10, 0.0)).unwrap();
        s.enqueue(job("ja", "a", Priority::Test, 10, 1.0)).unwrap();
        assert_eq!(run_one(&mut s, 2.0).as_deref(), Some("ja"));
    }

    #[test]
    fn qc_heavy_keeps_the_qpu() {
        let mut s = sched(&[("a", 5), ("b", 5)]);
        let mut heavy = job("heavy", "a", Priority::Test, 30, 0.0);
        heavy.hint = Hint::QcHeavy;
        s.enqueue(heavy).unwrap();
        s.enqueue(job("other", "b", Priority::Test, 30, 0.0)).unwrap();
        assert_eq!(run_one(&mut s, 0.0).as_deref(), Some("heavy"));
        // "other" now has the larger deficit but the heavy job keeps going.
        assert!(s.ledger().deficit("b") > s.ledger().deficit("a"));
        assert_eq!(run_one(&mut s, 10.0).as_deref(), Some("heavy"));
        assert_eq!(run_one(&mut s, 20.0).as_deref(), Some("heavy"));
        assert_eq!(run_one(&mut s, 30.0).as_deref(), Some("other"));
    }

    #[test]
    fn qc_heavy_yields_to_higher_class() {
        let mut s = sched(&[]);
        let mut heavy = job("heavy", "a", Priority::Test, 30, 0.0);
        heavy.hint = Hint::QcHeavy;
        s.enqueue(heavy).unwrap();
        assert_eq!(run_one(&mut s, 0.0).as_deref(), Some("heavy"));
        s.enqueue(job("p", "a", Priority::Production, 1, 5.0)).unwrap();
        assert_eq!(run_one(&mut s, 10.0).as_deref(), Some("p"));
    }

    #[test]
    fn cc_heavy_gap_is_backfilled() {
        let mut s = sched(&[]);
        let mut cc = job("cc", "a", Priority::Test, 20, 0.0);
        cc.hint = Hint::CcHeavy;
        cc.expected_cc_seconds = Some(30.0);
        s.enqueue(cc).unwrap();
        s.enqueue(job("other", "b", Priority::Development, 3, 0.0)).unwrap();
        assert_eq!(run_one(&mut s, 0.0).as_deref(), Some("cc"));
        // cc is in its classical gap until t = 40.
        assert_eq!(s.next_ready_time(10.0), Some(40.0));
        assert_eq!(run_one(&mut s, 10.0).as_deref(), Some("other"));
        assert_eq!(run_one(&mut s, 40.0).as_deref(), Some("cc"));
    }

    #[test]
    fn enqueue_errors() {
        let mut s = sched(&[("a", 10)]);
        let mut j = job("x", "a", Priority::Test, 1, 0.0);
        j.resource_id = "elsewhere".into();
        assert!(matches!(s.enqueue(j), Err(SchedulerError::UnknownResource(_))));
        assert!(matches!(
            s.enqueue(job("y", "stranger", Priority::Test, 1, 0.0)),
            Err(SchedulerError::ShareConfig(_))
        ));
        s.enqueue(job("z", "a", Priority::Test, 1, 0.0)).unwrap();
        assert!(matches!(
            s.enqueue(job("z", "a", Priority::Test, 1, 0.0)),
            Err(SchedulerError::DuplicateJob(_))
        ));
    }

    #[test]
    fn cancel_semantics() {
        let mut s = sched(&[]);
        s.enqueue(job("q", "u", Priority::Development, 3, 0.0)).unwrap();
        s.enqueue(job("r", "u", Priority::Development, 3, 0.0)).unwrap();
        assert_eq!(s.cancel("q").unwrap(), CancelOutcome::Immediate);
        assert_eq!(s.job("q").unwrap().phase, JobPhase::Cancelled);
        assert_eq!(s.cancel("q").unwrap(), CancelOutcome::AlreadyTerminal);

        let Decision::Run { job_id, batch_index, .. } = s.next_decision(0.0) else { panic!() };
        assert_eq!(job_id, "r");
        s.batch_started("r", batch_index, 0.0).unwrap();
        assert_eq!(s.cancel("r").unwrap(), CancelOutcome::AtBatchBoundary);
        let done = s.batch_completed("r", batch_index, 1.0, 1.0).unwrap();
        assert_eq!(done.finished, Some(JobPhase::Cancelled));
        assert_eq!(s.job("r").unwrap().next_batch, 1);
        assert_eq!(s.next_decision(1.0), Decision::Idle);
    }

    #[test]
    fn idle_only_without_ready_work() {
        let mut s = sched(&[]);
        assert_eq!(s.next_decision(0.0), Decision::Idle);
        s.enqueue(job("later", "u", Priority::Test, 1, 5.0)).unwrap();
        // enqueue_time in the future counts as not yet arrived
        assert_eq!(s.next_decision(1.0), Decision::Idle);
        assert!(matches!(s.next_decision(5.0), Decision::Run { .. }));
    }

    #[test]
    fn utilization_edges() {
        assert_eq!(utilization(&[], (0.0, 10.0)).unwrap(), 0.0);
        assert_eq!(utilization(&[(0.0, 4.0), (4.0, 10.0)], (0.0, 10.0)).unwrap(), 1.0);
        assert_eq!(utilization(&[(-5.0, 5.0)], (0.0, 10.0)).unwrap(), 0.5);
        assert!(matches!(utilization(&[], (3.0, 3.0)), Err(SchedulerError::Domain(_))));
    }

    #[test]
    fn hint_names() {
        assert_eq!(Hint::parse("qc-balanced"), Some(Hint::QcBalanced));
        assert_eq!(Hint::parse("turbo"), None);
        assert_eq!(serde_json::to_string(&Hint::CcHeavy).unwrap(), "\"cc-heavy\"");
        assert!(Priority::Production > Priority::Test && Priority::Test > Priority::Development);
    }
}
