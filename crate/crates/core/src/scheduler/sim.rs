//! Discrete-event simulation of the scheduler on a virtual clock.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{utilization, Decision, Hint, Job, Policy, Priority, Scheduler, SchedulerConfig, SchedulerError};
use crate::config::{QueueConfig, ShareConfig};
use crate::par::{map_range, ExecPolicy};

/// One job arrival in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrival {
    pub time: f64,
    pub priority: Priority,
    #[serde(default)]
    pub hint: Hint,
    pub shots: u64,
    pub user: String,
    #[serde(default)]
    pub expected_qpu_seconds: Option<f64>,
    #[serde(default)]
    pub expected_cc_seconds: Option<f64>,
    #[serde(default)]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSettings {
    /// Shots per second of the simulated QPU.
    pub shot_rate: f64,
    pub max_batch: u64,
    pub test_batch: u64,
    pub window_length: f64,
    /// Timeshare units per user; empty disables shares.
    pub shares: BTreeMap<String, u32>,
    /// Stop starting batches at this virtual time.
    pub horizon: Option<f64>,
    /// Relative spread of the classical gap of cc-heavy jobs, drawn from the
    /// seed. Zero makes the run independent of the seed.
    pub cc_jitter: f64,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        let q = QueueConfig::default();
        ScenarioSettings {
            shot_rate: 1.0,
            max_batch: q.max_batch,
            test_batch: q.test_batch,
            window_length: q.window_length,
            shares: BTreeMap::new(),
            horizon: None,
            cc_jitter: 0.0,
        }
    }
}

/// A workload: either a bare JSON list of arrivals or an object with
/// settings plus an `arrivals` list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub settings: ScenarioSettings,
    pub arrivals: Vec<Arrival>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioFile {
    List(Vec<Arrival>),
    Full(Scenario),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SchedulerError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SchedulerError::Scenario(e.to_string()))?;
        let parsed = if value.is_array() {
            serde_json::from_value(value).map(ScenarioFile::List)
        } else {
            serde_json::from_value::<Scenario>(value).map(ScenarioFile::Full)
        }
        .map_err(|e| SchedulerError::Scenario(e.to_string()))?;
        let scenario = match parsed {
            ScenarioFile::List(arrivals) => Scenario {
                settings: ScenarioSettings::default(),
                arrivals,
            },
            ScenarioFile::Full(s) => s,
        };
        scenario.check()?;
        Ok(scenario)
    }

    pub fn check(&self) -> Result<(), SchedulerError> {
        let s = &self.settings;
        let bad = |m: String| Err(SchedulerError::Scenario(m));
        if !(s.shot_rate > 0.0) || !s.shot_rate.is_finite() {
            return bad(format!("shot_rate must be positive, got {}", s.shot_rate));
        }
        if s.max_batch == 0 || s.test_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(s.window_length > 0.0) {
            return bad("window_length must be positive".into());
        }
        if !(s.cc_jitter >= 0.0 && s.cc_jitter <= 1.0) {
            return bad("cc_jitter must lie in [0, 1]".into());
        }
        if s.shares.values().sum::<u32>() > crate::config::SHARE_UNITS {
            return bad("share allocations exceed 10 units".into());
        }
        for (i, a) in self.arrivals.iter().enumerate() {
            if !a.time.is_finite() || a.time < 0.0 {
                return bad(format!("arrival {i}: time must be finite and non-negative"));
            }
            if a.shots == 0 {
                return bad(format!("arrival {i}: shots must be positive"));
            }
            for v in [a.expected_qpu_seconds, a.expected_cc_seconds].into_iter().flatten() {
                if !(v >= 0.0) || !v.is_finite() {
                    return bad(format!("arrival {i}: expected times must be non-negative"));
                }
            }
            if !s.shares.is_empty() && !s.shares.contains_key(&a.user) {
                return bad(format!("arrival {i}: user {:?} has no share allocation", a.user));
            }
        }
        Ok(())
    }
}

/// One executed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub job_id: String,
    pub user: String,
    pub priority: Priority,
    pub batch_index: usize,
    pub shots: u64,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWait {
    /// Jobs of this class that started.
    pub jobs: usize,
    /// Arrival to first batch, seconds.
    pub mean_wait: f64,
    pub max_wait: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub seed: u64,
    pub jobs: usize,
    pub jobs_completed: usize,
    pub batches: usize,
    pub busy_seconds: f64,
    pub elapsed_seconds: f64,
    pub utilization: f64,
    pub wait: BTreeMap<Priority, ClassWait>,
    pub user_busy_share: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutcome {
    pub report: SimReport,
    pub trace: Vec<BatchRecord>,
}

/// Runs many scenarios with one policy; scenario `k` uses seed `seed + k`.
/// Results are in input order regardless of `exec`.
pub fn simulate_sweep(
    scenarios: &[Scenario],
    policy: Policy,
    seed: u64,
    exec: ExecPolicy,
) -> Vec<Result<SimOutcome, SchedulerError>> {
    map_range(exec, scenarios.len(), |k| {
        simulate_workload_traced(&scenarios[k], policy, seed.wrapping_add(k as u64))
    })
}

pub fn simulate_workload(scenario: &Scenario, policy: Policy, seed: u64) -> Result<SimReport, SchedulerError> {
    simulate_workload_traced(scenario, policy, seed).map(|o| o.report)
}

/// Runs the scenario to completion (or its horizon) and returns the report
/// together with every executed batch.
pub fn simulate_workload_traced(
    scenario: &Scenario,
    policy: Policy,
    seed: u64,
) -> Result<SimOutcome, SchedulerError> {
    scenario.check()?;
    let s = &scenario.settings;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..scenario.arrivals.len()).collect();
    order.sort_by(|&a, &b| scenario.arrivals[a].time.total_cmp(&scenario.arrivals[b].time).then(a.cmp(&b)));
    let ids: Vec<String> = scenario
        .arrivals
        .iter()
        .enumerate()
        .map(|(i, a)| a.job_id.clone().unwrap_or_else(|| format!("job-{i:06}")))
        .collect();
    let mut arrival_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if arrival_of.insert(id, i).is_some() {
            return Err(SchedulerError::Scenario(format!("duplicate job id {id:?}")));
        }
    }

    let start_time = order.first().map(|&i| scenario.arrivals[i].time).unwrap_or(0.0);
    let config = SchedulerConfig {
        resource_id: "sim".into(),
        queues: QueueConfig {
            max_batch: s.max_batch,
            test_batch: s.test_batch,
            window_length: s.window_length,
            ..QueueConfig::default()
        },
        shares: ShareConfig {
            enabled: None,
            allocations: s.shares.clone(),
        },
        policy,
    };
    let mut sched = Scheduler::new(config, start_time);
    let mut trace = Vec::new();
    let mut first_start: BTreeMap<String, f64> = BTreeMap::new();
    let mut completed = 0usize;
    let mut next_arrival = 0usize;
    let mut t = start_time;

    loop {
        while next_arrival < order.len() && scenario.arrivals[order[next_arrival]].time <= t {
            let i = order[next_arrival];
            let a = &scenario.arrivals[i];
            sched.enqueue(Job {
                job_id: ids[i].clone(),
                session_id: a.user.clone(),
                user: a.user.clone(),
                priority: a.priority,
                hint: a.hint,
                shots: a.shots,
                resource_id: "sim".into(),
                expected_qpu_seconds: a.expected_qpu_seconds,
                expected_cc_seconds: a.expected_cc_seconds,
                enqueue_time: a.time,
            })?;
            next_arrival += 1;
        }
        if s.horizon.is_some_and(|h| t >= h) {
            break;
        }
        match sched.next_decision(t) {
            Decision::Run {
                job_id,
                batch_index,
                shots,
            } => {
                let duration = shots as f64 / s.shot_rate;
                sched.batch_started(&job_id, batch_index, t)?;
                first_start.entry(job_id.clone()).or_insert(t);
                let end = t + duration;
                let done = sched.batch_completed(&job_id, batch_index, end, duration)?;
                let entry = sched.job(&job_id).expect("job known");
                trace.push(BatchRecord {
                    job_id: job_id.clone(),
                    user: entry.job.user.clone(),
                    priority: entry.job.priority,
                    batch_index,
                    shots,
                    start: t,
                    end,
                });
                if done.finished.is_some() {
                    completed += 1;
                    sched.prune();
                } else if entry.job.hint == Hint::CcHeavy && s.cc_jitter > 0.0 {
                    let gap = entry.job.expected_cc_seconds.unwrap_or(0.0);
                    let factor = 1.0 + s.cc_jitter * rng.random_range(-1.0..=1.0);
                    sched.set_ready_at(&job_id, end + (gap * factor).max(0.0))?;
                }
                t = end;
            }
            Decision::Idle => {
                let arrival = order.get(next_arrival).map(|&i| scenario.arrivals[i].time);
                let ready = sched.next_ready_time(t);
                let next = match (arrival, ready) {
                    (Some(a), Some(r)) => a.min(r),
                    (Some(a), None) => a,
                    (None, Some(r)) => r,
                    (None, None) => break,
                };
                t = match s.horizon {
                    Some(h) => next.min(h).max(t),
                    None => next,
                };
            }
        }
    }

    let busy: Vec<(f64, f64)> = trace.iter().map(|b| (b.start, b.end)).collect();
    let busy_seconds: f64 = busy.iter().map(|(a, b)| b - a).sum();
    let end_time = trace.last().map(|b| b.end).unwrap_or(start_time);
    let elapsed = end_time - start_time;
    let util = if elapsed > 0.0 {
        utilization(&busy, (start_time, end_time))?
    } else {
        0.0
    };

    let mut waits: BTreeMap<Priority, Vec<f64>> = BTreeMap::new();
    for (id, started) in &first_start {
        let a = &scenario.arrivals[arrival_of[id.as_str()]];
        waits.entry(a.priority).or_default().push(started - a.time);
    }
    let wait = waits
        .into_iter()
        .map(|(p, w)| {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let max = w.iter().copied().fold(0.0, f64::max);
            (
                p,
                ClassWait {
                    jobs: w.len(),
                    mean_wait: mean,
                    max_wait: max,
                },
            )
        })
        .collect();

    let mut per_user: BTreeMap<String, f64> = BTreeMap::new();
    for b in &trace {
        *per_user.entry(b.user.clone()).or_insert(0.0) += b.end - b.start;
    }
    if busy_seconds > 0.0 {
        per_user.values_mut().for_each(|v| *v /= busy_seconds);
    }

    Ok(SimOutcome {
        report: SimReport {
            policy,
            seed,
            jobs: scenario.arrivals.len(),
            jobs_completed: completed,
            batches: trace.len(),
            busy_seconds,
            elapsed_seconds: elapsed,
            utilization: util,
            wait,
            user_busy_share: per_user,
        },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrival(time: f64, priority: Priority, shots: u64, user: &str) -> Arrival {
        Arrival {
            time,
            priority,
            hint: Hint::None,
            shots,
            user: user.into(),
            expected_qpu_seconds: None,
            expected_cc_seconds: None,
            job_id: None,
        }
    }

    #[test]
    fn empty_scenario_reports_zero() {
        let s = Scenario::from_json("[]").unwrap();
        let r = simulate_workload(&s, Policy::Interleave, 1).unwrap();
        assert_eq!(r.utilization, 0.0);
        assert!(r.wait.is_empty());
        assert_eq!(r.batches, 0);
    }

    #[test]
    fn parses_both_shapes() {
        let list = r#"[{"time": 0, "priority": "test", "shots": 5, "user": "a"}]"#;
        assert_eq!(Scenario::from_json(list).unwrap().arrivals.len(), 1);
        let full = r#"{"shot_rate": 2, "shares": {"a": 10},
            "arrivals": [{"time": 0, "priority": "development", "hint": "cc-heavy",
                          "expected_cc_seconds": 3, "shots": 5, "user": "a"}]}"#;
        let s = Scenario::from_json(full).unwrap();
        assert_eq!(s.settings.shot_rate, 2.0);
        assert_eq!(s.arrivals[0].hint, Hint::CcHeavy);
    }

    #[test]
    fn malformed_scenarios() {
        for text in [
            "{",
            r#"[{"time": 0}]"#,
            r#"[{"time": -1, "priority": "test", "shots": 5, "user": "a"}]"#,
            r#"[{"time": 0, "priority": "urgent", "shots": 5, "user": "a"}]"#,
            r#"{"shares": {"a": 10}, "arrivals": [{"time": 0, "priority": "test", "shots": 5, "user": "b"}]}"#,
            r#"{"shot_rate": 0, "arrivals": []}"#,
        ] {
            assert!(matches!(Scenario::from_json(text), Err(SchedulerError::Scenario(_))), "{text}");
        }
    }

    #[test]
    fn single_job_is_fully_busy() {
        let s = Scenario {
            settings: ScenarioSettings::default(),
            arrivals: vec![arrival(5.0, Priority::Test, 25, "a")],
        };
        let r = simulate_workload(&s, Policy::Interleave, 0).unwrap();
        assert_eq!(r.batches, 3);
        assert_eq!(r.elapsed_seconds, 25.0);
        assert_eq!(r.utilization, 1.0);
        assert_eq!(r.wait[&Priority::Test].max_wait, 0.0);
        assert_eq!(r.user_busy_share["a"], 1.0);
    }

    #[test]
    fn sequential_holds_through_gaps() {
        let mut cc = arrival(0.0, Priority::Test, 20, "a");
        cc.hint = Hint::CcHeavy;
        cc.expected_cc_seconds = Some(10.0);
        let s = Scenario {
            settings: ScenarioSettings::default(),
            arrivals: vec![cc, arrival(0.0, Priority::Test, 10, "b")],
        };
        let seq = simulate_workload(&s, Policy::Sequential, 0).unwrap();
        let inter = simulate_workload(&s, Policy::Interleave, 0).unwrap();
        // sequential: 10 busy, 10 idle, 10 busy, then b for 10 → 30/40
        assert!((seq.utilization - 0.75).abs() < 1e-12);
        // interleave fills the gap with b → 30/30
        assert_eq!(inter.utilization, 1.0);
    }

    #[test]
    fn jitter_uses_the_seed() {
        let mut cc = arrival(0.0, Priority::Test, 50, "a");
        cc.hint = Hint::CcHeavy;
        cc.expected_cc_seconds = Some(10.0);
        let mut s = Scenario {
            settings: ScenarioSettings::default(),
            arrivals: vec![cc],
        };
        let a = simulate_workload(&s, Policy::Interleave, 1).unwrap();
        let a2 = simulate_workload(&s, Policy::Interleave, 2).unwrap();
        assert_eq!(a.elapsed_seconds, a2.elapsed_seconds);
        s.settings.cc_jitter = 0.5;
        let b = simulate_workload(&s, Policy::Interleave, 1).unwrap();
        let c = simulate_workload(&s, Policy::Interleave, 2).unwrap();
        assert_eq!(b, simulate_workload(&s, Policy::Interleave, 1).unwrap());
        assert_ne!(b.elapsed_seconds, c.elapsed_seconds);
    }

    #[test]
    fn horizon_stops_new_batches() {
        let mut s = Scenario {
            settings: ScenarioSettings::default(),
            arrivals: vec![arrival(0.0, Priority::Development, 100, "a")],
        };
        s.settings.horizon = Some(10.0);
        let r = simulate_workload(&s, Policy::Interleave, 0).unwrap();
        assert_eq!(r.batches, 10);
        assert_eq!(r.jobs_completed, 0);
    }
}
