mod common;

use std::time::{Duration, Instant};

use common::{assert_same, program, settings, Auth, Client};
use qmw_core::clock::ClockMode;
use qmw_core::scheduler::Policy;
use qmw_daemon::events::EventLog;
use qmw_daemon::state::State;
use qmw_daemon::spawn;
use serde_json::json;

fn replayed(path: &std::path::Path) -> serde_json::Value {
    let (_, events) = EventLog::open(path).unwrap();
    let cfg = settings(ClockMode::Virtual, None).config;
    State::replay(&cfg, Policy::Interleave, &events).unwrap().durable_view()
}

#[test]
fn restart_restores_queue_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");

    let d = spawn(settings(ClockMode::Virtual, Some(log.clone())), "127.0.0.1:0").unwrap();
    let c = Client::new(&d);
    let alice = c.session("alice", "dev");
    let bob = c.session("bob", "test");
    let mut jobs = vec![];
    for (tok, shots, hint) in [(&alice, 400, "qc-heavy"), (&bob, 300, "cc-heavy"), (&alice, 200, "none"), (&bob, 150, "qc-balanced")] {
        let body = json!({"resource_id": "qpu", "program": program(shots, 3.0), "hint": hint, "expected_cc_seconds": 0.5});
        let r = c.submit(tok, body);
        assert_eq!(r.status, 201, "{:?}", r.body);
        jobs.push((tok.clone(), r.body["job_id"].as_str().unwrap().to_string(), shots));
    }
    let emu = c.submit(&alice, json!({"resource_id": "ps", "program": program(50, 3.0)}));
    jobs.push((alice.clone(), emu.body["job_id"].as_str().unwrap().to_string(), 50));
    c.post("/v1/admin/calibration", Auth::Admin, &json!({"resource_id": "qpu", "max_amplitude": 11.9}));

    let deadline = Instant::now() + Duration::from_secs(30);
    while d.service.event_count() < 300 {
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(1));
    }
    let svc = d.service.clone();
    drop(c);
    d.stop();
    let live = svc.durable_view();
    drop(svc);
    let unfinished = live["jobs"].as_object().unwrap().len();
    assert!(unfinished > 0, "killed too late to be mid-scenario");
    assert_same(&replayed(&log), &live);

    let d = spawn(settings(ClockMode::Virtual, Some(log.clone())), "127.0.0.1:0").unwrap();
    let c = Client::new(&d);
    for (tok, id, shots) in &jobs {
        let job = c.wait(tok, id);
        assert_eq!(job["state"], "COMPLETED", "{job:?}");
        let total: u64 = job["result"]["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, *shots);
    }
    let target = c.get("/v1/resources/qpu/target", Auth::Bearer(&alice)).body;
    assert!(target["max_amplitude"].as_f64().unwrap() > 0.0);
    let svc = d.service.clone();
    drop(c);
    d.stop();
    assert_same(&replayed(&log), &svc.durable_view());
}

#[test]
fn torn_log_tail_is_survivable() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let token = {
        let d = spawn(settings(ClockMode::Virtual, Some(log.clone())), "127.0.0.1:0").unwrap();
        Client::new(&d).session("alice", "prod")
    };
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"ts\":1.0,\"kind\":\"sess");
    std::fs::write(&log, text).unwrap();

    let d = spawn(settings(ClockMode::Virtual, Some(log.clone())), "127.0.0.1:0").unwrap();
    let c = Client::new(&d);
    assert_eq!(c.get("/v1/jobs", Auth::Bearer(&token)).status, 200);
    let (_, events) = EventLog::open(&log).unwrap();
    assert_eq!(events.iter().filter(|e| e.kind.name() == "started").count(), 2);
}
