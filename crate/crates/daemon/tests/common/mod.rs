#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use qmw_core::clock::ClockMode;
use qmw_core::config::ConfigDocument;
use qmw_daemon::{spawn, DaemonHandle, Settings};
use serde_json::{json, Value};

pub const ADMIN: &str = "admin-secret";

pub const CONFIG: &str = r#"{
  "resources": [
    {"resource_id": "qpu", "kind": "qpu-mock",
     "parameters": {"shot_rate": 100, "max_atoms": 20, "nominal_max_amplitude": 12.0,
                    "drift_sigma": 0.02, "drift_tick_seconds": 60, "drift_seed": 7}},
    {"resource_id": "sv", "kind": "emulator-sv", "parameters": {"max_atoms": 8}},
    {"resource_id": "ps", "kind": "emulator-ps", "parameters": {"max_atoms": 50}},
    {"resource_id": "cloud", "kind": "cloud-stub"}
  ],
  "queues": {"partitions": {"prod": "production", "test": "test", "dev": "development"},
             "max_batch": 50, "test_batch": 10, "window_length": 3600},
  "shares": {"allocations": {"alice": 5, "bob": 5}}
}"#;

pub fn settings(clock: ClockMode, event_log: Option<PathBuf>) -> Settings {
    let mut s = Settings::new(ConfigDocument::parse(CONFIG, std::iter::empty()).unwrap());
    s.admin_token = Some(ADMIN.into());
    s.clock = clock;
    s.event_log = event_log;
    s
}

pub fn start(clock: ClockMode) -> DaemonHandle {
    spawn(settings(clock, None), "127.0.0.1:0").unwrap()
}

/// Resonant pulse on a 2-atom register, far enough apart to be independent.
pub fn program(shots: u64, amplitude: f64) -> Value {
    json!({
        "register": {"atoms": [{"id": "q0", "x": 0.0, "y": 0.0}, {"id": "q1", "x": 30.0, "y": 0.0}]},
        "pulses": [{"duration": 250,
                    "amplitude": {"kind": "constant", "value": amplitude},
                    "detuning": {"kind": "constant", "value": 0.0},
                    "phase": 0.0}],
        "shots": shots,
        "format_version": "1"
    })
}

pub struct Client {
    pub base: String,
    agent: ureq::Agent,
}

#[derive(Debug)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Client {
    pub fn new(handle: &DaemonHandle) -> Self {
        Client {
            base: handle.url(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    pub fn call(&self, method: &str, path: &str, auth: Auth, body: Option<&str>) -> Reply {
        let mut req = self.agent.request(method, &format!("{}{}", self.base, path));
        match auth {
            Auth::None => {}
            Auth::Bearer(t) => req = req.set("Authorization", &format!("Bearer {t}")),
            Auth::Admin => req = req.set("X-Admin-Token", ADMIN),
        }
        let res = match body {
            Some(b) => req.set("Content-Type", "application/json").send_string(b),
            None => req.call(),
        };
        let resp = match res {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => panic!("{method} {path}: {e}"),
        };
        let status = resp.status();
        let text = resp.into_string().unwrap();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Reply { status, body }
    }

    pub fn get(&self, path: &str, auth: Auth) -> Reply {
        self.call("GET", path, auth, None)
    }

    pub fn post(&self, path: &str, auth: Auth, body: &Value) -> Reply {
        self.call("POST", path, auth, Some(&body.to_string()))
    }

    pub fn delete(&self, path: &str, auth: Auth) -> Reply {
        self.call("DELETE", path, auth, None)
    }

    pub fn session(&self, user: &str, partition: &str) -> String {
        let r = self.post("/v1/sessions", Auth::None, &json!({"user": user, "partition": partition}));
        assert_eq!(r.status, 201, "{:?}", r.body);
        r.body["session_token"].as_str().unwrap().to_string()
    }

    pub fn submit(&self, token: &str, body: Value) -> Reply {
        self.post("/v1/jobs", Auth::Bearer(token), &body)
    }

    /// Polls a job until it reaches a terminal state.
    pub fn wait(&self, token: &str, job_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let r = self.get(&format!("/v1/jobs/{job_id}"), Auth::Bearer(token));
            assert_eq!(r.status, 200, "{:?}", r.body);
            if matches!(r.body["state"].as_str(), Some("COMPLETED" | "FAILED" | "CANCELLED")) {
                return r.body;
            }
            assert!(Instant::now() < deadline, "job {job_id} did not finish: {:?}", r.body);
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

#[derive(Clone, Copy)]
pub enum Auth<'a> {
    None,
    Bearer(&'a str),
    Admin,
}

/// Paths at which two JSON documents differ, for readable assertion output.
pub fn json_diff(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for k in x.keys().chain(y.keys().filter(|k| !x.contains_key(*k))) {
                let p = format!("{path}/{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(u, v, &p, out),
                    (u, v) => out.push(format!("{p}: {u:?} vs {v:?}")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(u, v, &format!("{path}/{i}"), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

pub fn assert_same(a: &Value, b: &Value) {
    let mut d = vec![];
    json_diff(a, b, "", &mut d);
    assert!(d.is_empty(), "documents differ:\n{}", d.join("\n"));
}
