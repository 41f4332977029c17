//! Append-only JSON-lines event log.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use qmw_core::emulator::BitstringCounts;
use qmw_core::model::{DeviceTarget, PulseProgram};
use qmw_core::scheduler::{Hint, Priority};
use qmw_core::config::ResourceKind;
use serde::{Deserialize, Serialize};

/// Every state transition of the daemon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    /// Written at every boot, after the replayed events.
    Started {},
    SessionOpened {
        session_id: String,
        user: String,
        partition: String,
        priority: Priority,
        token_hash: String,
    },
    SessionClosed {
        session_id: String,
    },
    JobSubmitted {
        job_id: String,
        session_id: String,
        resource_id: String,
        resource_kind: ResourceKind,
        hint: Hint,
        program: PulseProgram,
        expected_qpu_seconds: Option<f64>,
        expected_cc_seconds: Option<f64>,
        seed: u64,
        target: DeviceTarget,
    },
    BatchStarted {
        job_id: String,
        batch_index: usize,
    },
    BatchCompleted {
        job_id: String,
        batch_index: usize,
        busy_seconds: f64,
        counts: BitstringCounts,
    },
    /// The batch never ran (task stopped or failed under it).
    BatchAborted {
        job_id: String,
    },
    CancelRequested {
        job_id: String,
    },
    JobCompleted {
        job_id: String,
        counts: BitstringCounts,
        norm_drift: Option<f64>,
    },
    JobFailed {
        job_id: String,
        reason: String,
    },
    JobCancelled {
        job_id: String,
    },
    Drained {},
    Resumed {},
    CalibrationSet {
        resource_id: String,
        max_amplitude: f64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Started {} => "started",
            EventKind::SessionOpened { .. } => "session_opened",
            EventKind::SessionClosed { .. } => "session_closed",
            EventKind::JobSubmitted { .. } => "job_submitted",
            EventKind::BatchStarted { .. } => "batch_started",
            EventKind::BatchCompleted { .. } => "batch_completed",
            EventKind::BatchAborted { .. } => "batch_aborted",
            EventKind::CancelRequested { .. } => "cancel_requested",
            EventKind::JobCompleted { .. } => "job_completed",
            EventKind::JobFailed { .. } => "job_failed",
            EventKind::JobCancelled { .. } => "job_cancelled",
            EventKind::Drained {} => "drained",
            EventKind::Resumed {} => "resumed",
            EventKind::CalibrationSet { .. } => "calibration_set",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) the log and returns the events already in
    /// it. A torn final line from an interrupted write is dropped.
    pub fn open(path: &Path) -> io::Result<(Self, Vec<Event>)> {
        let mut events = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut lines = reader.split(b'\n').peekable();
            let mut lineno = 0;
            while let Some(line) = lines.next() {
                let line = line?;
                lineno += 1;
                let last = lines.peek().is_none();
                if line.iter().all(u8::is_ascii_whitespace) {
                    valid_len += line.len() as u64 + 1;
                    continue;
                }
                match serde_json::from_slice::<Event>(&line) {
                    Ok(e) => {
                        events.push(e);
                        valid_len += line.len() as u64 + 1;
                    }
                    Err(_) if last => break,
                    Err(e) => {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{lineno}: {e}", path.display()),
                        ))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok((
            EventLog {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_shape() {
        let e = Event {
            ts: 3.5,
            kind: EventKind::CancelRequested { job_id: "j1".into() },
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v, serde_json::json!({"ts": 3.5, "kind": "cancel_requested", "payload": {"job_id": "j1"}}));
        assert_eq!(e.kind.name(), "cancel_requested");
        let d = Event { ts: 0.0, kind: EventKind::Drained {} };
        let back: Event = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        {
            let (mut log, events) = EventLog::open(&path).unwrap();
            assert!(events.is_empty());
            for i in 0..3 {
                log.append(&Event { ts: i as f64, kind: EventKind::Resumed {} }).unwrap();
            }
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"ts\": 9, \"kind\": \"dra");
        std::fs::write(&path, &text).unwrap();
        let (mut log, events) = EventLog::open(&path).unwrap();
        assert_eq!(events.len(), 3);
        log.append(&Event { ts: 4.0, kind: EventKind::Drained {} }).unwrap();
        let (_, events) = EventLog::open(&path).unwrap();
        assert_eq!(events.len(), 4);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "garbage\n{\"ts\":1,\"kind\":\"drained\",\"payload\":{}}\n").unwrap();
        assert!(EventLog::open(&path).is_err());
    }
}
