use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{Hint, Priority};

/// Per-job record written once when the job reaches a terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetadataRecord {
    pub job_id: String,
    pub resource_id: String,
    pub calibration_timestamp: f64,
    pub batches_executed: u64,
    pub qpu_busy_seconds: f64,
    /// Emulator runs only.
    pub norm_drift: Option<f64>,
    pub hint: Hint,
    pub priority: Priority,
}

#[derive(Debug, Error, PartialEq)]
#[error("metadata for job {0} already recorded")]
pub struct DuplicateRecord(pub String);

#[derive(Debug, Clone, Default)]
pub struct JobMetadataStore {
    records: Arc<Mutex<BTreeMap<String, JobMetadataRecord>>>,
}

impl JobMetadataStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, record: JobMetadataRecord) -> Result<(), DuplicateRecord> {
        let mut records = self.records.lock().unwrap();
        if records.contains_key(&record.job_id) {
            return Err(DuplicateRecord(record.job_id));
        }
        records.insert(record.job_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, job_id: &str) -> Option<JobMetadataRecord> {
        self.records.lock().unwrap().get(job_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> JobMetadataRecord {
        JobMetadataRecord {
            job_id: id.into(),
            resource_id: "q".into(),
            calibration_timestamp: 1.0,
            batches_executed: 3,
            qpu_busy_seconds: 3.0,
            norm_drift: None,
            hint: Hint::None,
            priority: Priority::Development,
        }
    }

    #[test]
    fn write_once() {
        let store = JobMetadataStore::new();
        store.record(record("j1")).unwrap();
        assert_eq!(store.record(record("j1")), Err(DuplicateRecord("j1".into())));
        assert_eq!(store.get("j1").unwrap().batches_executed, 3);
        assert_eq!(store.len(), 1);
    }
}
