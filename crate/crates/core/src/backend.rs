//! The interface between the pilot manager and whatever runs jobs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{DcrDescriptor, JobRecord, JobRequest};
use crate::sim::SimEvent;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DcrError {
    #[error("job needs {requested} but the DCR offers {available}")]
    OversizedJob { requested: String, available: String },
    #[error("walltime {requested}s exceeds the DCR limit of {limit}s")]
    WalltimeExceedsLimit { requested: f64, limit: f64 },
    #[error("DCR {0} accepts no more jobs")]
    QueueFull(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} already finished")]
    AlreadyTerminal(String),
    #[error("submission time {at} is before the DCR clock {now}")]
    InPast { at: f64, now: f64 },
    #[error("unknown DCR {0}")]
    UnknownDcr(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("duplicate pilot {0}")]
    DuplicatePilot(String),
    #[error("failed to start agent: {0}")]
    SpawnFailure(String),
}

/// A DCR as seen by the pilot manager. Implemented by the batch simulator
/// and by the local process launcher.
pub trait DcrBackend: Send {
    fn descriptor(&self) -> &DcrDescriptor;

    fn submit_job(&mut self, request: JobRequest, at: f64) -> Result<String, DcrError>;

    fn cancel_job(&mut self, job_id: &str, at: f64) -> Result<(), DcrError>;

    fn query_job(&self, job_id: &str) -> Result<JobRecord, DcrError>;

    /// The payload of a running job finished on its own.
    fn finish_job(&mut self, job_id: &str, exit_code: i32, at: f64) -> Result<(), DcrError>;

    /// Moves the backend clock to `until` and returns what happened.
    fn advance(&mut self, until: f64) -> Vec<SimEvent>;

    /// When the backend next has something to report, if it knows.
    fn next_event_time(&self) -> Option<f64>;
}

/// Backends keyed by DCR id.
#[derive(Default)]
pub struct BackendSet {
    backends: BTreeMap<String, Box<dyn DcrBackend>>,
}

impl BackendSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Box<dyn DcrBackend>) {
        let id = backend.descriptor().dcr_id.clone();
        self.backends.insert(id, backend);
    }

    pub fn get(&self, dcr_id: &str) -> Result<&dyn DcrBackend, DcrError> {
        self.backends
            .get(dcr_id)
            .map(|b| b.as_ref())
            .ok_or_else(|| DcrError::UnknownDcr(dcr_id.to_string()))
    }

    pub fn get_mut(&mut self, dcr_id: &str) -> Result<&mut (dyn DcrBackend + 'static), DcrError> {
        self.backends
            .get_mut(dcr_id)
            .map(|b| b.as_mut())
            .ok_or_else(|| DcrError::UnknownDcr(dcr_id.to_string()))
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &DcrDescriptor> {
        self.backends.values().map(|b| b.descriptor())
    }

    /// Advances every backend, returning `(dcr_id, event)` pairs ordered by
    /// time, then DCR id.
    pub fn advance_all(&mut self, until: f64) -> Vec<(String, SimEvent)> {
        let mut out: Vec<(String, SimEvent)> = Vec::new();
        for (id, backend) in &mut self.backends {
            out.extend(backend.advance(until).into_iter().map(|e| (id.clone(), e)));
        }
        out.sort_by(|a, b| a.1.time.total_cmp(&b.1.time));
        out
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.backends
            .values()
            .filter_map(|b| b.next_event_time())
            .min_by(f64::total_cmp)
    }
}
