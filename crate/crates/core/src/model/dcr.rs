use serde::{Deserialize, Serialize};

use super::{ModelError, PilotSpec, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Middleware {
    BatchSim,
    LocalExec,
}

/// Model of a target machine: its size, its middleware and its limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcrDescriptor {
    pub dcr_id: String,
    pub middleware: Middleware,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub max_concurrent_jobs: u32,
    /// Seconds.
    pub max_job_walltime: f64,
    /// Seconds between batch scheduler passes. Required for `BatchSim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler_cycle: Option<f64>,
    #[serde(default)]
    pub admin_domain: String,
}

impl DcrDescriptor {
    pub fn batch_sim(dcr_id: impl Into<String>, nodes: u32, cores_per_node: u32, scheduler_cycle: f64) -> Self {
        DcrDescriptor {
            dcr_id: dcr_id.into(),
            middleware: Middleware::BatchSim,
            nodes,
            cores_per_node,
            max_concurrent_jobs: 1024,
            max_job_walltime: 86_400.0,
            scheduler_cycle: Some(scheduler_cycle),
            admin_domain: String::new(),
        }
    }

    pub fn local_exec(dcr_id: impl Into<String>, cores: u32) -> Self {
        DcrDescriptor {
            dcr_id: dcr_id.into(),
            middleware: Middleware::LocalExec,
            nodes: 1,
            cores_per_node: cores,
            max_concurrent_jobs: 64,
            max_job_walltime: 86_400.0,
            scheduler_cycle: None,
            admin_domain: String::new(),
        }
    }

    pub fn total_cores(&self) -> u32 {
        self.nodes * self.cores_per_node
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidDcr {
            dcr_id: self.dcr_id.clone(),
            reason: reason.into(),
        };
        if self.dcr_id.is_empty() {
            return Err(bad("dcr_id must not be empty"));
        }
        if self.nodes < 1 || self.cores_per_node < 1 || self.max_concurrent_jobs < 1 {
            return Err(bad("nodes, cores_per_node and max_concurrent_jobs must be at least 1"));
        }
        if !(self.max_job_walltime.is_finite() && self.max_job_walltime > 0.0) {
            return Err(bad("max_job_walltime must be positive"));
        }
        if self.middleware == Middleware::BatchSim {
            match self.scheduler_cycle {
                Some(c) if c.is_finite() && c > 0.0 => {}
                _ => return Err(bad("scheduler_cycle must be positive for BatchSim")),
            }
        }
        Ok(())
    }
}

/// What a DCR job carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JobPayload {
    Pilot(PilotSpec),
    Task(TaskSpec),
    /// Another tenant's job occupying nodes for a fixed duration.
    Background { label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Killed,
    Canceled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Killed | JobStatus::Canceled)
    }
}

/// A submission request: the payload plus its shape on the machine.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRequest {
    pub payload: JobPayload,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub walltime: f64,
    /// How long the payload runs once started. `None` means it runs until
    /// it is finished externally or killed at walltime.
    pub run_time: Option<f64>,
}

impl JobRequest {
    pub fn for_pilot(spec: &PilotSpec) -> Self {
        JobRequest {
            payload: JobPayload::Pilot(spec.clone()),
            nodes: spec.nodes,
            cores_per_node: spec.cores_per_node,
            walltime: spec.walltime,
            run_time: None,
        }
    }

    /// Direct submission of a single task. The task is spread over the
    /// fewest nodes that hold its cores.
    pub fn for_task(task: &TaskSpec, dcr: &DcrDescriptor, walltime: f64) -> Self {
        let nodes = task.cores.div_ceil(dcr.cores_per_node).max(1);
        JobRequest {
            payload: JobPayload::Task(task.clone()),
            nodes,
            cores_per_node: task.cores.div_ceil(nodes),
            walltime,
            run_time: Some(task.estimated_duration),
        }
    }

    pub fn background(label: impl Into<String>, nodes: u32, cores_per_node: u32, duration: f64) -> Self {
        JobRequest {
            payload: JobPayload::Background { label: label.into() },
            nodes,
            cores_per_node,
            walltime: duration,
            run_time: Some(duration),
        }
    }
}

/// A job as seen by the DCR: request, timestamps and status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub dcr_id: String,
    pub payload: JobPayload,
    pub requested_nodes: u32,
    /// Cores per requested node.
    pub requested_cores: u32,
    pub walltime: f64,
    pub submit_time: f64,
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    pub status: JobStatus,
    /// Exit status of the payload when the backend knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}
