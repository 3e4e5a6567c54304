//! Domain types and state machines shared by every other module.

mod dcr;
mod pilot;
mod task;
mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dcr::{DcrDescriptor, JobPayload, JobRecord, JobRequest, JobStatus, Middleware};
pub use pilot::{
    transition_pilot, BootstrapMode, PilotEvent, PilotFailure, PilotSpec, PilotState, PilotStatus,
};
pub use task::{transition_task, TaskEvent, TaskSpec, TaskState, TaskStatus};
pub use workload::{classify_workload, validate_workload, ValidatedWorkload, WorkloadClass, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("duplicate task id {0}")]
    DuplicateTaskId(String),
    #[error("dependency {from} -> {to} names an unknown task")]
    DanglingDependency { from: String, to: String },
    #[error("dependency cycle through {0:?}")]
    CyclicDependency(Vec<String>),
    #[error("invalid task {task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("invalid pilot {pilot_id}: {reason}")]
    InvalidPilot { pilot_id: String, reason: String },
    #[error("invalid DCR {dcr_id}: {reason}")]
    InvalidDcr { dcr_id: String, reason: String },
    #[error("illegal transition: {event} in state {state}")]
    IllegalTransition { state: String, event: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    Cores,
    MemoryMB,
    StorageMB,
    WalltimeS,
}

/// An amount of one kind of resource, in that kind's unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceQuantity {
    pub kind: ResourceKind,
    pub amount: f64,
}

impl ResourceQuantity {
    /// Negative or non-finite amounts are clamped to zero.
    pub fn new(kind: ResourceKind, amount: f64) -> Self {
        let amount = if amount.is_finite() && amount > 0.0 { amount } else { 0.0 };
        ResourceQuantity { kind, amount }
    }
}

/// Free/total cores of one Active pilot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotCapacity {
    pub pilot_id: String,
    pub total_cores: u32,
    pub free_cores: u32,
}

/// Aggregated cores of all Active pilots, possibly spanning several DCRs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceOverlay {
    pub pilots: Vec<PilotCapacity>,
    pub total_cores: u32,
    pub free_cores: u32,
}

impl ResourceOverlay {
    pub fn from_pilots(pilots: Vec<PilotCapacity>) -> Self {
        let total_cores = pilots.iter().map(|p| p.total_cores).sum();
        let free_cores = pilots.iter().map(|p| p.free_cores).sum();
        ResourceOverlay {
            pilots,
            total_cores,
            free_cores,
        }
    }
}
