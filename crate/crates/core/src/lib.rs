//! A pilot-job system: resource placeholders on distributed computing
//! resources, early and late binding of tasks to pilots, and pull-based
//! master-worker dispatch.

pub mod agent;
pub mod backend;
pub mod events;
pub mod harness;
pub mod local_exec;
pub mod manager;
pub mod metrics;
pub mod model;
pub mod pilot_manager;
pub mod protocol;
pub mod server;
pub mod sim;
pub mod workload_manager;

pub use backend::{BackendSet, DcrBackend, DcrError};
pub use model::*;
pub use events::{Entity, EventLog, EventRecord};
