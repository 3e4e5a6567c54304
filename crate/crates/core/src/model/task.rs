use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelError, ResourceKind, ResourceQuantity};

/// A unit of work: one command with its resource requirements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    pub cores: u32,
    /// Seconds. Sim mode executes the task for exactly this long.
    pub estimated_duration: f64,
    #[serde(default)]
    pub input_refs: Vec<String>,
    #[serde(default)]
    pub output_refs: Vec<String>,
    /// Early-binding target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_pilot: Option<String>,
    /// Reserved for application-level priorities; accepted and ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<i64>,
}

impl TaskSpec {
    /// A task with no arguments, environment or file references.
    pub fn new(
        task_id: impl Into<String>,
        executable: impl Into<String>,
        cores: u32,
        estimated_duration: f64,
    ) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            executable: executable.into(),
            arguments: Vec::new(),
            environment: BTreeMap::new(),
            cores,
            estimated_duration,
            input_refs: Vec::new(),
            output_refs: Vec::new(),
            pinned_pilot: None,
            priority: None,
        }
    }

    pub fn with_arguments<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn pinned_to(mut self, pilot_id: impl Into<String>) -> Self {
        self.pinned_pilot = Some(pilot_id.into());
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.task_id.is_empty() {
            return Err(ModelError::InvalidTask {
                task_id: self.task_id.clone(),
                reason: "task_id must not be empty".into(),
            });
        }
        if self.cores < 1 {
            return Err(ModelError::InvalidTask {
                task_id: self.task_id.clone(),
                reason: "cores must be at least 1".into(),
            });
        }
        if !(self.estimated_duration.is_finite() && self.estimated_duration > 0.0) {
            return Err(ModelError::InvalidTask {
                task_id: self.task_id.clone(),
                reason: "estimated_duration must be a positive number of seconds".into(),
            });
        }
        Ok(())
    }

    pub fn core_seconds(&self) -> f64 {
        f64::from(self.cores) * self.estimated_duration
    }

    pub fn requirements(&self) -> [ResourceQuantity; 2] {
        [
            ResourceQuantity::new(ResourceKind::Cores, f64::from(self.cores)),
            ResourceQuantity::new(ResourceKind::WalltimeS, self.estimated_duration),
        ]
    }

    /// The fields that decide whether two tasks are indistinguishable.
    /// Environment differences are deliberately not part of it.
    pub(crate) fn similarity_key(&self) -> (&str, &[String], u32, u64) {
        (
            &self.executable,
            &self.arguments,
            self.cores,
            self.estimated_duration.to_bits(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    Pending,
    Ready,
    Bound,
    Dispatched,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Failed | TaskStatus::Canceled)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskStatus::Pending => "Pending",
            TaskStatus::Ready => "Ready",
            TaskStatus::Bound => "Bound",
            TaskStatus::Dispatched => "Dispatched",
            TaskStatus::Running => "Running",
            TaskStatus::Done => "Done",
            TaskStatus::Failed => "Failed",
            TaskStatus::Canceled => "Canceled",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskEvent {
    DepsMet,
    EarlyBound,
    Dispatch,
    Start,
    Succeed,
    Fail,
    Cancel,
    Retry,
    /// Early binding dropped; the task goes back to dependency tracking.
    Unbind,
}

/// Lifecycle state of one task, with the attempt counter and the time each
/// state was last entered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub status: TaskStatus,
    pub attempt: u32,
    pub entered: BTreeMap<TaskStatus, f64>,
}

impl TaskState {
    pub fn new(at: f64) -> Self {
        let mut entered = BTreeMap::new();
        entered.insert(TaskStatus::Pending, at);
        TaskState {
            status: TaskStatus::Pending,
            attempt: 1,
            entered,
        }
    }

    pub fn entered_at(&self, status: TaskStatus) -> Option<f64> {
        self.entered.get(&status).copied()
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }

    /// Applies `event` at time `at`. Illegal pairs leave `self` untouched.
    pub fn apply(&mut self, event: TaskEvent, at: f64) -> Result<TaskStatus, ModelError> {
        let next = transition_task(self, event, at)?;
        *self = next;
        Ok(self.status)
    }
}

/// The task transition table. Returns the successor state or
/// `IllegalTransition`; the input is never modified.
pub fn transition_task(state: &TaskState, event: TaskEvent, at: f64) -> Result<TaskState, ModelError> {
    use TaskEvent as E;
    use TaskStatus as S;

    let next = match (state.status, event) {
        (S::Pending, E::DepsMet) => S::Ready,
        (S::Pending | S::Ready, E::EarlyBound) => S::Bound,
        (S::Ready | S::Bound, E::Dispatch) => S::Dispatched,
        (S::Dispatched, E::Start) => S::Running,
        (S::Running, E::Succeed) => S::Done,
        (S::Bound | S::Dispatched | S::Running, E::Fail) => S::Failed,
        (S::Failed, E::Retry) => S::Ready,
        (S::Bound, E::Unbind) => S::Pending,
        (s, E::Cancel) if !s.is_terminal() => S::Canceled,
        (s, e) => {
            return Err(ModelError::IllegalTransition {
                state: s.name().to_string(),
                event: format!("{e:?}"),
            })
        }
    };
    let mut out = state.clone();
    out.status = next;
    if event == E::Retry {
        out.attempt += 1;
    }
    out.entered.insert(next, at);
    Ok(out)
}
