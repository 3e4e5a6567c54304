use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DcrDescriptor, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BootstrapMode {
    /// The agent executable is launched from where it is installed.
    #[default]
    Bundled,
    /// The agent executable is copied into the pilot sandbox before launch.
    Staged,
}

/// Description of a resource placeholder to be submitted to a DCR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSpec {
    pub pilot_id: String,
    pub target_dcr: String,
    pub nodes: u32,
    pub cores_per_node: u32,
    /// Seconds.
    pub walltime: f64,
    #[serde(default)]
    pub bootstrap_mode: BootstrapMode,
}

impl PilotSpec {
    pub fn total_cores(&self) -> u32 {
        self.nodes * self.cores_per_node
    }

    /// Core-seconds the pilot can hold over its walltime.
    pub fn capacity(&self) -> f64 {
        f64::from(self.total_cores()) * self.walltime
    }

    /// Checks the shape against the target machine. Only the intrinsic
    /// fields are checked; the DCR backend reports size and walltime
    /// violations when the job is submitted.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidPilot {
            pilot_id: self.pilot_id.clone(),
            reason: reason.into(),
        };
        if self.pilot_id.is_empty() {
            return Err(bad("pilot_id must not be empty"));
        }
        if self.nodes < 1 || self.cores_per_node < 1 {
            return Err(bad("nodes and cores_per_node must be at least 1"));
        }
        if !(self.walltime.is_finite() && self.walltime > 0.0) {
            return Err(bad("walltime must be a positive number of seconds"));
        }
        Ok(())
    }

    /// Full check against a descriptor, as done before submission.
    pub fn validate_against(&self, dcr: &DcrDescriptor) -> Result<(), ModelError> {
        self.validate()?;
        if self.target_dcr != dcr.dcr_id {
            return Err(ModelError::InvalidPilot {
                pilot_id: self.pilot_id.clone(),
                reason: format!("targets {} but was checked against {}", self.target_dcr, dcr.dcr_id),
            });
        }
        if self.nodes > dcr.nodes || self.cores_per_node > dcr.cores_per_node {
            return Err(ModelError::InvalidPilot {
                pilot_id: self.pilot_id.clone(),
                reason: format!(
                    "{}x{} cores does not fit {} nodes of {} cores",
                    self.nodes, self.cores_per_node, dcr.nodes, dcr.cores_per_node
                ),
            });
        }
        if self.walltime > dcr.max_job_walltime {
            return Err(ModelError::InvalidPilot {
                pilot_id: self.pilot_id.clone(),
                reason: format!("walltime {} exceeds limit {}", self.walltime, dcr.max_job_walltime),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PilotStatus {
    Defined,
    Submitted,
    Active,
    Done,
    Failed,
    Canceled,
}

impl PilotStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, PilotStatus::Done | PilotStatus::Failed | PilotStatus::Canceled)
    }

    /// Not yet executing on its DCR.
    pub fn is_inactive(self) -> bool {
        matches!(self, PilotStatus::Defined | PilotStatus::Submitted)
    }

    pub fn name(self) -> &'static str {
        match self {
            PilotStatus::Defined => "Defined",
            PilotStatus::Submitted => "Submitted",
            PilotStatus::Active => "Active",
            PilotStatus::Done => "Done",
            PilotStatus::Failed => "Failed",
            PilotStatus::Canceled => "Canceled",
        }
    }
}

impl fmt::Display for PilotStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotFailure {
    WalltimeExpired,
    BootstrapTimeout,
    HeartbeatLost,
    SubmitRejected,
    AgentExited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotEvent {
    Submit,
    Activate,
    Complete,
    Fail(PilotFailure),
    Cancel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotState {
    pub status: PilotStatus,
    pub entered: BTreeMap<PilotStatus, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<PilotFailure>,
}

impl PilotState {
    pub fn new(at: f64) -> Self {
        let mut entered = BTreeMap::new();
        entered.insert(PilotStatus::Defined, at);
        PilotState {
            status: PilotStatus::Defined,
            entered,
            failure: None,
        }
    }

    pub fn entered_at(&self, status: PilotStatus) -> Option<f64> {
        self.entered.get(&status).copied()
    }

    pub fn apply(&mut self, event: PilotEvent, at: f64) -> Result<PilotStatus, ModelError> {
        let next = transition_pilot(self, event, at)?;
        *self = next;
        Ok(self.status)
    }
}

pub fn transition_pilot(state: &PilotState, event: PilotEvent, at: f64) -> Result<PilotState, ModelError> {
    use PilotEvent as E;
    use PilotStatus as S;

    let next = match (state.status, event) {
        (S::Defined, E::Submit) => S::Submitted,
        (S::Submitted, E::Activate) => S::Active,
        (S::Active, E::Complete) => S::Done,
        (S::Submitted | S::Active, E::Fail(_)) => S::Failed,
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
    if let E::Fail(reason) = event {
        out.failure = Some(reason);
    }
    out.entered.insert(next, at);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn in_status(status: PilotStatus) -> PilotState {
        let mut s = PilotState::new(0.0);
        s.status = status;
        s
    }

    #[test]
    fn submitted_activates() {
        let s = transition_pilot(&in_status(PilotStatus::Submitted), PilotEvent::Activate, 3.0).unwrap();
        assert_eq!(s.status, PilotStatus::Active);
        assert_eq!(s.entered_at(PilotStatus::Active), Some(3.0));
    }

    #[test]
    fn defined_cannot_activate() {
        assert!(transition_pilot(&in_status(PilotStatus::Defined), PilotEvent::Activate, 0.0).is_err());
    }

    #[test]
    fn active_completes() {
        let s = transition_pilot(&in_status(PilotStatus::Active), PilotEvent::Complete, 0.0).unwrap();
        assert_eq!(s.status, PilotStatus::Done);
    }

    #[test]
    fn active_is_entered_at_most_once() {
        let mut s = PilotState::new(0.0);
        s.apply(PilotEvent::Submit, 1.0).unwrap();
        s.apply(PilotEvent::Activate, 2.0).unwrap();
        assert!(s.apply(PilotEvent::Activate, 3.0).is_err());
        assert_eq!(s.entered_at(PilotStatus::Active), Some(2.0));
    }

    #[test]
    fn failure_reason_is_kept() {
        let mut s = in_status(PilotStatus::Active);
        s.apply(PilotEvent::Fail(PilotFailure::WalltimeExpired), 9.0).unwrap();
        assert_eq!(s.failure, Some(PilotFailure::WalltimeExpired));
        assert!(s.apply(PilotEvent::Cancel, 10.0).is_err());
    }

    #[test]
    fn defined_cannot_fail() {
        assert!(transition_pilot(
            &in_status(PilotStatus::Defined),
            PilotEvent::Fail(PilotFailure::SubmitRejected),
            0.0
        )
        .is_err());
    }
}
