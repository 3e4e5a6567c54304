//! Pilot provisioning: explicit submission, the implicit overallocation
//! policy, lifecycle tracking and the resource overlay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs;
use crate::backend::{BackendSet, DcrError};
use crate::events::{Entity, EventLog};
use crate::model::{
    BootstrapMode, DcrDescriptor, JobRequest, ModelError, PilotCapacity, PilotEvent, PilotFailure, PilotSpec,
    PilotState, PilotStatus, ResourceOverlay,
};
use crate::protocol::{Ack, AgentPhase, Heartbeat, Message, Register};
use crate::sim::{SimEvent, SimEventKind};
use crate::workload_manager::{PilotDirectory, WorkloadStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PilotError {
    #[error("unknown pilot {0}")]
    UnknownPilot(String),
    #[error("pilot {0} already exists")]
    DuplicatePilot(String),
    #[error("pilot {0} has already terminated")]
    AlreadyTerminal(String),
    #[error("provisioning policy is not implicit")]
    NotImplicit,
    #[error("invalid provisioning policy: {0}")]
    InvalidPolicy(String),
    #[error("a task needs {cores} cores but DCR {dcr_id} allows at most {max} per pilot")]
    TaskTooLargeForPilotShape { cores: u32, dcr_id: String, max: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dcr(#[from] DcrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProvisioningMode {
    #[default]
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotShape {
    pub nodes: u32,
    pub cores_per_node: u32,
    pub walltime: f64,
}

impl PilotShape {
    pub fn cores(&self) -> u32 {
        self.nodes * self.cores_per_node
    }

    pub fn capacity(&self) -> f64 {
        f64::from(self.cores()) * self.walltime
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisioningPolicy {
    #[serde(default)]
    pub mode: ProvisioningMode,
    #[serde(default = "one")]
    pub overallocation: f64,
    pub default_pilot_shape: PilotShape,
    /// DCR used for implicit pilots. Defaults to the first one by id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_dcr: Option<String>,
}

fn one() -> f64 {
    1.0
}

impl ProvisioningPolicy {
    pub fn explicit() -> Self {
        ProvisioningPolicy {
            mode: ProvisioningMode::Explicit,
            overallocation: 1.0,
            default_pilot_shape: PilotShape {
                nodes: 1,
                cores_per_node: 1,
                walltime: 3600.0,
            },
            target_dcr: None,
        }
    }

    pub fn implicit(overallocation: f64, shape: PilotShape) -> Self {
        ProvisioningPolicy {
            mode: ProvisioningMode::Implicit,
            overallocation,
            default_pilot_shape: shape,
            target_dcr: None,
        }
    }

    pub fn validate(&self) -> Result<(), PilotError> {
        if !(self.overallocation.is_finite() && self.overallocation >= 1.0) {
            return Err(PilotError::InvalidPolicy("overallocation must be at least 1.0".into()));
        }
        let s = &self.default_pilot_shape;
        if s.nodes < 1 || s.cores_per_node < 1 || !(s.walltime.is_finite() && s.walltime > 0.0) {
            return Err(PilotError::InvalidPolicy("pilot shape must be positive".into()));
        }
        Ok(())
    }
}

/// Output of the implicit provisioning policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionPlan {
    pub shape: PilotShape,
    /// Pilots needed before the concurrency cap.
    pub required: u32,
    /// Pilots to submit.
    pub count: u32,
    pub capped: bool,
}

/// Smallest `n` with `n * capacity >= demand`.
pub fn pilots_needed(demand: f64, capacity: f64) -> u32 {
    if demand <= 0.0 || capacity <= 0.0 {
        return 0;
    }
    let mut n = (demand / capacity).ceil().max(1.0) as u32;
    while n > 1 && f64::from(n - 1) * capacity >= demand {
        n -= 1;
    }
    while f64::from(n) * capacity < demand {
        n += 1;
    }
    n
}

/// Sizes the pilots for a demand. The default shape is widened when a
/// single task would not fit in it.
pub fn plan_provisioning(
    stats: &WorkloadStats,
    dcr: &DcrDescriptor,
    policy: &ProvisioningPolicy,
    live_pilots: u32,
) -> Result<ProvisionPlan, PilotError> {
    if policy.mode != ProvisioningMode::Implicit {
        return Err(PilotError::NotImplicit);
    }
    policy.validate()?;
    let mut shape = policy.default_pilot_shape;
    if stats.max_task_cores > shape.cores() {
        let nodes = stats.max_task_cores.div_ceil(dcr.cores_per_node);
        if nodes > dcr.nodes {
            return Err(PilotError::TaskTooLargeForPilotShape {
                cores: stats.max_task_cores,
                dcr_id: dcr.dcr_id.clone(),
                max: dcr.total_cores(),
            });
        }
        shape.nodes = nodes;
        shape.cores_per_node = dcr.cores_per_node;
    }
    let required = pilots_needed(stats.total_core_seconds * policy.overallocation, shape.capacity());
    let room = dcr.max_concurrent_jobs.saturating_sub(live_pilots);
    Ok(ProvisionPlan {
        shape,
        required,
        count: required.min(room),
        capped: required > room,
    })
}

/// Liveness limits for pilots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotTimeouts {
    /// Seconds from job start to Register on DCRs without a scheduler cycle.
    pub bootstrap: f64,
    /// Scheduler cycles from job start to Register on batch DCRs.
    pub bootstrap_cycles: u32,
    pub heartbeat_interval: f64,
    pub heartbeat_misses: u32,
}

impl Default for PilotTimeouts {
    fn default() -> Self {
        PilotTimeouts {
            bootstrap: 60.0,
            bootstrap_cycles: 2,
            heartbeat_interval: 5.0,
            heartbeat_misses: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub spec: PilotSpec,
    pub state: PilotState,
    pub job_id: Option<String>,
    pub job_started: Option<f64>,
    pub last_heard: Option<f64>,
    pub draining: bool,
}

impl PilotRecord {
    pub fn status(&self) -> PilotStatus {
        self.state.status
    }
}

pub struct PilotManager {
    backends: BackendSet,
    pilots: BTreeMap<String, PilotRecord>,
    jobs: BTreeMap<String, String>,
    policy: ProvisioningPolicy,
    timeouts: PilotTimeouts,
    auto_seq: u32,
}

impl PilotManager {
    pub fn new(backends: BackendSet, policy: ProvisioningPolicy, timeouts: PilotTimeouts) -> Result<Self, PilotError> {
        policy.validate()?;
        Ok(PilotManager {
            backends,
            pilots: BTreeMap::new(),
            jobs: BTreeMap::new(),
            policy,
            timeouts,
            auto_seq: 0,
        })
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    pub fn backends_mut(&mut self) -> &mut BackendSet {
        &mut self.backends
    }

    pub fn policy(&self) -> &ProvisioningPolicy {
        &self.policy
    }

    pub fn pilot(&self, pilot_id: &str) -> Option<&PilotRecord> {
        self.pilots.get(pilot_id)
    }

    pub fn pilots(&self) -> impl Iterator<Item = &PilotRecord> {
        self.pilots.values()
    }

    pub fn pilot_for_job(&self, job_id: &str) -> Option<&str> {
        self.jobs.get(job_id).map(String::as_str)
    }

    pub fn submit_pilot(&mut self, spec: PilotSpec, now: f64, log: &mut EventLog) -> Result<String, PilotError> {
        if self.pilots.contains_key(&spec.pilot_id) {
            return Err(PilotError::DuplicatePilot(spec.pilot_id));
        }
        spec.validate()?;
        let backend = self.backends.get_mut(&spec.target_dcr)?;
        let job_id = backend.submit_job(JobRequest::for_pilot(&spec), now)?;
        let pid = spec.pilot_id.clone();
        let mut state = PilotState::new(now);
        log.push(now, Entity::Pilot, &pid, "Defined", attrs! {"dcr_id" => &spec.target_dcr});
        state.apply(PilotEvent::Submit, now)?;
        log.push(
            now,
            Entity::Pilot,
            &pid,
            "Submitted",
            attrs! {
                "dcr_id" => &spec.target_dcr,
                "job_id" => &job_id,
                "cores" => spec.total_cores(),
                "walltime" => spec.walltime,
            },
        );
        self.jobs.insert(job_id.clone(), pid.clone());
        self.pilots.insert(
            pid.clone(),
            PilotRecord {
                spec,
                state,
                job_id: Some(job_id),
                job_started: None,
                last_heard: None,
                draining: false,
            },
        );
        Ok(pid)
    }

    /// Runs the implicit policy against `stats` and submits the pilots.
    pub fn auto_provision(
        &mut self,
        stats: &WorkloadStats,
        now: f64,
        log: &mut EventLog,
    ) -> Result<(ProvisionPlan, Vec<String>), PilotError> {
        let dcr = match &self.policy.target_dcr {
            Some(id) => self.backends.get(id)?.descriptor().clone(),
            None => self
                .backends
                .descriptors()
                .next()
                .cloned()
                .ok_or_else(|| DcrError::UnknownDcr(String::new()))?,
        };
        let live = self
            .pilots
            .values()
            .filter(|p| p.spec.target_dcr == dcr.dcr_id && !p.status().is_terminal())
            .count() as u32;
        let plan = plan_provisioning(stats, &dcr, &self.policy, live)?;
        let mut ids = Vec::new();
        for _ in 0..plan.count {
            self.auto_seq += 1;
            let spec = PilotSpec {
                pilot_id: format!("auto-{:03}", self.auto_seq),
                target_dcr: dcr.dcr_id.clone(),
                nodes: plan.shape.nodes,
                cores_per_node: plan.shape.cores_per_node,
                walltime: plan.shape.walltime,
                bootstrap_mode: BootstrapMode::default(),
            };
            ids.push(self.submit_pilot(spec, now, log)?);
        }
        if plan.count > 0 || plan.capped {
            log.push(
                now,
                Entity::Workload,
                "provisioning",
                "AutoProvisioned",
                attrs! {"required" => plan.required, "submitted" => plan.count, "capped" => plan.capped},
            );
        }
        Ok((plan, ids))
    }

    /// The agent of a pilot announced itself. Returns the Ack to send.
    pub fn register(&mut self, reg: &Register, now: f64, log: &mut EventLog) -> Result<Message, PilotError> {
        let rec = self
            .pilots
            .get_mut(&reg.pilot_id)
            .ok_or_else(|| PilotError::UnknownPilot(reg.pilot_id.clone()))?;
        match rec.status() {
            PilotStatus::Submitted => {
                rec.state.apply(PilotEvent::Activate, now)?;
                rec.last_heard = Some(now);
                log.push(
                    now,
                    Entity::Pilot,
                    &reg.pilot_id,
                    "Active",
                    attrs! {
                        "cores" => reg.cores,
                        "walltime_remaining" => reg.walltime_remaining,
                        "job_id" => &rec.job_id,
                    },
                );
            }
            PilotStatus::Active => rec.last_heard = Some(now),
            _ => return Err(PilotError::AlreadyTerminal(reg.pilot_id.clone())),
        }
        Ok(Message::Ack(Ack {
            pilot_id: reg.pilot_id.clone(),
        }))
    }

    pub fn heartbeat(&mut self, hb: &Heartbeat, now: f64) -> Result<(), PilotError> {
        let rec = self
            .pilots
            .get_mut(&hb.pilot_id)
            .ok_or_else(|| PilotError::UnknownPilot(hb.pilot_id.clone()))?;
        rec.last_heard = Some(now);
        if hb.state == AgentPhase::Draining {
            rec.draining = true;
        }
        Ok(())
    }

    /// Any message from an agent counts as a sign of life.
    pub fn touch(&mut self, pilot_id: &str, now: f64) {
        if let Some(rec) = self.pilots.get_mut(pilot_id) {
            if rec.status() == PilotStatus::Active {
                rec.last_heard = Some(now);
            }
        }
    }

    /// Applies a DCR event. Returns the pilots that terminated because of it.
    pub fn on_job_event(&mut self, ev: &SimEvent, log: &mut EventLog) -> Result<Vec<String>, PilotError> {
        let Some(pid) = self.jobs.get(&ev.job_id).cloned() else {
            return Ok(Vec::new());
        };
        let rec = self.pilots.get_mut(&pid).expect("job index points at a pilot");
        if rec.status().is_terminal() {
            return Ok(Vec::new());
        }
        let now = ev.time;
        let event = match ev.kind {
            SimEventKind::JobStarted => {
                rec.job_started = Some(now);
                return Ok(Vec::new());
            }
            SimEventKind::JobEnded if rec.status() == PilotStatus::Active && rec.draining => PilotEvent::Complete,
            SimEventKind::JobEnded => PilotEvent::Fail(PilotFailure::AgentExited),
            SimEventKind::JobKilledWalltime => PilotEvent::Fail(PilotFailure::WalltimeExpired),
            SimEventKind::JobCanceled => PilotEvent::Cancel,
            SimEventKind::JobQueued | SimEventKind::SchedulerCycle => return Ok(Vec::new()),
        };
        Self::finish(rec, &pid, event, now, log)?;
        Ok(vec![pid])
    }

    fn finish(rec: &mut PilotRecord, pid: &str, event: PilotEvent, now: f64, log: &mut EventLog) -> Result<(), PilotError> {
        let status = rec.state.apply(event, now)?;
        let mut a = attrs! {"job_id" => &rec.job_id};
        if let PilotEvent::Fail(reason) = event {
            a.insert("reason".into(), serde_json::json!(format!("{reason:?}")));
        }
        log.push(now, Entity::Pilot, pid, status.name(), a);
        Ok(())
    }

    fn bootstrap_limit(&self, dcr_id: &str) -> f64 {
        self.backends
            .get(dcr_id)
            .ok()
            .and_then(|b| b.descriptor().scheduler_cycle)
            .map(|c| c * f64::from(self.timeouts.bootstrap_cycles))
            .unwrap_or(self.timeouts.bootstrap)
    }

    fn heartbeat_limit(&self) -> f64 {
        self.timeouts.heartbeat_interval * f64::from(self.timeouts.heartbeat_misses)
    }

    fn deadline(&self, rec: &PilotRecord) -> Option<(f64, PilotFailure)> {
        match rec.status() {
            PilotStatus::Submitted => rec
                .job_started
                .map(|s| (s + self.bootstrap_limit(&rec.spec.target_dcr), PilotFailure::BootstrapTimeout)),
            PilotStatus::Active => rec
                .last_heard
                .map(|h| (h + self.heartbeat_limit(), PilotFailure::HeartbeatLost)),
            _ => None,
        }
    }

    /// Earliest time at which `tick` may fail a pilot.
    pub fn next_deadline(&self) -> Option<f64> {
        self.pilots
            .values()
            .filter_map(|r| self.deadline(r).map(|d| d.0))
            .min_by(f64::total_cmp)
    }

    /// Fails pilots that missed their bootstrap or heartbeat deadline and
    /// cancels their jobs. Returns the failed pilots.
    pub fn tick(&mut self, now: f64, log: &mut EventLog) -> Result<Vec<String>, PilotError> {
        let expired: Vec<(String, PilotFailure)> = self
            .pilots
            .iter()
            .filter_map(|(id, r)| match self.deadline(r) {
                Some((d, why)) if now >= d => Some((id.clone(), why)),
                _ => None,
            })
            .collect();
        let mut out = Vec::new();
        for (pid, why) in expired {
            let rec = self.pilots.get_mut(&pid).expect("listed");
            Self::finish(rec, &pid, PilotEvent::Fail(why), now, log)?;
            let (dcr, job) = (rec.spec.target_dcr.clone(), rec.job_id.clone());
            if let Some(job) = job {
                self.cancel_job_quietly(&dcr, &job, now);
            }
            out.push(pid);
        }
        Ok(out)
    }

    fn cancel_job_quietly(&mut self, dcr_id: &str, job_id: &str, now: f64) {
        if let Ok(b) = self.backends.get_mut(dcr_id) {
            match b.cancel_job(job_id, now) {
                Ok(()) | Err(DcrError::AlreadyTerminal(_)) => {}
                Err(e) => log::warn!("canceling job {job_id}: {e}"),
            }
        }
    }

    /// Cancels a pilot and withdraws its job. For an Active pilot the
    /// Shutdown to send to its agent is returned as well.
    pub fn cancel_pilot(&mut self, pilot_id: &str, now: f64, log: &mut EventLog) -> Result<Option<Message>, PilotError> {
        let rec = self
            .pilots
            .get_mut(pilot_id)
            .ok_or_else(|| PilotError::UnknownPilot(pilot_id.to_string()))?;
        let was = rec.status();
        if was.is_terminal() {
            return Err(PilotError::AlreadyTerminal(pilot_id.to_string()));
        }
        Self::finish(rec, pilot_id, PilotEvent::Cancel, now, log)?;
        let (dcr, job) = (rec.spec.target_dcr.clone(), rec.job_id.clone());
        if let Some(job) = job {
            self.cancel_job_quietly(&dcr, &job, now);
        }
        Ok((was == PilotStatus::Active).then(Message::shutdown))
    }

    /// Graceful release. An Active pilot is asked to drain and becomes
    /// Done when its job ends; a queued pilot is canceled.
    pub fn drain_pilot(&mut self, pilot_id: &str, now: f64, log: &mut EventLog) -> Result<Option<Message>, PilotError> {
        let rec = self
            .pilots
            .get_mut(pilot_id)
            .ok_or_else(|| PilotError::UnknownPilot(pilot_id.to_string()))?;
        match rec.status() {
            PilotStatus::Active => {
                if rec.draining {
                    return Ok(None);
                }
                rec.draining = true;
                log.push(now, Entity::Pilot, pilot_id, "Draining", attrs!());
                Ok(Some(Message::shutdown()))
            }
            s if s.is_terminal() => Err(PilotError::AlreadyTerminal(pilot_id.to_string())),
            _ => self.cancel_pilot(pilot_id, now, log),
        }
    }

    /// Free and total cores over Active pilots; `busy` reports the cores in
    /// use on a pilot.
    pub fn overlay(&self, busy: impl Fn(&str) -> u32) -> ResourceOverlay {
        ResourceOverlay::from_pilots(
            self.pilots
                .values()
                .filter(|r| r.status() == PilotStatus::Active)
                .map(|r| {
                    let total = r.spec.total_cores();
                    PilotCapacity {
                        pilot_id: r.spec.pilot_id.clone(),
                        total_cores: total,
                        free_cores: total.saturating_sub(busy(&r.spec.pilot_id)),
                    }
                })
                .collect(),
        )
    }

    pub fn live_pilots(&self) -> impl Iterator<Item = &PilotRecord> {
        self.pilots.values().filter(|r| !r.status().is_terminal())
    }
}

impl PilotDirectory for PilotManager {
    fn pilot_status(&self, pilot_id: &str) -> Option<PilotStatus> {
        self.pilots.get(pilot_id).map(PilotRecord::status)
    }

    fn pilot_cores(&self, pilot_id: &str) -> Option<u32> {
        self.pilots.get(pilot_id).map(|r| r.spec.total_cores())
    }
}
