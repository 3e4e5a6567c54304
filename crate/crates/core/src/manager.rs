//! The pilot manager and workload manager in one process, fed by agent
//! messages, DCR events and clock ticks. Used by the simulator harness and
//! by the TCP server alike.

use serde_json::json;
use thiserror::Error;

use crate::attrs;
use crate::events::{Entity, EventLog};
use crate::model::{validate_workload, JobPayload, ModelError, PilotSpec, PilotStatus, WorkloadSpec};
use crate::pilot_manager::{PilotError, PilotManager, ProvisioningMode};
use crate::protocol::Message;
use crate::sim::{SimEvent, SimEventKind};
use crate::workload_manager::{DispatchError, MatchOutcome, WorkloadManager, WorkloadStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManagerError {
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unexpected {0} message from an agent")]
    UnexpectedMessage(&'static str),
}

pub struct Manager {
    pilots: PilotManager,
    workloads: WorkloadManager,
    log: EventLog,
    outbox: Vec<(String, Message)>,
}

impl Manager {
    pub fn new(pilots: PilotManager, workloads: WorkloadManager) -> Self {
        Manager {
            pilots,
            workloads,
            log: EventLog::new(),
            outbox: Vec::new(),
        }
    }

    pub fn pilots(&self) -> &PilotManager {
        &self.pilots
    }

    pub fn pilots_mut(&mut self) -> &mut PilotManager {
        &mut self.pilots
    }

    pub fn workloads(&self) -> &WorkloadManager {
        &self.workloads
    }

    /// Both halves plus the log, for callers that drive dispatch directly.
    pub fn parts_mut(&mut self) -> (&mut PilotManager, &mut WorkloadManager, &mut EventLog) {
        (&mut self.pilots, &mut self.workloads, &mut self.log)
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    /// Messages for agents other than the one being answered, keyed by
    /// pilot id.
    pub fn take_outbox(&mut self) -> Vec<(String, Message)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn submit_pilot(&mut self, spec: PilotSpec, now: f64) -> Result<String, ManagerError> {
        Ok(self.pilots.submit_pilot(spec, now, &mut self.log)?)
    }

    pub fn submit_workload(&mut self, spec: WorkloadSpec, now: f64) -> Result<String, ManagerError> {
        let w = validate_workload(spec)?;
        let wid = self.workloads.submit_workload(w, &self.pilots, now, &mut self.log)?;
        if self.implicit() {
            let stats = self.workloads.workload_stats(&wid).unwrap_or_default();
            self.provision_for(stats, now)?;
        }
        Ok(wid)
    }

    pub fn bind(&mut self, task_id: &str, pilot_id: &str, now: f64) -> Result<(), ManagerError> {
        self.workloads.bind(task_id, pilot_id, &self.pilots, now, &mut self.log)?;
        Ok(())
    }

    fn implicit(&self) -> bool {
        self.pilots.policy().mode == ProvisioningMode::Implicit
    }

    /// Submits enough pilots for `stats`, counting what live pilots can
    /// still deliver.
    fn provision_for(&mut self, mut stats: WorkloadStats, now: f64) -> Result<(), ManagerError> {
        if stats.task_count == 0 {
            return Ok(());
        }
        let mut live_capacity = 0.0;
        let mut fits = false;
        for r in self.pilots.live_pilots().filter(|r| !r.draining) {
            let used = r.state.entered_at(PilotStatus::Active).map_or(0.0, |a| now - a);
            live_capacity += f64::from(r.spec.total_cores()) * (r.spec.walltime - used).max(0.0);
            fits |= r.spec.total_cores() >= stats.max_task_cores;
        }
        let oa = self.pilots.policy().overallocation;
        let uncovered = (stats.total_core_seconds * oa - live_capacity).max(0.0) / oa;
        if uncovered <= 0.0 && fits {
            return Ok(());
        }
        // With a live pilot too small for the largest task, one more is needed.
        stats.total_core_seconds = uncovered.max(f64::MIN_POSITIVE);
        self.pilots.auto_provision(&stats, now, &mut self.log)?;
        Ok(())
    }

    /// Handles one message from an agent and returns the replies to it.
    pub fn handle_message(&mut self, msg: Message, now: f64) -> Result<Vec<Message>, ManagerError> {
        let mut replies = Vec::new();
        match msg {
            Message::Register(reg) => match self.pilots.register(&reg, now, &mut self.log) {
                Ok(ack) => replies.push(ack),
                Err(PilotError::AlreadyTerminal(_)) => replies.push(Message::shutdown()),
                Err(e) => return Err(e.into()),
            },
            Message::Heartbeat(hb) => {
                self.pilots.heartbeat(&hb, now)?;
                if self.pilot_gone(&hb.pilot_id) {
                    replies.push(Message::shutdown());
                }
            }
            Message::TaskRequest(req) => {
                self.pilots.touch(&req.pilot_id, now);
                if self.pilot_gone(&req.pilot_id) {
                    replies.push(Message::shutdown());
                } else if self.pilots.pilot(&req.pilot_id).is_some_and(|r| r.draining) {
                    replies.push(Message::no_work());
                } else {
                    match self.workloads.match_request(&req, &self.pilots, now, now, &mut self.log)? {
                        MatchOutcome::Assign(a) => replies.push(Message::Assign(a)),
                        MatchOutcome::NoWork => replies.push(Message::no_work()),
                    }
                }
            }
            Message::Result(res) => {
                self.pilots.touch(&res.pilot_id, now);
                match self.workloads.record_result(&res, &self.pilots, now, &mut self.log) {
                    Ok(_) => {}
                    Err(e @ DispatchError::ConflictingResult(_)) => log::warn!("{e}"),
                    Err(e) => return Err(e.into()),
                }
                self.after_progress(now)?;
            }
            Message::Reject(rej) => {
                self.pilots.touch(&rej.pilot_id, now);
                self.workloads.reject(&rej, &self.pilots, now, &mut self.log)?;
                self.after_progress(now)?;
            }
            other => return Err(ManagerError::UnexpectedMessage(other.type_name())),
        }
        Ok(replies)
    }

    fn pilot_gone(&self, pilot_id: &str) -> bool {
        self.pilots
            .pilot(pilot_id)
            .is_some_and(|r| r.status().is_terminal())
    }

    /// Applies DCR events and records them in the log.
    pub fn on_backend_events(&mut self, events: &[(String, SimEvent)]) -> Result<(), ManagerError> {
        for (dcr_id, ev) in events {
            if ev.kind == SimEventKind::SchedulerCycle {
                continue;
            }
            let mut a = attrs! {"dcr_id" => dcr_id};
            if let Ok(rec) = self.pilots.backends().get(dcr_id).and_then(|b| b.query_job(&ev.job_id)) {
                let (kind, id) = match &rec.payload {
                    JobPayload::Pilot(p) => ("Pilot", p.pilot_id.clone()),
                    JobPayload::Task(t) => ("Task", t.task_id.clone()),
                    JobPayload::Background { label } => ("Background", label.clone()),
                };
                a.insert("payload".into(), json!(kind));
                a.insert("payload_id".into(), json!(id));
                if let Some(code) = rec.exit_code {
                    a.insert("exit_code".into(), json!(code));
                }
            }
            self.log.push(ev.time, Entity::Job, &ev.job_id, format!("{:?}", ev.kind), a);
            let lost = self.pilots.on_job_event(ev, &mut self.log)?;
            self.handle_lost(&lost, ev.time)?;
        }
        Ok(())
    }

    /// Checks pilot deadlines.
    pub fn tick(&mut self, now: f64) -> Result<(), ManagerError> {
        let lost = self.pilots.tick(now, &mut self.log)?;
        self.handle_lost(&lost, now)
    }

    pub fn next_deadline(&self) -> Option<f64> {
        self.pilots.next_deadline()
    }

    fn handle_lost(&mut self, lost: &[String], now: f64) -> Result<(), ManagerError> {
        if lost.is_empty() {
            return Ok(());
        }
        let mut replace = false;
        for pid in lost {
            self.workloads.on_pilot_lost(pid, &self.pilots, now, &mut self.log)?;
            // A pilot that ran out of walltime or died leaves work behind;
            // one the operator canceled is not replaced.
            replace |= self.pilots.pilot(pid).is_some_and(|r| r.status() != PilotStatus::Canceled);
        }
        if replace && self.implicit() && !self.workloads.all_workloads_finished() {
            let stats = self.workloads.outstanding_stats();
            self.provision_for(stats, now)?;
        }
        self.after_progress(now)
    }

    /// Releases implicit pilots once every workload has finished.
    fn after_progress(&mut self, now: f64) -> Result<(), ManagerError> {
        if !self.implicit() || self.workloads.workload_ids().next().is_none() || !self.workloads.all_workloads_finished() {
            return Ok(());
        }
        let live: Vec<String> = self.pilots.live_pilots().map(|r| r.spec.pilot_id.clone()).collect();
        for pid in live {
            if let Some(msg) = self.pilots.drain_pilot(&pid, now, &mut self.log)? {
                self.outbox.push((pid, msg));
            }
        }
        Ok(())
    }

    pub fn cancel_pilot(&mut self, pilot_id: &str, now: f64) -> Result<(), ManagerError> {
        if let Some(msg) = self.pilots.cancel_pilot(pilot_id, now, &mut self.log)? {
            self.outbox.push((pilot_id.to_string(), msg));
        }
        self.workloads.on_pilot_lost(pilot_id, &self.pilots, now, &mut self.log)?;
        self.after_progress(now)
    }

    pub fn cancel_task(&mut self, task_id: &str, now: f64) -> Result<(), ManagerError> {
        self.workloads.cancel_task(task_id, now, &mut self.log)?;
        self.after_progress(now)
    }

    pub fn cancel_workload(&mut self, workload_id: &str, now: f64) -> Result<(), ManagerError> {
        self.workloads.cancel_workload(workload_id, now, &mut self.log)?;
        self.after_progress(now)
    }
}
