//! Task dispatching: workload queueing, dependency resolution, early binding
//! and the late-binding matchmaker that answers agent pull requests.
//!
//! There is a single dispatch path. Early binding pins a task to a pilot,
//! and the matchmaker then only hands that task to the pinned pilot once it
//! is Active. Everything else is bound late, at match time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs;
use crate::events::{Entity, EventLog};
use crate::model::{
    classify_workload, ModelError, PilotStatus, TaskEvent, TaskSpec, TaskState, TaskStatus,
    ValidatedWorkload, WorkloadClass,
};
use crate::protocol::{Assign, Reject, TaskRequest, TaskResult};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("workload {0} was already submitted")]
    DuplicateWorkloadId(String),
    #[error("task id {0} is already in use")]
    DuplicateTaskId(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown workload {0}")]
    UnknownWorkload(String),
    #[error("unknown pilot {0}")]
    UnknownPilot(String),
    #[error("pilot {0} is not active")]
    PilotNotActive(String),
    #[error("pilot {0} has already terminated")]
    PilotTerminal(String),
    #[error("task {task_id} cannot be bound in state {status}")]
    TaskNotBindable { task_id: String, status: TaskStatus },
    #[error("task {task_id} needs {cores} cores but pilot {pilot_id} has {pilot_cores}")]
    TaskTooLarge {
        task_id: String,
        cores: u32,
        pilot_id: String,
        pilot_cores: u32,
    },
    #[error("conflicting result for task {0}")]
    ConflictingResult(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QueueOrder {
    #[default]
    Fifo,
    LargestCoresFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchedulingPolicy {
    #[serde(default)]
    pub order: QueueOrder,
    /// How many times a task may be passed over for lack of free cores
    /// before the matchmaker stops handing out tasks queued behind it.
    /// Zero disables the guard.
    #[serde(default)]
    pub starvation_guard: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingKind {
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub task_id: String,
    pub pilot_id: String,
    pub bound_at: f64,
    pub kind: BindingKind,
}

/// What the workload manager needs to know about pilots.
pub trait PilotDirectory {
    fn pilot_status(&self, pilot_id: &str) -> Option<PilotStatus>;
    fn pilot_cores(&self, pilot_id: &str) -> Option<u32>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchConfig {
    pub policy: SchedulingPolicy,
    /// Total attempts per task, including the first. 1 means no retry.
    pub max_attempts: u32,
    /// On pilot loss, return early-bound undispatched tasks to the queue
    /// instead of failing them.
    pub rebind_on_pilot_loss: bool,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            policy: SchedulingPolicy::default(),
            max_attempts: 1,
            rebind_on_pilot_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchOutcome {
    Assign(Assign),
    NoWork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultOutcome {
    Accepted(TaskStatus),
    /// Same result seen before; ignored.
    Duplicate,
    /// Result for an attempt or pilot that no longer owns the task; ignored.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadOutcome {
    Completed,
    PartiallyFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStatus {
    pub workload_id: String,
    pub class: WorkloadClass,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    pub outcome: Option<WorkloadOutcome>,
    pub tasks: BTreeMap<TaskStatus, usize>,
}

/// Aggregate demand used by implicit provisioning.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub total_core_seconds: f64,
    pub max_task_cores: u32,
    pub task_count: usize,
}

impl WorkloadStats {
    fn add(&mut self, t: &TaskSpec) {
        self.total_core_seconds += t.core_seconds();
        self.max_task_cores = self.max_task_cores.max(t.cores);
        self.task_count += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Executor {
    Pilot(String),
    Direct,
}

#[derive(Debug, Clone)]
struct TaskEntry {
    spec: TaskSpec,
    workload_id: String,
    state: TaskState,
    preds_pending: usize,
    blocked: bool,
    binding: Option<Binding>,
    executor: Option<Executor>,
    queue_key: Option<(u64, String)>,
    skips: u32,
    rejected_by: BTreeSet<String>,
    /// Attempts spent on agent refusals; they do not count against
    /// `max_attempts`.
    rejections: u32,
    last_result: Option<TaskResult>,
    reason: Option<String>,
}

impl TaskEntry {
    fn eligible(&self) -> bool {
        !self.blocked
            && self.preds_pending == 0
            && matches!(self.state.status, TaskStatus::Ready | TaskStatus::Bound)
    }

    fn pilot(&self) -> Option<&str> {
        match &self.executor {
            Some(Executor::Pilot(p)) => Some(p),
            _ => None,
        }
    }

    fn settled(&self) -> bool {
        self.state.is_terminal() || self.blocked
    }
}

/// Snapshot of one task for status queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub workload_id: String,
    pub state: TaskState,
    pub blocked: bool,
    pub binding: Option<Binding>,
    pub pilot_id: Option<String>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone)]
struct WorkloadEntry {
    workload: ValidatedWorkload,
    class: WorkloadClass,
    submitted_at: f64,
    finished_at: Option<f64>,
    outcome: Option<WorkloadOutcome>,
}

pub struct WorkloadManager {
    config: DispatchConfig,
    tasks: BTreeMap<String, TaskEntry>,
    workloads: BTreeMap<String, WorkloadEntry>,
    queue: BTreeSet<(u64, String)>,
    busy: BTreeMap<String, u32>,
}

impl WorkloadManager {
    pub fn new(config: DispatchConfig) -> Self {
        WorkloadManager {
            config,
            tasks: BTreeMap::new(),
            workloads: BTreeMap::new(),
            queue: BTreeSet::new(),
            busy: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.config
    }

    /// Registers a workload. Roots become Ready; tasks that name a
    /// `pinned_pilot` are bound to it right away.
    pub fn submit_workload(
        &mut self,
        w: ValidatedWorkload,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<String, DispatchError> {
        let wid = w.workload_id().to_string();
        if self.workloads.contains_key(&wid) {
            return Err(DispatchError::DuplicateWorkloadId(wid));
        }
        for t in w.tasks() {
            if self.tasks.contains_key(&t.task_id) {
                return Err(DispatchError::DuplicateTaskId(t.task_id.clone()));
            }
            if let Some(pid) = &t.pinned_pilot {
                self.check_bindable(t, pid, pilots)?;
            }
        }

        let class = classify_workload(&w);
        log.push(
            now,
            Entity::Workload,
            &wid,
            "Submitted",
            attrs! {"class" => format!("{class:?}"), "tasks" => w.tasks().len()},
        );
        let mut states = w.initial_states(now);
        for id in w.topo_order() {
            let spec = w.tasks().iter().find(|t| &t.task_id == id).expect("topo order lists every task").clone();
            let preds = w.predecessors(id).count();
            let state = states.remove(id).expect("state for every task");
            log.push(now, Entity::Task, id, "Pending", attrs! {"workload_id" => &wid, "attempt" => 1, "cores" => spec.cores});
            self.tasks.insert(
                id.clone(),
                TaskEntry {
                    spec,
                    workload_id: wid.clone(),
                    state,
                    preds_pending: preds,
                    blocked: false,
                    binding: None,
                    executor: None,
                    queue_key: None,
                    skips: 0,
                    rejected_by: BTreeSet::new(),
                    rejections: 0,
                    last_result: None,
                    reason: None,
                },
            );
            if preds == 0 {
                self.apply(id, TaskEvent::DepsMet, now, log, attrs!())?;
            }
        }
        let pinned: Vec<(String, String)> = w
            .tasks()
            .iter()
            .filter_map(|t| t.pinned_pilot.clone().map(|p| (t.task_id.clone(), p)))
            .collect();
        self.workloads.insert(
            wid.clone(),
            WorkloadEntry {
                workload: w,
                class,
                submitted_at: now,
                finished_at: None,
                outcome: None,
            },
        );
        for (tid, pid) in pinned {
            self.bind(&tid, &pid, pilots, now, log)?;
        }
        for id in self.workload_task_ids(&wid) {
            self.refresh_queue(&id, now);
        }
        self.check_completion(&wid, now, log);
        Ok(wid)
    }

    fn check_bindable(&self, task: &TaskSpec, pilot_id: &str, pilots: &dyn PilotDirectory) -> Result<(), DispatchError> {
        let status = pilots
            .pilot_status(pilot_id)
            .ok_or_else(|| DispatchError::UnknownPilot(pilot_id.to_string()))?;
        if status.is_terminal() {
            return Err(DispatchError::PilotTerminal(pilot_id.to_string()));
        }
        let pilot_cores = pilots.pilot_cores(pilot_id).unwrap_or(0);
        if task.cores > pilot_cores {
            return Err(DispatchError::TaskTooLarge {
                task_id: task.task_id.clone(),
                cores: task.cores,
                pilot_id: pilot_id.to_string(),
                pilot_cores,
            });
        }
        Ok(())
    }

    /// Early binding: pins a Pending or Ready task to a pilot that may not
    /// be active yet.
    pub fn bind(
        &mut self,
        task_id: &str,
        pilot_id: &str,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<Binding, DispatchError> {
        let entry = self
            .tasks
            .get(task_id)
            .ok_or_else(|| DispatchError::UnknownTask(task_id.to_string()))?;
        if !matches!(entry.state.status, TaskStatus::Pending | TaskStatus::Ready) || entry.blocked {
            return Err(DispatchError::TaskNotBindable {
                task_id: task_id.to_string(),
                status: entry.state.status,
            });
        }
        self.check_bindable(&entry.spec, pilot_id, pilots)?;
        let binding = Binding {
            task_id: task_id.to_string(),
            pilot_id: pilot_id.to_string(),
            bound_at: now,
            kind: BindingKind::Early,
        };
        let entry = self.tasks.get_mut(task_id).expect("checked above");
        entry.spec.pinned_pilot = Some(pilot_id.to_string());
        entry.binding = Some(binding.clone());
        self.apply(task_id, TaskEvent::EarlyBound, now, log, attrs! {"pilot_id" => pilot_id, "binding" => "Early"})?;
        self.refresh_queue(task_id, now);
        Ok(binding)
    }

    /// Answers one pull request from an Active pilot. `requested_at` is when
    /// the request reached the manager.
    pub fn match_request(
        &mut self,
        req: &TaskRequest,
        pilots: &dyn PilotDirectory,
        requested_at: f64,
        now: f64,
        log: &mut EventLog,
    ) -> Result<MatchOutcome, DispatchError> {
        let pid = req.pilot_id.as_str();
        let status = pilots
            .pilot_status(pid)
            .ok_or_else(|| DispatchError::UnknownPilot(pid.to_string()))?;
        if status != PilotStatus::Active {
            return Err(DispatchError::PilotNotActive(pid.to_string()));
        }
        let pilot_cores = pilots.pilot_cores(pid).unwrap_or(0);
        let free = req.free_cores.min(pilot_cores.saturating_sub(self.busy_cores(pid)));
        let guard = self.config.policy.starvation_guard;

        let mut chosen = None;
        let mut skipped = Vec::new();
        for (_, tid) in &self.queue {
            let e = &self.tasks[tid];
            if e.spec.pinned_pilot.as_deref().is_some_and(|p| p != pid) || e.rejected_by.contains(pid) {
                continue;
            }
            if e.spec.cores > free {
                if e.spec.cores <= pilot_cores {
                    if guard > 0 && e.skips >= guard {
                        break;
                    }
                    skipped.push(tid.clone());
                }
                continue;
            }
            chosen = Some(tid.clone());
            break;
        }
        for tid in skipped {
            self.tasks.get_mut(&tid).expect("queued task exists").skips += 1;
        }
        let Some(tid) = chosen else {
            return Ok(MatchOutcome::NoWork);
        };

        let entry = self.tasks.get_mut(&tid).expect("queued task exists");
        entry.skips = 0;
        let kind = match &entry.binding {
            Some(b) if b.kind == BindingKind::Early && b.pilot_id == pid => BindingKind::Early,
            _ => {
                entry.binding = Some(Binding {
                    task_id: tid.clone(),
                    pilot_id: pid.to_string(),
                    bound_at: now,
                    kind: BindingKind::Late,
                });
                BindingKind::Late
            }
        };
        entry.executor = Some(Executor::Pilot(pid.to_string()));
        let cores = entry.spec.cores;
        *self.busy.entry(pid.to_string()).or_insert(0) += cores;
        self.apply(
            &tid,
            TaskEvent::Dispatch,
            now,
            log,
            attrs! {
                "pilot_id" => pid,
                "cores" => cores,
                "binding" => format!("{kind:?}"),
                "free_cores" => req.free_cores,
                "requested_at" => requested_at,
            },
        )?;
        self.refresh_queue(&tid, now);
        let entry = &self.tasks[&tid];
        Ok(MatchOutcome::Assign(Assign {
            task: entry.spec.clone(),
            attempt: entry.state.attempt,
        }))
    }

    /// Handles a Result from an agent.
    pub fn record_result(
        &mut self,
        res: &TaskResult,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<ResultOutcome, DispatchError> {
        let entry = self
            .tasks
            .get(&res.task_id)
            .ok_or_else(|| DispatchError::UnknownTask(res.task_id.clone()))?;
        let live = matches!(entry.state.status, TaskStatus::Dispatched | TaskStatus::Running)
            && entry.state.attempt == res.attempt
            && entry.pilot() == Some(res.pilot_id.as_str());
        if !live {
            return match &entry.last_result {
                Some(prev) if prev == res => Ok(ResultOutcome::Duplicate),
                Some(prev) if prev.attempt == res.attempt && prev.pilot_id == res.pilot_id => {
                    Err(DispatchError::ConflictingResult(res.task_id.clone()))
                }
                _ => Ok(ResultOutcome::Stale),
            };
        }
        self.tasks.get_mut(&res.task_id).expect("checked").last_result = Some(res.clone());
        let status = self.finish(
            &res.task_id,
            res.exit_code,
            res.start,
            res.end,
            res.reason.clone(),
            pilots,
            now,
            log,
        )?;
        Ok(ResultOutcome::Accepted(status))
    }

    /// The agent handed a dispatched task back. It returns to the queue,
    /// and the rejecting pilot is not offered it again.
    pub fn reject(
        &mut self,
        rej: &Reject,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<bool, DispatchError> {
        let entry = self
            .tasks
            .get(&rej.task_id)
            .ok_or_else(|| DispatchError::UnknownTask(rej.task_id.clone()))?;
        if entry.state.status != TaskStatus::Dispatched
            || entry.state.attempt != rej.attempt
            || entry.pilot() != Some(rej.pilot_id.as_str())
        {
            return Ok(false);
        }
        let pinned_here = entry.spec.pinned_pilot.as_deref() == Some(rej.pilot_id.as_str());
        self.release(&rej.task_id);
        let reason = format!("{:?}", rej.reason);
        if pinned_here {
            // The only pilot allowed to run it refused it.
            self.fail(&rej.task_id, &reason, pilots, now, now, log)?;
            return Ok(true);
        }
        // The refused assignment closes its attempt; the task goes back to
        // Ready under a fresh attempt number so a late message about the
        // refused one cannot be mistaken for the next.
        let entry = self.tasks.get_mut(&rej.task_id).expect("checked");
        entry.rejected_by.insert(rej.pilot_id.clone());
        entry.rejections += 1;
        entry.executor = None;
        entry.binding = None;
        let reason = format!("Rejected: {reason}");
        self.apply(&rej.task_id, TaskEvent::Fail, now, log, attrs! {"pilot_id" => &rej.pilot_id, "reason" => reason})?;
        self.apply(&rej.task_id, TaskEvent::Retry, now, log, attrs! {"retry" => true})?;
        self.refresh_queue(&rej.task_id, now);
        Ok(true)
    }

    /// A pilot is gone. Its in-flight tasks fail with `PilotLost`; tasks
    /// early-bound to it either fail with `BindingLost` or, with
    /// `rebind_on_pilot_loss`, go back to the queue unpinned.
    pub fn on_pilot_lost(
        &mut self,
        pilot_id: &str,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<(), DispatchError> {
        let running: Vec<String> = self
            .tasks
            .iter()
            .filter(|(_, e)| {
                e.pilot() == Some(pilot_id) && matches!(e.state.status, TaskStatus::Dispatched | TaskStatus::Running)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for tid in running {
            self.release(&tid);
            self.fail(&tid, "PilotLost", pilots, now, now, log)?;
        }

        let bound: Vec<String> = self
            .tasks
            .iter()
            .filter(|(_, e)| e.state.status == TaskStatus::Bound && e.spec.pinned_pilot.as_deref() == Some(pilot_id))
            .map(|(id, _)| id.clone())
            .collect();
        for tid in bound {
            if self.config.rebind_on_pilot_loss {
                let e = self.tasks.get_mut(&tid).expect("listed");
                e.spec.pinned_pilot = None;
                e.binding = None;
                self.apply(&tid, TaskEvent::Unbind, now, log, attrs! {"pilot_id" => pilot_id})?;
                let e = &self.tasks[&tid];
                if e.preds_pending == 0 && !e.blocked {
                    self.apply(&tid, TaskEvent::DepsMet, now, log, attrs!())?;
                }
                self.refresh_queue(&tid, now);
            } else {
                self.fail(&tid, "BindingLost", pilots, now, now, log)?;
            }
        }
        Ok(())
    }

    pub fn cancel_task(&mut self, task_id: &str, now: f64, log: &mut EventLog) -> Result<(), DispatchError> {
        let entry = self
            .tasks
            .get(task_id)
            .ok_or_else(|| DispatchError::UnknownTask(task_id.to_string()))?;
        if entry.state.is_terminal() {
            return Err(DispatchError::Model(ModelError::IllegalTransition {
                state: entry.state.status.name().into(),
                event: "Cancel".into(),
            }));
        }
        self.release(task_id);
        self.apply(task_id, TaskEvent::Cancel, now, log, attrs!())?;
        self.refresh_queue(task_id, now);
        self.block_successors(task_id);
        let wid = self.tasks[task_id].workload_id.clone();
        self.check_completion(&wid, now, log);
        Ok(())
    }

    pub fn cancel_workload(&mut self, workload_id: &str, now: f64, log: &mut EventLog) -> Result<(), DispatchError> {
        if !self.workloads.contains_key(workload_id) {
            return Err(DispatchError::UnknownWorkload(workload_id.to_string()));
        }
        for tid in self.workload_task_ids(workload_id) {
            if !self.tasks[&tid].state.is_terminal() {
                self.cancel_task(&tid, now, log)?;
            }
        }
        Ok(())
    }

    /// Direct-submission mode: takes every dispatchable task, in policy
    /// order, without a pilot.
    pub fn dispatch_direct(&mut self, now: f64, log: &mut EventLog) -> Result<Vec<Assign>, DispatchError> {
        let ids: Vec<String> = self.queue.iter().map(|(_, id)| id.clone()).collect();
        let mut out = Vec::with_capacity(ids.len());
        for tid in ids {
            let e = self.tasks.get_mut(&tid).expect("queued task exists");
            e.executor = Some(Executor::Direct);
            let cores = e.spec.cores;
            self.apply(&tid, TaskEvent::Dispatch, now, log, attrs! {"mode" => "direct", "cores" => cores})?;
            self.refresh_queue(&tid, now);
            let e = &self.tasks[&tid];
            out.push(Assign {
                task: e.spec.clone(),
                attempt: e.state.attempt,
            });
        }
        Ok(out)
    }

    /// Direct mode: the task's own DCR job started.
    pub fn direct_started(&mut self, task_id: &str, attempt: u32, now: f64, log: &mut EventLog) -> Result<(), DispatchError> {
        let e = self
            .tasks
            .get(task_id)
            .ok_or_else(|| DispatchError::UnknownTask(task_id.to_string()))?;
        if e.executor == Some(Executor::Direct) && e.state.attempt == attempt && e.state.status == TaskStatus::Dispatched {
            self.apply(task_id, TaskEvent::Start, now, log, attrs! {"mode" => "direct", "start" => now})?;
        }
        Ok(())
    }

    /// Direct mode: the task's DCR job ended.
    #[allow(clippy::too_many_arguments)]
    pub fn direct_finished(
        &mut self,
        task_id: &str,
        attempt: u32,
        exit_code: i32,
        start: f64,
        reason: Option<String>,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<ResultOutcome, DispatchError> {
        let e = self
            .tasks
            .get(task_id)
            .ok_or_else(|| DispatchError::UnknownTask(task_id.to_string()))?;
        if e.executor != Some(Executor::Direct)
            || e.state.attempt != attempt
            || !matches!(e.state.status, TaskStatus::Dispatched | TaskStatus::Running)
        {
            return Ok(ResultOutcome::Stale);
        }
        let status = self.finish(task_id, exit_code, start, now, reason, pilots, now, log)?;
        Ok(ResultOutcome::Accepted(status))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        task_id: &str,
        exit_code: i32,
        start: f64,
        end: f64,
        reason: Option<String>,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<TaskStatus, DispatchError> {
        let pilot = self.tasks[task_id].pilot().map(str::to_string);
        let cores = self.tasks[task_id].spec.cores;
        self.release(task_id);
        if self.tasks[task_id].state.status == TaskStatus::Dispatched {
            let e = self.tasks.get_mut(task_id).expect("exists");
            e.state.apply(TaskEvent::Start, start)?;
            log.push(
                now,
                Entity::Task,
                task_id,
                "Running",
                attrs! {"workload_id" => &e.workload_id, "attempt" => e.state.attempt, "pilot_id" => &pilot, "start" => start},
            );
        }
        let mut extra = attrs! {
            "pilot_id" => &pilot,
            "cores" => cores,
            "start" => start,
            "end" => end,
            "exit_code" => exit_code,
        };
        if exit_code == 0 {
            self.apply_at(task_id, TaskEvent::Succeed, end, now, log, extra)?;
            self.release_successors(task_id, now, log)?;
            let wid = self.tasks[task_id].workload_id.clone();
            self.check_completion(&wid, now, log);
            Ok(TaskStatus::Done)
        } else {
            let reason = reason.unwrap_or_else(|| format!("exit code {exit_code}"));
            extra.insert("reason".into(), serde_json::json!(&reason));
            self.tasks.get_mut(task_id).expect("exists").reason = Some(reason);
            self.apply_at(task_id, TaskEvent::Fail, end, now, log, extra)?;
            self.after_failure(task_id, pilots, now, log)?;
            Ok(self.tasks[task_id].state.status)
        }
    }

    /// Fails a Bound or Dispatched task that never produced a result.
    fn fail(
        &mut self,
        task_id: &str,
        reason: &str,
        pilots: &dyn PilotDirectory,
        at: f64,
        now: f64,
        log: &mut EventLog,
    ) -> Result<(), DispatchError> {
        let pilot = self.tasks[task_id].pilot().map(str::to_string);
        self.tasks.get_mut(task_id).expect("exists").reason = Some(reason.to_string());
        self.apply_at(task_id, TaskEvent::Fail, at, now, log, attrs! {"reason" => reason, "pilot_id" => pilot})?;
        self.after_failure(task_id, pilots, now, log)
    }

    fn after_failure(
        &mut self,
        task_id: &str,
        pilots: &dyn PilotDirectory,
        now: f64,
        log: &mut EventLog,
    ) -> Result<(), DispatchError> {
        let e = self.tasks.get_mut(task_id).expect("exists");
        e.executor = None;
        e.binding = None;
        self.refresh_queue(task_id, now);
        let t = &self.tasks[task_id];
        let pin_alive = t
            .spec
            .pinned_pilot
            .as_deref()
            .map(|pid| pilots.pilot_status(pid).is_some_and(|s| !s.is_terminal()));
        // Without rebinding, a task whose pinned pilot is gone has nowhere to retry.
        let retry_possible = pin_alive != Some(false) || self.config.rebind_on_pilot_loss;
        if retry_possible && t.state.attempt - t.rejections < self.config.max_attempts {
            let mut attrs = attrs! {"retry" => true};
            if pin_alive == Some(false) {
                let lost = self.tasks.get_mut(task_id).expect("exists").spec.pinned_pilot.take();
                attrs.insert("unbound_from".into(), serde_json::json!(lost));
            }
            self.apply(task_id, TaskEvent::Retry, now, log, attrs)?;
            if let Some(pid) = self.tasks[task_id].spec.pinned_pilot.clone() {
                let e = self.tasks.get_mut(task_id).expect("exists");
                e.binding = Some(Binding {
                    task_id: task_id.to_string(),
                    pilot_id: pid.clone(),
                    bound_at: now,
                    kind: BindingKind::Early,
                });
                self.apply(task_id, TaskEvent::EarlyBound, now, log, attrs! {"pilot_id" => pid, "binding" => "Early"})?;
            }
            self.refresh_queue(task_id, now);
        } else {
            self.block_successors(task_id);
            let wid = self.tasks[task_id].workload_id.clone();
            self.check_completion(&wid, now, log);
        }
        Ok(())
    }

    fn release(&mut self, task_id: &str) {
        let e = &self.tasks[task_id];
        if !matches!(e.state.status, TaskStatus::Dispatched | TaskStatus::Running) {
            return;
        }
        if let Some(pid) = e.pilot() {
            let cores = e.spec.cores;
            if let Some(b) = self.busy.get_mut(pid) {
                *b = b.saturating_sub(cores);
            }
        }
    }

    fn release_successors(&mut self, task_id: &str, now: f64, log: &mut EventLog) -> Result<(), DispatchError> {
        let wid = self.tasks[task_id].workload_id.clone();
        let succs: Vec<String> = self.workloads[&wid]
            .workload
            .successors(task_id)
            .map(str::to_string)
            .collect();
        for s in succs {
            let e = self.tasks.get_mut(&s).expect("successor exists");
            e.preds_pending -= 1;
            if e.preds_pending == 0 && !e.blocked {
                if e.state.status == TaskStatus::Pending {
                    self.apply(&s, TaskEvent::DepsMet, now, log, attrs!())?;
                }
                self.refresh_queue(&s, now);
            }
        }
        Ok(())
    }

    fn block_successors(&mut self, task_id: &str) {
        let wid = self.tasks[task_id].workload_id.clone();
        let mut stack: Vec<String> = self.workloads[&wid].workload.successors(task_id).map(str::to_string).collect();
        while let Some(s) = stack.pop() {
            let e = self.tasks.get_mut(&s).expect("successor exists");
            if e.blocked || e.state.is_terminal() {
                continue;
            }
            e.blocked = true;
            stack.extend(self.workloads[&wid].workload.successors(&s).map(str::to_string));
            self.refresh_queue(&s, 0.0);
        }
    }

    fn check_completion(&mut self, workload_id: &str, now: f64, log: &mut EventLog) {
        let w = &self.workloads[workload_id];
        if w.finished_at.is_some() {
            return;
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in w.workload.tasks() {
            let e = &self.tasks[&t.task_id];
            if !e.settled() {
                return;
            }
            let key = if e.blocked && !e.state.is_terminal() { "Blocked" } else { e.state.status.name() };
            *counts.entry(key).or_default() += 1;
        }
        let all_done = counts.keys().all(|k| *k == "Done");
        let outcome = if all_done { WorkloadOutcome::Completed } else { WorkloadOutcome::PartiallyFailed };
        let w = self.workloads.get_mut(workload_id).expect("exists");
        w.finished_at = Some(now);
        w.outcome = Some(outcome);
        log.push(now, Entity::Workload, workload_id, format!("{outcome:?}"), attrs! {"tasks" => counts});
    }

    fn refresh_queue(&mut self, task_id: &str, now: f64) {
        let order = self.config.policy.order;
        let e = self.tasks.get_mut(task_id).expect("task exists");
        let eligible = e.eligible();
        match (&e.queue_key, eligible) {
            (Some(_), true) | (None, false) => {}
            (Some(key), false) => {
                self.queue.remove(key);
                e.queue_key = None;
            }
            (None, true) => {
                let primary = match order {
                    QueueOrder::Fifo => now.max(0.0).to_bits(),
                    QueueOrder::LargestCoresFirst => u64::from(u32::MAX - e.spec.cores),
                };
                let key = (primary, task_id.to_string());
                self.queue.insert(key.clone());
                e.queue_key = Some(key);
            }
        }
    }

    fn apply(
        &mut self,
        task_id: &str,
        event: TaskEvent,
        now: f64,
        log: &mut EventLog,
        extra: crate::events::Attrs,
    ) -> Result<(), DispatchError> {
        self.apply_at(task_id, event, now, now, log, extra)
    }

    /// Applies a transition stamped at `at` in the task state and logged at `now`.
    fn apply_at(
        &mut self,
        task_id: &str,
        event: TaskEvent,
        at: f64,
        now: f64,
        log: &mut EventLog,
        extra: crate::events::Attrs,
    ) -> Result<(), DispatchError> {
        let e = self.tasks.get_mut(task_id).expect("task exists");
        let status = e.state.apply(event, at)?;
        let mut attrs = attrs! {"workload_id" => &e.workload_id, "attempt" => e.state.attempt};
        attrs.extend(extra);
        log.push(now, Entity::Task, task_id, status.name(), attrs);
        Ok(())
    }

    fn workload_task_ids(&self, workload_id: &str) -> Vec<String> {
        self.workloads[workload_id]
            .workload
            .tasks()
            .iter()
            .map(|t| t.task_id.clone())
            .collect()
    }

    pub fn busy_cores(&self, pilot_id: &str) -> u32 {
        self.busy.get(pilot_id).copied().unwrap_or(0)
    }

    pub fn task(&self, task_id: &str) -> Option<TaskView> {
        self.tasks.get(task_id).map(|e| TaskView {
            task_id: task_id.to_string(),
            workload_id: e.workload_id.clone(),
            state: e.state.clone(),
            blocked: e.blocked,
            binding: e.binding.clone(),
            pilot_id: e.pilot().map(str::to_string),
            reason: e.reason.clone(),
        })
    }

    pub fn task_status(&self, task_id: &str) -> Option<TaskStatus> {
        self.tasks.get(task_id).map(|e| e.state.status)
    }

    pub fn workload_status(&self, workload_id: &str) -> Option<WorkloadStatus> {
        let w = self.workloads.get(workload_id)?;
        let mut tasks = BTreeMap::new();
        for t in w.workload.tasks() {
            *tasks.entry(self.tasks[&t.task_id].state.status).or_default() += 1;
        }
        Some(WorkloadStatus {
            workload_id: workload_id.to_string(),
            class: w.class,
            submitted_at: w.submitted_at,
            finished_at: w.finished_at,
            outcome: w.outcome,
            tasks,
        })
    }

    pub fn workload_ids(&self) -> impl Iterator<Item = &str> {
        self.workloads.keys().map(String::as_str)
    }

    pub fn all_workloads_finished(&self) -> bool {
        self.workloads.values().all(|w| w.finished_at.is_some())
    }

    /// Demand of one workload's tasks.
    pub fn workload_stats(&self, workload_id: &str) -> Option<WorkloadStats> {
        let w = self.workloads.get(workload_id)?;
        let mut stats = WorkloadStats::default();
        w.workload.tasks().iter().for_each(|t| stats.add(t));
        Some(stats)
    }

    /// Demand of every task that still needs a pilot to run on.
    pub fn outstanding_stats(&self) -> WorkloadStats {
        let mut stats = WorkloadStats::default();
        for e in self.tasks.values() {
            if !e.blocked && matches!(e.state.status, TaskStatus::Pending | TaskStatus::Ready | TaskStatus::Bound) {
                stats.add(&e.spec);
            }
        }
        stats
    }

    /// Tasks that can be dispatched right now, in policy order.
    pub fn queued(&self) -> impl Iterator<Item = &str> {
        self.queue.iter().map(|(_, id)| id.as_str())
    }
}
