//! The task manager that runs inside a pilot.
//!
//! [`AgentCore`] holds the protocol state machine and performs no I/O: it
//! consumes messages, task exits and clock ticks, and answers with
//! [`Action`]s. The simulator drives it with logical time; [`runtime`] drives
//! it over TCP with real processes.

pub mod runtime;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::TaskSpec;
use crate::protocol::{
    AgentPhase, Heartbeat, Message, Register, Reject, RejectReason, TaskRequest, TaskResult,
};

/// Exit code reported for tasks killed at the drain deadline.
pub const WALLTIME_KILL_EXIT: i32 = 137;
/// Exit code reported when a task's executable could not be started.
pub const SPAWN_FAILURE_EXIT: i32 = 127;

/// Cores held by running tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotTable {
    total_cores: u32,
    entries: BTreeMap<String, u32>,
}

impl SlotTable {
    pub fn new(total_cores: u32) -> Self {
        SlotTable {
            total_cores,
            entries: BTreeMap::new(),
        }
    }

    pub fn total_cores(&self) -> u32 {
        self.total_cores
    }

    pub fn held(&self) -> u32 {
        self.entries.values().sum()
    }

    pub fn free(&self) -> u32 {
        self.total_cores - self.held()
    }

    /// Returns false, and changes nothing, when the cores are not free or
    /// the task already holds a slot.
    pub fn reserve(&mut self, task_id: &str, cores: u32) -> bool {
        if cores > self.free() || self.entries.contains_key(task_id) {
            return false;
        }
        self.entries.insert(task_id.to_string(), cores);
        assert!(self.held() <= self.total_cores, "slot table over capacity");
        true
    }

    pub fn release(&mut self, task_id: &str) -> Option<u32> {
        let cores = self.entries.remove(task_id);
        assert!(self.held() <= self.total_cores, "slot table over capacity");
        cores
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Where and with what environment a task runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionEnvironment {
    pub working_dir: PathBuf,
    pub environment: BTreeMap<String, String>,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
}

impl ExecutionEnvironment {
    /// Task variables override the agent's base environment.
    pub fn for_task(base_dir: &Path, base_env: &BTreeMap<String, String>, task: &TaskSpec) -> Self {
        let working_dir = base_dir.join(&task.task_id);
        let mut environment = base_env.clone();
        environment.extend(task.environment.iter().map(|(k, v)| (k.clone(), v.clone())));
        ExecutionEnvironment {
            stdout: working_dir.join("stdout"),
            stderr: working_dir.join("stderr"),
            working_dir,
            environment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub cores: u32,
    /// Seconds of walltime left when the agent starts.
    pub walltime: f64,
    /// Stop taking work this long before walltime runs out.
    pub drain_margin: f64,
    pub poll_interval: f64,
    pub heartbeat_interval: f64,
}

impl AgentConfig {
    pub fn new(cores: u32, walltime: f64) -> Self {
        AgentConfig {
            cores,
            walltime,
            drain_margin: 2.0,
            poll_interval: 1.0,
            heartbeat_interval: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentState {
    Connecting,
    Registered,
    Draining,
    Exited,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(Message),
    Launch { task: TaskSpec, attempt: u32 },
    Kill { task_id: String },
    Exit(i32),
}

#[derive(Debug, Clone)]
struct Running {
    attempt: u32,
    start: f64,
}

pub struct AgentCore {
    pilot_id: String,
    config: AgentConfig,
    walltime_end: f64,
    state: AgentState,
    slots: SlotTable,
    running: BTreeMap<String, Running>,
    request_outstanding: bool,
    next_request: f64,
    next_heartbeat: Option<f64>,
}

impl AgentCore {
    pub fn new(pilot_id: impl Into<String>, config: AgentConfig, now: f64) -> Self {
        AgentCore {
            pilot_id: pilot_id.into(),
            walltime_end: now + config.walltime,
            slots: SlotTable::new(config.cores),
            config,
            state: AgentState::Connecting,
            running: BTreeMap::new(),
            request_outstanding: false,
            next_request: now,
            next_heartbeat: None,
        }
    }

    pub fn pilot_id(&self) -> &str {
        &self.pilot_id
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn slots(&self) -> &SlotTable {
        &self.slots
    }

    /// When the agent stops taking work and kills what is left.
    pub fn drain_deadline(&self) -> f64 {
        self.walltime_end - self.config.drain_margin
    }

    fn remaining(&self, now: f64) -> f64 {
        self.walltime_end - now
    }

    /// First message of the session.
    pub fn start(&mut self, now: f64) -> Vec<Action> {
        vec![Action::Send(Message::Register(Register {
            pilot_id: self.pilot_id.clone(),
            cores: self.config.cores,
            walltime_remaining: self.remaining(now).max(0.0),
        }))]
    }

    pub fn on_message(&mut self, msg: Message, now: f64) -> Vec<Action> {
        let mut out = Vec::new();
        match msg {
            Message::Ack(_) if self.state == AgentState::Connecting => {
                self.state = AgentState::Registered;
                self.next_heartbeat = Some(now + self.config.heartbeat_interval);
                self.next_request = now;
            }
            Message::Assign(a) => {
                self.request_outstanding = false;
                let reason = if self.state != AgentState::Registered {
                    Some(RejectReason::Draining)
                } else if a.task.estimated_duration > self.remaining(now) - self.config.drain_margin {
                    Some(RejectReason::InsufficientWalltime)
                } else if !self.slots.reserve(&a.task.task_id, a.task.cores) {
                    Some(RejectReason::AssignOverCapacity)
                } else {
                    None
                };
                match reason {
                    Some(reason) => out.push(Action::Send(Message::Reject(Reject {
                        pilot_id: self.pilot_id.clone(),
                        task_id: a.task.task_id,
                        attempt: a.attempt,
                        reason,
                    }))),
                    None => {
                        self.running.insert(
                            a.task.task_id.clone(),
                            Running {
                                attempt: a.attempt,
                                start: now,
                            },
                        );
                        out.push(Action::Launch {
                            task: a.task,
                            attempt: a.attempt,
                        });
                    }
                }
            }
            Message::NoWork(_) => {
                self.request_outstanding = false;
                self.next_request = now + self.config.poll_interval;
            }
            Message::Shutdown(_) => self.begin_drain(),
            other => log::warn!("agent {} ignoring unexpected {}", self.pilot_id, other.type_name()),
        }
        self.progress(now, &mut out);
        out
    }

    /// A launched task ended by itself, or could not be started.
    pub fn on_task_exit(
        &mut self,
        task_id: &str,
        exit_code: i32,
        start: Option<f64>,
        reason: Option<String>,
        now: f64,
    ) -> Vec<Action> {
        let mut out = Vec::new();
        if let Some(r) = self.running.remove(task_id) {
            self.slots.release(task_id);
            out.push(self.result(task_id, r.attempt, exit_code, start.unwrap_or(r.start), now, reason));
            // Freed cores (and possibly newly ready successors) end any NoWork back-off.
            self.next_request = self.next_request.min(now);
        }
        self.progress(now, &mut out);
        out
    }

    /// Connection to the manager is gone: kill everything and give up.
    pub fn on_disconnect(&mut self) -> Vec<Action> {
        if self.state == AgentState::Exited {
            return Vec::new();
        }
        let mut out: Vec<Action> = self
            .running
            .keys()
            .map(|id| Action::Kill { task_id: id.clone() })
            .collect();
        self.running.clear();
        self.slots = SlotTable::new(self.config.cores);
        self.state = AgentState::Exited;
        out.push(Action::Exit(1));
        out
    }

    pub fn on_tick(&mut self, now: f64) -> Vec<Action> {
        let mut out = Vec::new();
        self.progress(now, &mut out);
        out
    }

    /// Next time `on_tick` has something to do.
    pub fn next_wakeup(&self) -> Option<f64> {
        match self.state {
            AgentState::Connecting | AgentState::Exited => None,
            AgentState::Registered => {
                let mut t = self.drain_deadline();
                if let Some(h) = self.next_heartbeat {
                    t = t.min(h);
                }
                if !self.request_outstanding && self.slots.free() > 0 {
                    t = t.min(self.next_request);
                }
                Some(t)
            }
            AgentState::Draining => {
                let h = self.next_heartbeat.unwrap_or(f64::INFINITY);
                Some(h.min(self.drain_deadline()))
            }
        }
    }

    fn begin_drain(&mut self) {
        if self.state == AgentState::Registered || self.state == AgentState::Connecting {
            self.state = AgentState::Draining;
        }
    }

    fn progress(&mut self, now: f64, out: &mut Vec<Action>) {
        if self.state == AgentState::Registered && now >= self.drain_deadline() {
            self.begin_drain();
        }
        if self.state == AgentState::Draining && now >= self.drain_deadline() {
            for (task_id, r) in std::mem::take(&mut self.running) {
                self.slots.release(&task_id);
                out.push(Action::Kill {
                    task_id: task_id.clone(),
                });
                out.push(self.result(&task_id, r.attempt, WALLTIME_KILL_EXIT, r.start, now, Some("WalltimeKill".into())));
            }
        }
        if matches!(self.state, AgentState::Registered | AgentState::Draining) {
            if let Some(h) = self.next_heartbeat.filter(|h| now >= *h) {
                out.push(self.heartbeat(AgentPhase::from(self.state)));
                let mut next = h + self.config.heartbeat_interval;
                while next <= now {
                    next += self.config.heartbeat_interval;
                }
                self.next_heartbeat = Some(next);
            }
        }
        match self.state {
            AgentState::Registered => {
                let free = self.slots.free();
                if !self.request_outstanding && free > 0 && now >= self.next_request {
                    self.request_outstanding = true;
                    out.push(Action::Send(Message::TaskRequest(TaskRequest {
                        pilot_id: self.pilot_id.clone(),
                        free_cores: free,
                    })));
                }
            }
            AgentState::Draining if self.running.is_empty() => {
                out.push(self.heartbeat(AgentPhase::Draining));
                self.state = AgentState::Exited;
                out.push(Action::Exit(0));
            }
            _ => {}
        }
    }

    fn heartbeat(&self, phase: AgentPhase) -> Action {
        Action::Send(Message::Heartbeat(Heartbeat {
            pilot_id: self.pilot_id.clone(),
            state: phase,
            free_cores: self.slots.free(),
        }))
    }

    fn result(&self, task_id: &str, attempt: u32, exit_code: i32, start: f64, end: f64, reason: Option<String>) -> Action {
        Action::Send(Message::Result(TaskResult {
            pilot_id: self.pilot_id.clone(),
            task_id: task_id.to_string(),
            attempt,
            exit_code,
            start,
            end,
            reason,
        }))
    }
}

impl From<AgentState> for AgentPhase {
    fn from(s: AgentState) -> Self {
        match s {
            AgentState::Draining | AgentState::Exited => AgentPhase::Draining,
            _ => AgentPhase::Active,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Ack, Assign};

    fn sent(actions: &[Action]) -> Vec<&Message> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    fn registered(cores: u32, walltime: f64) -> AgentCore {
        let mut cfg = AgentConfig::new(cores, walltime);
        cfg.drain_margin = 1.0;
        let mut a = AgentCore::new("p", cfg, 0.0);
        a.start(0.0);
        a
    }

    fn ack() -> Message {
        Message::Ack(Ack { pilot_id: "p".into() })
    }

    fn assign(id: &str, cores: u32, duration: f64) -> Message {
        Message::Assign(Assign {
            task: TaskSpec::new(id, "/bin/true", cores, duration),
            attempt: 1,
        })
    }

    fn request_free(actions: &[Action]) -> Option<u32> {
        sent(actions).into_iter().find_map(|m| match m {
            Message::TaskRequest(r) => Some(r.free_cores),
            _ => None,
        })
    }

    #[test]
    fn slot_table_never_overcommits() {
        let mut s = SlotTable::new(4);
        assert!(s.reserve("a", 3));
        assert!(!s.reserve("b", 2));
        assert!(!s.reserve("a", 1));
        assert_eq!(s.free(), 1);
        assert_eq!(s.release("a"), Some(3));
        assert_eq!(s.free(), 4);
    }

    #[test]
    fn task_environment_overrides_base() {
        let mut task = TaskSpec::new("t", "/bin/true", 1, 1.0);
        task.environment.insert("A".into(), "task".into());
        let base = BTreeMap::from([("A".to_string(), "agent".to_string()), ("B".to_string(), "b".to_string())]);
        let env = ExecutionEnvironment::for_task(Path::new("/w"), &base, &task);
        assert_eq!(env.environment["A"], "task");
        assert_eq!(env.environment["B"], "b");
        assert_eq!(env.stdout, Path::new("/w/t/stdout"));
    }

    #[test]
    fn register_then_pull_after_ack() {
        let mut a = AgentCore::new("p", AgentConfig::new(4, 300.0), 0.0);
        match &a.start(0.0)[..] {
            [Action::Send(Message::Register(r))] => assert_eq!((r.cores, r.walltime_remaining), (4, 300.0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(request_free(&a.on_message(ack(), 0.0)), Some(4));
        let out = a.on_message(assign("t1", 1, 10.0), 0.0);
        assert!(matches!(out[0], Action::Launch { .. }));
        assert_eq!(request_free(&out), Some(3));
    }

    #[test]
    fn no_work_waits_poll_interval() {
        let mut a = registered(4, 300.0);
        a.on_message(ack(), 0.0);
        let out = a.on_message(Message::no_work(), 0.0);
        assert_eq!(request_free(&out), None);
        assert_eq!(a.next_wakeup(), Some(1.0));
        assert_eq!(request_free(&a.on_tick(1.0)), Some(4));
    }

    #[test]
    fn refuses_tasks_that_cannot_finish() {
        let mut a = registered(4, 30.0);
        a.on_message(ack(), 0.0);
        let out = a.on_message(assign("long", 1, 29.5), 0.0);
        match sent(&out)[0] {
            Message::Reject(r) => assert_eq!(r.reason, RejectReason::InsufficientWalltime),
            other => panic!("{other:?}"),
        }
        let out = a.on_message(assign("big", 8, 1.0), 0.0);
        match sent(&out)[0] {
            Message::Reject(r) => assert_eq!(r.reason, RejectReason::AssignOverCapacity),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn result_frees_cores() {
        let mut a = registered(1, 300.0);
        a.on_message(ack(), 0.0);
        let out = a.on_message(assign("t", 1, 5.0), 0.0);
        assert_eq!(request_free(&out), None);
        let out = a.on_task_exit("t", 3, None, None, 5.0);
        match sent(&out)[0] {
            Message::Result(r) => assert_eq!((r.exit_code, r.start, r.end), (3, 0.0, 5.0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(request_free(&out), Some(1));
    }

    #[test]
    fn shutdown_with_nothing_running_exits_at_once() {
        let mut a = registered(2, 300.0);
        a.on_message(ack(), 0.0);
        let out = a.on_message(Message::shutdown(), 0.0);
        assert!(matches!(sent(&out)[0], Message::Heartbeat(h) if h.state == AgentPhase::Draining));
        assert_eq!(out.last(), Some(&Action::Exit(0)));
    }

    #[test]
    fn drain_kills_stragglers_at_deadline() {
        let mut a = registered(2, 20.0);
        a.on_message(ack(), 0.0);
        a.on_message(assign("t", 1, 5.0), 0.0);
        let out = a.on_message(Message::shutdown(), 1.0);
        assert!(!out.contains(&Action::Exit(0)));
        assert_eq!(a.next_wakeup(), Some(5.0));
        a.on_tick(5.0);
        a.on_tick(10.0);
        a.on_tick(15.0);
        let out = a.on_tick(19.0);
        assert!(out.contains(&Action::Kill { task_id: "t".into() }));
        let killed = sent(&out).into_iter().find_map(|m| match m {
            Message::Result(r) => Some(r.clone()),
            _ => None,
        });
        assert_eq!(killed.unwrap().reason.as_deref(), Some("WalltimeKill"));
        assert_eq!(out.last(), Some(&Action::Exit(0)));
    }

    #[test]
    fn never_requests_while_draining() {
        let mut a = registered(2, 300.0);
        a.on_message(ack(), 0.0);
        a.on_message(assign("t", 1, 5.0), 0.0);
        a.on_message(Message::shutdown(), 0.0);
        let out = a.on_task_exit("t", 0, None, None, 5.0);
        assert_eq!(request_free(&out), None);
        assert_eq!(out.last(), Some(&Action::Exit(0)));
    }
}
