//! Runs scenarios on the batch simulator, either by submitting every task as
//! its own DCR job or through pilots whose agents speak the wire protocol
//! over an in-memory channel.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Action, AgentConfig, AgentCore, WALLTIME_KILL_EXIT};
use crate::backend::{BackendSet, DcrError};
use crate::events::EventLog;
use crate::manager::{Manager, ManagerError};
use crate::metrics::{ExecutionMode, ExperimentReport, MetricsError};
use crate::model::{BootstrapMode, DcrDescriptor, JobPayload, JobRequest, PilotSpec, WorkloadSpec};
use crate::pilot_manager::{plan_provisioning, PilotError, PilotManager, PilotShape, PilotTimeouts, ProvisioningPolicy};
use crate::protocol::{decode, encode, Message};
use crate::sim::{BackgroundJob, BatchSim, SimConfig, SimEvent, SimEventKind};
use crate::workload_manager::{DispatchConfig, DispatchError, ResultOutcome, SchedulingPolicy, WorkloadManager, WorkloadStats};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Dcr(#[from] DcrError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// How simulated agents behave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimAgentConfig {
    /// Delay between a task being assigned and it starting.
    pub dispatch_overhead: f64,
    pub poll_interval: f64,
    pub heartbeat_interval: f64,
    pub drain_margin: f64,
    /// Delay between the pilot job starting and the agent registering.
    pub bootstrap_delay: f64,
}

impl Default for SimAgentConfig {
    fn default() -> Self {
        SimAgentConfig {
            dispatch_overhead: 0.0,
            poll_interval: 1.0,
            heartbeat_interval: 5.0,
            drain_margin: 1.0,
            bootstrap_delay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotCancellation {
    pub time: f64,
    pub pilot_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dcr: DcrDescriptor,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background_jobs: Vec<BackgroundJob>,
    #[serde(default)]
    pub job_dispatch_overhead: f64,
    #[serde(default)]
    pub backfill: bool,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub submit_time: f64,
    /// Shape of implicitly provisioned pilots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot: Option<PilotShape>,
    #[serde(default = "one")]
    pub overallocation: f64,
    /// Explicit pilots. When present they replace implicit provisioning.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pilots: Vec<PilotSpec>,
    #[serde(default)]
    pub agent: SimAgentConfig,
    #[serde(default)]
    pub scheduling: SchedulingPolicy,
    #[serde(default = "one_attempt")]
    pub max_attempts: u32,
    #[serde(default)]
    pub rebind_on_pilot_loss: bool,
    /// Task id to the number of leading attempts that exit nonzero.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failing_tasks: BTreeMap<String, u32>,
    /// Task id to how long it really runs, when that differs from its estimate.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub actual_durations: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pilot_cancellations: Vec<PilotCancellation>,
    /// The run stops at this time even if work remains.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

fn one_attempt() -> u32 {
    1
}

fn default_horizon() -> f64 {
    1e6
}

impl Scenario {
    /// The direct-versus-pilot comparison setup: one node of 4 cores, a
    /// 60 s scheduler cycle, 40 one-core tasks of 10 s each and one
    /// 4-core pilot of 300 s.
    pub fn canonical() -> Self {
        let tasks = (1..=40)
            .map(|i| crate::model::TaskSpec::new(format!("t{i:02}"), "/bin/true", 1, 10.0))
            .collect();
        Scenario {
            name: "canonical".into(),
            dcr: DcrDescriptor::batch_sim("hpc", 1, 4, 60.0),
            seed: 0,
            background_jobs: Vec::new(),
            job_dispatch_overhead: 0.0,
            backfill: false,
            workload: WorkloadSpec::new("bot40", tasks),
            submit_time: 0.0,
            pilot: Some(PilotShape {
                nodes: 1,
                cores_per_node: 4,
                walltime: 300.0,
            }),
            overallocation: 1.0,
            pilots: Vec::new(),
            agent: SimAgentConfig::default(),
            scheduling: SchedulingPolicy::default(),
            max_attempts: 1,
            rebind_on_pilot_loss: false,
            failing_tasks: BTreeMap::new(),
            actual_durations: BTreeMap::new(),
            pilot_cancellations: Vec::new(),
            horizon: default_horizon(),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            descriptor: self.dcr.clone(),
            seed: self.seed,
            background_jobs: self.background_jobs.clone(),
            job_dispatch_overhead: self.job_dispatch_overhead,
            backfill: self.backfill,
        }
    }

    fn actual_duration(&self, task: &crate::model::TaskSpec) -> f64 {
        self.actual_durations
            .get(&task.task_id)
            .copied()
            .unwrap_or(task.estimated_duration)
    }

    fn exit_code(&self, task_id: &str, attempt: u32) -> i32 {
        match self.failing_tasks.get(task_id) {
            Some(n) if attempt <= *n => 1,
            _ => 0,
        }
    }

    /// Pilots for pilot modes when none are listed explicitly.
    fn planned_pilots(&self) -> Result<Vec<PilotSpec>, HarnessError> {
        let shape = self
            .pilot
            .ok_or_else(|| HarnessError::Scenario("either `pilot` or `pilots` is required in pilot modes".into()))?;
        let mut stats = WorkloadStats::default();
        for t in &self.workload.tasks {
            stats.total_core_seconds += t.core_seconds();
            stats.max_task_cores = stats.max_task_cores.max(t.cores);
            stats.task_count += 1;
        }
        let plan = plan_provisioning(&stats, &self.dcr, &ProvisioningPolicy::implicit(self.overallocation, shape), 0)?;
        Ok((1..=plan.count)
            .map(|i| PilotSpec {
                pilot_id: format!("pilot-{i:03}"),
                target_dcr: self.dcr.dcr_id.clone(),
                nodes: plan.shape.nodes,
                cores_per_node: plan.shape.cores_per_node,
                walltime: plan.shape.walltime,
                bootstrap_mode: BootstrapMode::Bundled,
            })
            .collect())
    }
}

/// Result of one simulated run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scenario: String,
    pub mode: ExecutionMode,
    pub workload_id: String,
    pub log: EventLog,
    /// Every workload reached a final state before the run stopped.
    pub finished: bool,
    pub end_time: f64,
    /// Protocol frames exchanged with agents.
    pub frames: u64,
}

impl RunOutcome {
    pub fn report(&self) -> Result<ExperimentReport, MetricsError> {
        ExperimentReport::from_log(&self.scenario, self.mode, &self.workload_id, &self.log)
    }
}

struct SimAgent {
    core: AgentCore,
    dcr_id: String,
    job_id: String,
    /// Task id to (attempt, start, end).
    running: BTreeMap<String, (u32, f64, f64)>,
}

enum Delivery {
    ToManager(Vec<u8>),
    ToAgent(String, Vec<u8>),
}

struct Run<'a> {
    scenario: &'a Scenario,
    mode: ExecutionMode,
    mgr: Manager,
    agents: BTreeMap<String, SimAgent>,
    boots: BTreeMap<String, (f64, f64)>,
    direct_jobs: BTreeMap<String, (String, u32)>,
    cancellations: VecDeque<PilotCancellation>,
    pending: VecDeque<Delivery>,
    released: bool,
    frames: u64,
}

/// Runs a scenario in one mode.
pub fn run_scenario(scenario: &Scenario, mode: ExecutionMode) -> Result<RunOutcome, HarnessError> {
    let mut backends = BackendSet::new();
    backends.insert(Box::new(BatchSim::new(scenario.sim_config())?));
    let implicit = mode == ExecutionMode::PilotLate && scenario.pilots.is_empty();
    let policy = match (implicit, scenario.pilot) {
        (true, Some(shape)) => {
            let mut p = ProvisioningPolicy::implicit(scenario.overallocation, shape);
            p.target_dcr = Some(scenario.dcr.dcr_id.clone());
            p
        }
        (true, None) => return Err(HarnessError::Scenario("`pilot` shape is required for implicit provisioning".into())),
        (false, _) => ProvisioningPolicy::explicit(),
    };
    let timeouts = PilotTimeouts {
        heartbeat_interval: scenario.agent.heartbeat_interval,
        ..PilotTimeouts::default()
    };
    let pm = PilotManager::new(backends, policy, timeouts)?;
    let wm = WorkloadManager::new(DispatchConfig {
        policy: scenario.scheduling,
        max_attempts: scenario.max_attempts,
        rebind_on_pilot_loss: scenario.rebind_on_pilot_loss,
    });
    let mut cancellations: Vec<PilotCancellation> = scenario.pilot_cancellations.clone();
    cancellations.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut run = Run {
        scenario,
        mode,
        mgr: Manager::new(pm, wm),
        agents: BTreeMap::new(),
        boots: BTreeMap::new(),
        direct_jobs: BTreeMap::new(),
        cancellations: cancellations.into(),
        pending: VecDeque::new(),
        released: false,
        frames: 0,
    };
    run.setup()?;
    run.main_loop()
}

/// Runs the same scenario directly and with late-binding pilots.
pub fn run_comparison(scenario: &Scenario) -> Result<(ExperimentReport, ExperimentReport), HarnessError> {
    let direct = run_scenario(scenario, ExecutionMode::Direct)?.report()?;
    let pilot = run_scenario(scenario, ExecutionMode::PilotLate)?.report()?;
    Ok((direct, pilot))
}

/// `direct=610.0s pilot=160.0s speedup=3.81`
pub fn format_comparison(direct: &ExperimentReport, pilot: &ExperimentReport) -> String {
    format!(
        "direct={:.1}s pilot={:.1}s speedup={:.2}",
        direct.makespan,
        pilot.makespan,
        direct.makespan / pilot.makespan
    )
}

impl Run<'_> {
    fn setup(&mut self) -> Result<(), HarnessError> {
        let t = self.scenario.submit_time;
        let mut workload = self.scenario.workload.clone();
        match self.mode {
            ExecutionMode::Direct => {}
            ExecutionMode::PilotLate if self.scenario.pilots.is_empty() => {}
            ExecutionMode::PilotLate => {
                for p in &self.scenario.pilots {
                    self.mgr.submit_pilot(p.clone(), t)?;
                }
            }
            ExecutionMode::PilotEarly => {
                let pilots = if self.scenario.pilots.is_empty() {
                    self.scenario.planned_pilots()?
                } else {
                    self.scenario.pilots.clone()
                };
                for p in &pilots {
                    self.mgr.submit_pilot(p.clone(), t)?;
                }
                pin_round_robin(&mut workload, &pilots);
            }
        }
        self.mgr.submit_workload(workload, t)?;
        Ok(())
    }

    fn main_loop(mut self) -> Result<RunOutcome, HarnessError> {
        let mut t = self.scenario.submit_time;
        loop {
            self.instant(t)?;
            if self.done() {
                break;
            }
            match self.next_time() {
                Some(next) if next <= self.scenario.horizon => t = next.max(t),
                _ => break,
            }
        }
        let finished = self.mgr.workloads().all_workloads_finished();
        Ok(RunOutcome {
            scenario: self.scenario.name.clone(),
            mode: self.mode,
            workload_id: self.scenario.workload.workload_id.clone(),
            log: self.mgr.into_log(),
            finished,
            end_time: t,
            frames: self.frames,
        })
    }

    fn done(&self) -> bool {
        self.mgr.workloads().all_workloads_finished()
            && self.mgr.pilots().live_pilots().next().is_none()
            && self.agents.is_empty()
    }

    fn next_time(&self) -> Option<f64> {
        let backends = self.mgr.pilots().backends().next_event_time();
        let agents = self.agents.values().flat_map(|a| {
            a.core
                .next_wakeup()
                .into_iter()
                .chain(a.running.values().map(|r| r.2))
        });
        let boots = self.boots.values().map(|b| b.0);
        let cancels = self.cancellations.front().map(|c| c.time);
        backends
            .into_iter()
            .chain(agents)
            .chain(boots)
            .chain(cancels)
            .chain(self.mgr.next_deadline())
            .min_by(f64::total_cmp)
    }

    /// Processes everything due at `t` until nothing more happens.
    fn instant(&mut self, t: f64) -> Result<(), HarnessError> {
        loop {
            let mut progressed = false;

            let events = self.mgr.pilots_mut().backends_mut().advance_all(t);
            if !events.is_empty() {
                progressed = true;
                self.mgr.on_backend_events(&events)?;
                self.on_job_events(&events, t)?;
                self.flush_outbox();
            }

            let due: Vec<String> = self.boots.iter().filter(|(_, b)| b.0 <= t).map(|(id, _)| id.clone()).collect();
            for pid in due {
                progressed = true;
                let (_, job_start) = self.boots.remove(&pid).expect("listed");
                self.boot_agent(&pid, job_start, t);
            }

            let finished: Vec<(String, String, u32, f64)> = self
                .agents
                .iter()
                .flat_map(|(pid, a)| {
                    a.running
                        .iter()
                        .filter(|(_, r)| r.2 <= t)
                        .map(move |(tid, r)| (pid.clone(), tid.clone(), r.0, r.1))
                })
                .collect();
            for (pid, tid, attempt, start) in finished {
                progressed = true;
                let code = self.scenario.exit_code(&tid, attempt);
                let Some(agent) = self.agents.get_mut(&pid) else { continue };
                agent.running.remove(&tid);
                let actions = agent.core.on_task_exit(&tid, code, Some(start), None, t);
                self.apply_actions(&pid, actions, t)?;
                self.pump(t)?;
            }

            let woken: Vec<String> = self
                .agents
                .iter()
                .filter(|(_, a)| a.core.next_wakeup().is_some_and(|w| w <= t))
                .map(|(id, _)| id.clone())
                .collect();
            for pid in woken {
                progressed = true;
                let Some(agent) = self.agents.get_mut(&pid) else { continue };
                let actions = agent.core.on_tick(t);
                self.apply_actions(&pid, actions, t)?;
                self.pump(t)?;
            }

            while self.cancellations.front().is_some_and(|c| c.time <= t) {
                progressed = true;
                let c = self.cancellations.pop_front().expect("checked");
                match self.mgr.cancel_pilot(&c.pilot_id, t) {
                    Ok(()) | Err(ManagerError::Pilot(PilotError::AlreadyTerminal(_))) => {}
                    Err(e) => return Err(e.into()),
                }
                self.flush_outbox();
                self.pump(t)?;
            }

            if self.mgr.next_deadline().is_some_and(|d| d <= t) {
                progressed = true;
                self.mgr.tick(t)?;
                self.flush_outbox();
                self.pump(t)?;
            }

            if self.mode == ExecutionMode::Direct {
                progressed |= self.dispatch_direct(t)?;
            } else if !self.released && self.mgr.workloads().all_workloads_finished() {
                // Explicit pilots are released by the experiment once its
                // workload is over; implicit ones by the manager itself.
                self.released = true;
                progressed = true;
                let live: Vec<String> = self.mgr.pilots().live_pilots().map(|r| r.spec.pilot_id.clone()).collect();
                for pid in live {
                    let (pm, _, log) = self.mgr.parts_mut();
                    if let Some(msg) = pm.drain_pilot(&pid, t, log)? {
                        self.send_to_agent(&pid, &msg);
                    }
                }
                self.pump(t)?;
            }

            if !progressed {
                return Ok(());
            }
        }
    }

    fn boot_agent(&mut self, pilot_id: &str, job_start: f64, t: f64) {
        let Some(rec) = self.mgr.pilots().pilot(pilot_id) else { return };
        if rec.status().is_terminal() {
            return;
        }
        let a = &self.scenario.agent;
        let cfg = AgentConfig {
            cores: rec.spec.total_cores(),
            walltime: rec.spec.walltime - (t - job_start),
            drain_margin: a.drain_margin,
            poll_interval: a.poll_interval,
            heartbeat_interval: a.heartbeat_interval,
        };
        let mut core = AgentCore::new(pilot_id, cfg, t);
        let actions = core.start(t);
        self.agents.insert(
            pilot_id.to_string(),
            SimAgent {
                core,
                dcr_id: rec.spec.target_dcr.clone(),
                job_id: rec.job_id.clone().unwrap_or_default(),
                running: BTreeMap::new(),
            },
        );
        // Errors surface on the next pump.
        let _ = self.apply_actions(pilot_id, actions, t);
        let _ = self.pump(t);
    }

    fn on_job_events(&mut self, events: &[(String, SimEvent)], t: f64) -> Result<(), HarnessError> {
        for (dcr_id, ev) in events {
            if ev.kind == SimEventKind::SchedulerCycle {
                continue;
            }
            let rec = self.mgr.pilots().backends().get(dcr_id)?.query_job(&ev.job_id)?;
            match (&rec.payload, ev.kind) {
                (JobPayload::Pilot(p), SimEventKind::JobStarted) => {
                    self.boots
                        .insert(p.pilot_id.clone(), (ev.time + self.scenario.agent.bootstrap_delay, ev.time));
                }
                (JobPayload::Pilot(p), SimEventKind::JobEnded | SimEventKind::JobKilledWalltime | SimEventKind::JobCanceled) => {
                    // The agent dies with its job.
                    self.agents.remove(&p.pilot_id);
                    self.boots.remove(&p.pilot_id);
                }
                (JobPayload::Task(task), kind) => {
                    let Some((_, attempt)) = self.direct_jobs.get(&ev.job_id).cloned() else { continue };
                    let (pm, wm, log) = self.mgr.parts_mut();
                    match kind {
                        SimEventKind::JobStarted => wm.direct_started(&task.task_id, attempt, ev.time, log)?,
                        SimEventKind::JobEnded | SimEventKind::JobKilledWalltime | SimEventKind::JobCanceled => {
                            self.direct_jobs.remove(&ev.job_id);
                            let start = rec.start_time.unwrap_or(ev.time);
                            let (code, reason) = match kind {
                                SimEventKind::JobEnded => (self.scenario.exit_code(&task.task_id, attempt), None),
                                SimEventKind::JobKilledWalltime => (WALLTIME_KILL_EXIT, Some("WalltimeKill".to_string())),
                                _ => (1, Some("JobCanceled".to_string())),
                            };
                            let out = wm.direct_finished(&task.task_id, attempt, code, start, reason, &*pm, t, log)?;
                            debug_assert!(matches!(out, ResultOutcome::Accepted(_)));
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn dispatch_direct(&mut self, t: f64) -> Result<bool, HarnessError> {
        let (pm, wm, log) = self.mgr.parts_mut();
        let assigned = wm.dispatch_direct(t, log)?;
        let dcr = &self.scenario.dcr;
        for a in &assigned {
            let mut req = JobRequest::for_task(&a.task, dcr, dcr.max_job_walltime);
            req.run_time = Some(self.scenario.actual_duration(&a.task));
            let job_id = pm.backends_mut().get_mut(&dcr.dcr_id)?.submit_job(req, t)?;
            self.direct_jobs.insert(job_id, (a.task.task_id.clone(), a.attempt));
        }
        Ok(!assigned.is_empty())
    }

    fn wire(&mut self, m: &Message) -> Vec<u8> {
        self.frames += 1;
        encode(m)
    }

    fn send_to_agent(&mut self, pilot_id: &str, m: &Message) {
        let bytes = self.wire(m);
        self.pending.push_back(Delivery::ToAgent(pilot_id.to_string(), bytes));
    }

    fn flush_outbox(&mut self) {
        for (pid, m) in self.mgr.take_outbox() {
            self.send_to_agent(&pid, &m);
        }
    }

    fn apply_actions(&mut self, pilot_id: &str, actions: Vec<Action>, t: f64) -> Result<(), HarnessError> {
        for action in actions {
            match action {
                Action::Send(m) => {
                    let bytes = self.wire(&m);
                    self.pending.push_back(Delivery::ToManager(bytes));
                }
                Action::Launch { task, attempt } => {
                    let start = t + self.scenario.agent.dispatch_overhead;
                    let end = start + self.scenario.actual_duration(&task);
                    if let Some(a) = self.agents.get_mut(pilot_id) {
                        a.running.insert(task.task_id, (attempt, start, end));
                    }
                }
                Action::Kill { task_id } => {
                    if let Some(a) = self.agents.get_mut(pilot_id) {
                        a.running.remove(&task_id);
                    }
                }
                Action::Exit(code) => {
                    if let Some(a) = self.agents.remove(pilot_id) {
                        let backend = self.mgr.pilots_mut().backends_mut().get_mut(&a.dcr_id)?;
                        match backend.finish_job(&a.job_id, code, t) {
                            Ok(()) | Err(DcrError::AlreadyTerminal(_)) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Delivers queued frames, and everything they trigger, in order.
    fn pump(&mut self, t: f64) -> Result<(), HarnessError> {
        while let Some(d) = self.pending.pop_front() {
            match d {
                Delivery::ToManager(bytes) => {
                    let msg = decode(&bytes).map_err(|e| HarnessError::Scenario(format!("bad frame: {e}")))?;
                    let pid = sender(&msg);
                    let replies = self.mgr.handle_message(msg, t)?;
                    for r in replies {
                        self.send_to_agent(&pid, &r);
                    }
                    self.flush_outbox();
                }
                Delivery::ToAgent(pid, bytes) => {
                    let msg = decode(&bytes).map_err(|e| HarnessError::Scenario(format!("bad frame: {e}")))?;
                    let Some(agent) = self.agents.get_mut(&pid) else { continue };
                    let actions = agent.core.on_message(msg, t);
                    self.apply_actions(&pid, actions, t)?;
                }
            }
        }
        Ok(())
    }
}

fn sender(m: &Message) -> String {
    match m {
        Message::Register(r) => r.pilot_id.clone(),
        Message::Heartbeat(h) => h.pilot_id.clone(),
        Message::TaskRequest(r) => r.pilot_id.clone(),
        Message::Reject(r) => r.pilot_id.clone(),
        Message::Result(r) => r.pilot_id.clone(),
        _ => String::new(),
    }
}

/// Pins each task to the next pilot, in turn, that is large enough for it.
pub fn pin_round_robin(workload: &mut WorkloadSpec, pilots: &[PilotSpec]) {
    if pilots.is_empty() {
        return;
    }
    let mut next = 0;
    for task in workload.tasks.iter_mut().filter(|t| t.pinned_pilot.is_none()) {
        for k in 0..pilots.len() {
            let p = &pilots[(next + k) % pilots.len()];
            if p.total_cores() >= task.cores {
                task.pinned_pilot = Some(p.pilot_id.clone());
                next = (next + k + 1) % pilots.len();
                break;
            }
        }
    }
}
