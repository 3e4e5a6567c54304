//! Deterministic discrete-event model of a batch-scheduled DCR.
//!
//! Jobs wait in a FCFS queue. The scheduler only runs at multiples of the
//! DCR's `scheduler_cycle`, and a job is eligible at the first cycle strictly
//! after its submission. A job occupies `nodes` nodes with `cores_per_node`
//! cores on each; nodes are shared when a job asks for fewer cores than a
//! node has. Jobs end at `start + run_time`, or are killed at
//! `start + walltime`, whichever comes first.
//!
//! Within one instant the simulator applies, in order: job ends and kills,
//! delayed starts, queue arrivals, then the scheduler pass.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{DcrBackend, DcrError};
use crate::model::{DcrDescriptor, JobPayload, JobRecord, JobRequest, JobStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimEventKind {
    JobQueued,
    JobStarted,
    JobEnded,
    JobKilledWalltime,
    JobCanceled,
    SchedulerCycle,
}

/// One line of the DCR event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
    /// Empty for `SchedulerCycle`.
    pub job_id: String,
}

/// Another tenant's job: arrives, holds whole nodes, leaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundJob {
    pub arrival_time: f64,
    pub nodes: u32,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub descriptor: DcrDescriptor,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background_jobs: Vec<BackgroundJob>,
    /// Delay between the scheduler decision and the job actually starting.
    #[serde(default)]
    pub job_dispatch_overhead: f64,
    /// Let later queued jobs start when the head does not fit.
    #[serde(default)]
    pub backfill: bool,
}

impl SimConfig {
    pub fn new(descriptor: DcrDescriptor) -> Self {
        SimConfig {
            descriptor,
            seed: 0,
            background_jobs: Vec::new(),
            job_dispatch_overhead: 0.0,
            backfill: false,
        }
    }
}

/// Draws `count` background jobs with arrival times uniform in
/// `[0, horizon)`, node counts in `1..=max_nodes` and durations uniform in
/// `[min_duration, max_duration]`, all rounded to whole seconds.
pub fn synthesize_background(
    seed: u64,
    count: usize,
    horizon: f64,
    max_nodes: u32,
    min_duration: f64,
    max_duration: f64,
) -> Vec<BackgroundJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<BackgroundJob> = (0..count)
        .map(|_| BackgroundJob {
            arrival_time: rng.random_range(0.0..horizon.max(1.0)).floor(),
            nodes: rng.random_range(1..=max_nodes.max(1)),
            duration: rng.random_range(min_duration..=max_duration.max(min_duration)).round().max(1.0),
        })
        .collect();
    jobs.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    jobs
}

#[derive(Debug, Clone)]
struct SimJob {
    record: JobRecord,
    seq: u64,
    run_time: Option<f64>,
    allocation: Vec<usize>,
    /// Scheduled start time while allocated but not yet started.
    starting_at: Option<f64>,
}

impl SimJob {
    fn finish_time(&self) -> Option<(f64, bool)> {
        if self.record.status != JobStatus::Running {
            return None;
        }
        let start = self.record.start_time?;
        let kill = start + self.record.walltime;
        match self.run_time {
            Some(rt) if rt <= self.record.walltime => Some((start + rt, false)),
            _ => Some((kill, true)),
        }
    }
}

pub struct BatchSim {
    config: SimConfig,
    cycle: f64,
    now: f64,
    next_seq: u64,
    jobs: BTreeMap<String, SimJob>,
    queue: VecDeque<String>,
    /// Submissions whose time has not come yet, by (time, seq).
    arrivals: BTreeMap<(u64, u64), String>,
    running: BTreeSet<String>,
    starting: BTreeSet<String>,
    free_cores: Vec<u32>,
    last_cycle: Option<f64>,
    log: Vec<SimEvent>,
    delivered: usize,
}

fn time_key(t: f64) -> u64 {
    // Order-preserving for non-negative finite times.
    t.to_bits()
}

impl BatchSim {
    pub fn new(config: SimConfig) -> Result<Self, DcrError> {
        config
            .descriptor
            .validate()
            .map_err(|e| DcrError::Unsupported(e.to_string()))?;
        let cycle = config.descriptor.scheduler_cycle.unwrap_or(1.0);
        let mut sim = BatchSim {
            cycle,
            now: 0.0,
            next_seq: 0,
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            arrivals: BTreeMap::new(),
            running: BTreeSet::new(),
            starting: BTreeSet::new(),
            free_cores: vec![config.descriptor.cores_per_node; config.descriptor.nodes as usize],
            last_cycle: None,
            log: Vec::new(),
            delivered: 0,
            config,
        };
        let background = sim.config.background_jobs.clone();
        let cpn = sim.config.descriptor.cores_per_node;
        for (i, bg) in background.iter().enumerate() {
            if bg.nodes > sim.config.descriptor.nodes {
                return Err(DcrError::OversizedJob {
                    requested: format!("{} nodes (background job {i})", bg.nodes),
                    available: format!("{} nodes", sim.config.descriptor.nodes),
                });
            }
            let req = JobRequest::background(format!("bg{i}"), bg.nodes, cpn, bg.duration);
            sim.insert_job(req, bg.arrival_time.max(0.0));
        }
        Ok(sim)
    }

    pub fn descriptor(&self) -> &DcrDescriptor {
        &self.config.descriptor
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Every event since construction.
    pub fn event_log(&self) -> &[SimEvent] {
        &self.log
    }

    /// Cores in use on each node.
    pub fn used_cores_per_node(&self) -> Vec<u32> {
        self.free_cores
            .iter()
            .map(|free| self.config.descriptor.cores_per_node - free)
            .collect()
    }

    pub fn submit_job(&mut self, request: JobRequest, at: f64) -> Result<String, DcrError> {
        let d = &self.config.descriptor;
        if request.nodes > d.nodes || request.cores_per_node > d.cores_per_node || request.nodes == 0 {
            return Err(DcrError::OversizedJob {
                requested: format!("{}x{} cores", request.nodes, request.cores_per_node),
                available: format!("{}x{} cores", d.nodes, d.cores_per_node),
            });
        }
        if request.walltime > d.max_job_walltime {
            return Err(DcrError::WalltimeExceedsLimit {
                requested: request.walltime,
                limit: d.max_job_walltime,
            });
        }
        if at < self.now {
            return Err(DcrError::InPast { at, now: self.now });
        }
        let live = self
            .jobs
            .values()
            .filter(|j| !j.record.status.is_terminal())
            .filter(|j| !matches!(j.record.payload, JobPayload::Background { .. }))
            .count();
        if live >= d.max_concurrent_jobs as usize {
            return Err(DcrError::QueueFull(d.dcr_id.clone()));
        }
        Ok(self.insert_job(request, at))
    }

    fn insert_job(&mut self, request: JobRequest, at: f64) -> String {
        let seq = self.next_seq;
        self.next_seq += 1;
        let job_id = format!("{}.{:06}", self.config.descriptor.dcr_id, seq);
        let record = JobRecord {
            job_id: job_id.clone(),
            dcr_id: self.config.descriptor.dcr_id.clone(),
            payload: request.payload,
            requested_nodes: request.nodes,
            requested_cores: request.cores_per_node,
            walltime: request.walltime,
            submit_time: at,
            start_time: None,
            end_time: None,
            status: JobStatus::Queued,
            exit_code: None,
        };
        self.jobs.insert(
            job_id.clone(),
            SimJob {
                record,
                seq,
                run_time: request.run_time,
                allocation: Vec::new(),
                starting_at: None,
            },
        );
        if at <= self.now {
            self.enqueue(&job_id);
        } else {
            self.arrivals.insert((time_key(at), seq), job_id.clone());
        }
        job_id
    }

    fn enqueue(&mut self, job_id: &str) {
        let at = self.jobs[job_id].record.submit_time;
        self.queue.push_back(job_id.to_string());
        self.emit(at, SimEventKind::JobQueued, job_id);
    }

    fn emit(&mut self, time: f64, kind: SimEventKind, job_id: &str) {
        debug_assert!(self.log.last().is_none_or(|e| e.time <= time));
        self.log.push(SimEvent {
            time,
            kind,
            job_id: job_id.to_string(),
        });
    }

    pub fn query_job(&self, job_id: &str) -> Result<JobRecord, DcrError> {
        self.jobs
            .get(job_id)
            .map(|j| j.record.clone())
            .ok_or_else(|| DcrError::UnknownJob(job_id.to_string()))
    }

    pub fn cancel_job(&mut self, job_id: &str) -> Result<(), DcrError> {
        let now = self.now;
        let job = self
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| DcrError::UnknownJob(job_id.to_string()))?;
        if job.record.status.is_terminal() {
            return Err(DcrError::AlreadyTerminal(job_id.to_string()));
        }
        job.record.status = JobStatus::Canceled;
        job.record.end_time = Some(now.max(job.record.submit_time));
        job.starting_at = None;
        let allocation = std::mem::take(&mut job.allocation);
        let cores = job.record.requested_cores;
        let key = (time_key(job.record.submit_time), job.seq);
        self.release(&allocation, cores);
        self.queue.retain(|id| id != job_id);
        self.arrivals.remove(&key);
        self.running.remove(job_id);
        self.starting.remove(job_id);
        self.emit(now, SimEventKind::JobCanceled, job_id);
        Ok(())
    }

    /// Ends a running job whose payload exited by itself.
    pub fn finish_job(&mut self, job_id: &str, exit_code: i32) -> Result<(), DcrError> {
        let now = self.now;
        let job = self
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| DcrError::UnknownJob(job_id.to_string()))?;
        if job.record.status.is_terminal() {
            return Err(DcrError::AlreadyTerminal(job_id.to_string()));
        }
        if job.record.status != JobStatus::Running {
            return Err(DcrError::Unsupported(format!("job {job_id} has not started")));
        }
        self.end_job(job_id, now, JobStatus::Completed, Some(exit_code));
        Ok(())
    }

    fn end_job(&mut self, job_id: &str, at: f64, status: JobStatus, exit_code: Option<i32>) {
        let job = self.jobs.get_mut(job_id).expect("running job exists");
        job.record.status = status;
        job.record.end_time = Some(at);
        job.record.exit_code = exit_code;
        let allocation = std::mem::take(&mut job.allocation);
        let cores = job.record.requested_cores;
        self.release(&allocation, cores);
        self.running.remove(job_id);
        let kind = if status == JobStatus::Killed {
            SimEventKind::JobKilledWalltime
        } else {
            SimEventKind::JobEnded
        };
        self.emit(at, kind, job_id);
    }

    fn release(&mut self, allocation: &[usize], cores_per_node: u32) {
        for &n in allocation {
            self.free_cores[n] += cores_per_node;
            debug_assert!(self.free_cores[n] <= self.config.descriptor.cores_per_node);
        }
    }

    fn next_cycle_time(&self) -> Option<f64> {
        let head = self.queue.front()?;
        let submit = self.jobs[head].record.submit_time;
        let floor = self.now.max(self.last_cycle.unwrap_or(f64::NEG_INFINITY));
        let mut k = (floor / self.cycle).ceil().max(0.0);
        loop {
            let t = k * self.cycle;
            let after_last = self.last_cycle.is_none_or(|last| t > last);
            if t >= self.now && after_last && t > submit {
                return Some(t);
            }
            k += 1.0;
        }
    }

    fn next_internal_time(&self) -> Option<f64> {
        let ends = self
            .running
            .iter()
            .filter_map(|id| self.jobs[id].finish_time().map(|(t, _)| t));
        let starts = self.starting.iter().filter_map(|id| self.jobs[id].starting_at);
        let arrival = self
            .arrivals
            .values()
            .next()
            .map(|id| self.jobs[id].record.submit_time);
        ends.chain(starts)
            .chain(arrival)
            .chain(self.next_cycle_time())
            .min_by(f64::total_cmp)
    }

    /// Advances the clock without handing out events; the next `step`
    /// returns them.
    fn run_until(&mut self, until: f64) {
        let until = until.max(self.now);
        while let Some(t) = self.next_internal_time() {
            if t > until {
                break;
            }
            self.now = t;
            self.process_instant(t);
        }
        self.now = until;
    }

    /// Advances the clock to `until`, returning the events emitted on the way.
    pub fn step(&mut self, until: f64) -> Vec<SimEvent> {
        self.run_until(until);
        let out = self.log[self.delivered..].to_vec();
        self.delivered = self.log.len();
        out
    }

    fn process_instant(&mut self, t: f64) {
        // Ends and kills, in submission order.
        let mut finishing: Vec<(u64, String, bool)> = self
            .running
            .iter()
            .filter_map(|id| {
                let job = &self.jobs[id];
                match job.finish_time() {
                    Some((ft, killed)) if ft <= t => Some((job.seq, id.clone(), killed)),
                    _ => None,
                }
            })
            .collect();
        finishing.sort();
        for (_, id, killed) in finishing {
            if killed {
                self.end_job(&id, t, JobStatus::Killed, None);
            } else {
                self.end_job(&id, t, JobStatus::Completed, Some(0));
            }
        }

        let mut starting: Vec<(u64, String)> = self
            .starting
            .iter()
            .filter(|id| self.jobs[*id].starting_at.is_some_and(|s| s <= t))
            .map(|id| (self.jobs[id].seq, id.clone()))
            .collect();
        starting.sort();
        for (_, id) in starting {
            self.start_job(&id, t);
        }

        while let Some((&key, _)) = self.arrivals.iter().next() {
            let id = self.arrivals[&key].clone();
            if self.jobs[&id].record.submit_time > t {
                break;
            }
            self.arrivals.remove(&key);
            self.enqueue(&id);
        }

        if self.next_cycle_time() == Some(t) {
            self.scheduler_pass(t);
        }
    }

    fn scheduler_pass(&mut self, t: f64) {
        self.last_cycle = Some(t);
        self.emit(t, SimEventKind::SchedulerCycle, "");
        let mut i = 0;
        while i < self.queue.len() {
            let id = self.queue[i].clone();
            if self.jobs[&id].record.submit_time >= t {
                break;
            }
            match self.try_allocate(&id) {
                Some(nodes) => {
                    self.queue.remove(i);
                    let overhead = self.config.job_dispatch_overhead.max(0.0);
                    let job = self.jobs.get_mut(&id).expect("queued job exists");
                    job.allocation = nodes;
                    if overhead > 0.0 {
                        job.starting_at = Some(t + overhead);
                        self.starting.insert(id);
                    } else {
                        self.start_job(&id, t);
                    }
                }
                None if self.config.backfill => i += 1,
                None => break,
            }
        }
    }

    fn try_allocate(&mut self, job_id: &str) -> Option<Vec<usize>> {
        let job = &self.jobs[job_id];
        let need = job.record.requested_cores;
        let nodes: Vec<usize> = self
            .free_cores
            .iter()
            .enumerate()
            .filter(|(_, free)| **free >= need)
            .map(|(i, _)| i)
            .take(job.record.requested_nodes as usize)
            .collect();
        if nodes.len() < job.record.requested_nodes as usize {
            return None;
        }
        for &n in &nodes {
            self.free_cores[n] -= need;
        }
        Some(nodes)
    }

    fn start_job(&mut self, job_id: &str, t: f64) {
        let job = self.jobs.get_mut(job_id).expect("allocated job exists");
        job.starting_at = None;
        job.record.status = JobStatus::Running;
        job.record.start_time = Some(t);
        self.starting.remove(job_id);
        self.running.insert(job_id.to_string());
        self.emit(t, SimEventKind::JobStarted, job_id);
    }
}

impl DcrBackend for BatchSim {
    fn descriptor(&self) -> &DcrDescriptor {
        BatchSim::descriptor(self)
    }

    fn submit_job(&mut self, request: JobRequest, at: f64) -> Result<String, DcrError> {
        BatchSim::submit_job(self, request, at)
    }

    fn cancel_job(&mut self, job_id: &str, at: f64) -> Result<(), DcrError> {
        self.run_until(at);
        BatchSim::cancel_job(self, job_id)
    }

    fn query_job(&self, job_id: &str) -> Result<JobRecord, DcrError> {
        BatchSim::query_job(self, job_id)
    }

    fn finish_job(&mut self, job_id: &str, exit_code: i32, at: f64) -> Result<(), DcrError> {
        self.run_until(at);
        BatchSim::finish_job(self, job_id, exit_code)
    }

    fn advance(&mut self, until: f64) -> Vec<SimEvent> {
        self.step(until)
    }

    fn next_event_time(&self) -> Option<f64> {
        if self.delivered < self.log.len() {
            return Some(self.now);
        }
        self.next_internal_time()
    }
}

/// Writes events as JSON-lines, one `{"time","kind","job_id"}` object each.
pub fn write_event_log<W: Write>(events: &[SimEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
