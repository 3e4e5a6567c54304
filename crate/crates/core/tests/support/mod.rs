//! Shared test helpers: a brute-force event-log validator that replays the
//! raw records without any library logic, and random scenario generators.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use pilotkit::harness::{PilotCancellation, Scenario, SimAgentConfig};
use pilotkit::sim::BackgroundJob;
use pilotkit::metrics::ExecutionMode;
use pilotkit::pilot_manager::PilotShape;
use pilotkit::{DcrDescriptor, Entity, EventLog, PilotSpec, TaskSpec, WorkloadSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TERMINAL: [&str; 3] = ["Done", "Failed", "Canceled"];

#[derive(Default)]
struct PilotSeen {
    submitted: Option<f64>,
    active: Option<(f64, u64)>,
    terminal: bool,
}

/// Replays a log and returns every violation of the stage ordering,
/// exactly-once dispatch, capacity and early-binding rules.
pub fn violations(log: &EventLog) -> Vec<String> {
    let mut out = Vec::new();
    let mut pilots: BTreeMap<&str, PilotSeen> = BTreeMap::new();
    let mut dispatched: BTreeSet<(String, u64)> = BTreeSet::new();
    // task -> (pilot, cores) while it holds cores
    let mut holding: BTreeMap<&str, (&str, u64)> = BTreeMap::new();
    let mut pins: BTreeMap<&str, &str> = BTreeMap::new();

    for (i, r) in log.records().iter().enumerate() {
        match r.entity {
            Entity::Pilot => {
                let p = pilots.entry(&r.entity_id).or_default();
                match r.transition.as_str() {
                    "Submitted" => p.submitted = p.submitted.or(Some(r.time)),
                    "Active" => {
                        match p.submitted {
                            None => out.push(format!("#{i}: pilot {} Active before submission", r.entity_id)),
                            Some(s) if s >= r.time => out.push(format!(
                                "#{i}: pilot {} Active at {} not after submission at {s}",
                                r.entity_id, r.time
                            )),
                            _ => {}
                        }
                        p.active = Some((r.time, r.attr_u64("cores").unwrap_or(0)));
                    }
                    t if TERMINAL.contains(&t) => p.terminal = true,
                    _ => {}
                }
            }
            Entity::Task => {
                let id = r.entity_id.as_str();
                match r.transition.as_str() {
                    "Bound" => {
                        if let Some(p) = r.attr_str("pilot_id") {
                            pins.insert(id, p);
                        }
                    }
                    "Pending" => {
                        pins.remove(id);
                    }
                    "Ready" if r.attrs.contains_key("unbound_from") => {
                        pins.remove(id);
                    }
                    "Dispatched" => {
                        let (Some(pid), Some(attempt)) = (r.attr_str("pilot_id"), r.attr_u64("attempt")) else {
                            out.push(format!("#{i}: dispatch of {id} lacks pilot_id or attempt"));
                            continue;
                        };
                        if !dispatched.insert((id.to_string(), attempt)) {
                            out.push(format!("#{i}: {id} attempt {attempt} dispatched twice"));
                        }
                        if let Some(pin) = pins.get(id) {
                            if *pin != pid {
                                out.push(format!("#{i}: {id} pinned to {pin} but dispatched to {pid}"));
                            }
                        }
                        let p = pilots.entry(pid).or_default();
                        let Some((active_at, cap)) = p.active else {
                            out.push(format!("#{i}: {id} dispatched to {pid} before it was Active"));
                            continue;
                        };
                        if r.time < active_at {
                            out.push(format!("#{i}: {id} dispatched at {} before {pid} Active at {active_at}", r.time));
                        }
                        if p.terminal {
                            out.push(format!("#{i}: {id} dispatched to terminated pilot {pid}"));
                        }
                        if holding.contains_key(id) {
                            out.push(format!("#{i}: {id} dispatched while still holding cores"));
                        }
                        holding.insert(id, (pid, r.attr_u64("cores").unwrap_or(0)));
                        let used: u64 = holding.values().filter(|(p, _)| *p == pid).map(|(_, c)| c).sum();
                        if used > cap {
                            out.push(format!("#{i}: pilot {pid} holds {used} cores of {cap}"));
                        }
                    }
                    t if TERMINAL.contains(&t) => {
                        holding.remove(id);
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    out
}

/// Every dispatch of a successor comes after its predecessor is Done.
pub fn dependency_violations(log: &EventLog, edges: &[(String, String)]) -> Vec<String> {
    let mut out = Vec::new();
    for (a, b) in edges {
        let done = log
            .records()
            .iter()
            .position(|r| r.is(Entity::Task, "Done") && r.entity_id == *a);
        for (i, r) in log.records().iter().enumerate() {
            if r.is(Entity::Task, "Dispatched") && r.entity_id == *b {
                match done {
                    Some(d) if d < i && log.records()[d].time <= r.time => {}
                    _ => out.push(format!("#{i}: {b} dispatched before {a} was Done")),
                }
            }
        }
    }
    out
}

/// Order in which tasks were first dispatched.
pub fn dispatch_order(log: &EventLog) -> Vec<String> {
    let mut seen = BTreeSet::new();
    log.records()
        .iter()
        .filter(|r| r.is(Entity::Task, "Dispatched"))
        .filter(|r| seen.insert(r.entity_id.clone()))
        .map(|r| r.entity_id.clone())
        .collect()
}

/// True when `order` lists every node once and every edge goes forward.
pub fn is_topological(order: &[String], nodes: &[String], edges: &[(String, String)]) -> bool {
    if order.len() != nodes.len() || order.iter().collect::<BTreeSet<_>>() != nodes.iter().collect() {
        return false;
    }
    let pos = |x: &String| order.iter().position(|o| o == x).unwrap();
    edges.iter().all(|(a, b)| pos(a) < pos(b))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn random_dcr(rng: &mut ChaCha8Rng) -> DcrDescriptor {
    let mut d = DcrDescriptor::batch_sim("sim", rng.random_range(1..=4), pick(rng, &[1, 2, 4, 8]), pick(rng, &[10.0, 30.0, 60.0]));
    d.max_concurrent_jobs = rng.random_range(3..=8);
    d.max_job_walltime = 10_000.0;
    d
}

fn random_tasks(rng: &mut ChaCha8Rng, max_cores: u32) -> Vec<TaskSpec> {
    let n = rng.random_range(1..=20);
    (0..n)
        .map(|i| {
            let cores = rng.random_range(1..=max_cores.min(4));
            let dur = pick(rng, &[1.0, 2.5, 5.0, 10.0, 17.0, 40.0, 60.0]);
            TaskSpec::new(format!("t{i:02}"), "/bin/true", cores, dur)
        })
        .collect()
}

fn random_pilots(rng: &mut ChaCha8Rng, dcr: &DcrDescriptor, count: usize) -> Vec<PilotSpec> {
    (0..count)
        .map(|i| PilotSpec {
            pilot_id: format!("p{i}"),
            target_dcr: dcr.dcr_id.clone(),
            nodes: rng.random_range(1..=dcr.nodes),
            cores_per_node: dcr.cores_per_node,
            walltime: pick(rng, &[100.0, 200.0, 400.0, 1000.0]),
            bootstrap_mode: Default::default(),
        })
        .collect()
}

fn random_edges(rng: &mut ChaCha8Rng, tasks: &[TaskSpec], p: f64) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for j in 0..tasks.len() {
        for i in 0..j {
            if rng.random_bool(p) {
                edges.push((tasks[i].task_id.clone(), tasks[j].task_id.clone()));
            }
        }
    }
    edges
}

fn base(name: String, dcr: DcrDescriptor, workload: WorkloadSpec, seed: u64) -> Scenario {
    let mut s = Scenario::canonical();
    s.name = name;
    s.dcr = dcr;
    s.workload = workload;
    s.seed = seed;
    s.pilot = None;
    s.horizon = 50_000.0;
    s
}

fn perturb(rng: &mut ChaCha8Rng, s: &mut Scenario) {
    s.backfill = rng.random_bool(0.5);
    s.job_dispatch_overhead = pick(rng, &[0.0, 0.0, 1.5]);
    for _ in 0..rng.random_range(0..=3) {
        s.background_jobs.push(BackgroundJob {
            arrival_time: rng.random_range(0..200) as f64,
            nodes: rng.random_range(1..=s.dcr.nodes),
            duration: rng.random_range(10..300) as f64,
        });
    }
    s.agent = SimAgentConfig {
        dispatch_overhead: pick(rng, &[0.0, 0.0, 0.5]),
        bootstrap_delay: pick(rng, &[0.0, 0.0, 5.0]),
        ..SimAgentConfig::default()
    };
}

/// Small random scenario: at most 20 tasks and 3 pilots, with failures,
/// background load, cancellations and overruns mixed in.
pub fn random_scenario(seed: u64) -> (Scenario, ExecutionMode) {
    let mut rng = rng(seed);
    let dcr = random_dcr(&mut rng);
    let style = rng.random_range(0..3);
    let count = rng.random_range(1..=3);
    let pilots = random_pilots(&mut rng, &dcr, count);
    let shape = PilotShape {
        nodes: rng.random_range(1..=dcr.nodes),
        cores_per_node: dcr.cores_per_node,
        walltime: pick(&mut rng, &[100.0, 300.0, 1000.0]),
    };
    let max_cores = if style == 0 {
        shape.nodes * shape.cores_per_node
    } else {
        pilots.iter().map(|p| p.nodes * p.cores_per_node).min().unwrap()
    };
    let tasks = random_tasks(&mut rng, max_cores);
    let edges = if rng.random_bool(0.3) { random_edges(&mut rng, &tasks, 0.15) } else { Vec::new() };
    let mut s = base(format!("random-{seed}"), dcr, WorkloadSpec::new("w", tasks).with_dependencies(edges), seed);
    perturb(&mut rng, &mut s);
    s.max_attempts = rng.random_range(1..=3);
    s.rebind_on_pilot_loss = rng.random_bool(0.3);
    let ids: Vec<String> = s.workload.tasks.iter().map(|t| t.task_id.clone()).collect();
    for id in &ids {
        if rng.random_bool(0.1) {
            s.failing_tasks.insert(id.clone(), rng.random_range(1..=2));
        }
        if rng.random_bool(0.1) {
            s.actual_durations.insert(id.clone(), pick(&mut rng, &[0.5, 30.0, 150.0]));
        }
    }
    let mode = match style {
        0 => {
            s.pilot = Some(shape);
            s.overallocation = pick(&mut rng, &[1.0, 1.2, 2.0]);
            ExecutionMode::PilotLate
        }
        1 => {
            s.pilots = pilots;
            ExecutionMode::PilotLate
        }
        _ => {
            s.pilots = pilots;
            ExecutionMode::PilotEarly
        }
    };
    if !s.pilots.is_empty() && rng.random_bool(0.2) {
        s.pilot_cancellations.push(PilotCancellation {
            time: rng.random_range(0..300) as f64,
            pilot_id: s.pilots[rng.random_range(0..s.pilots.len())].pilot_id.clone(),
        });
    }
    (s, mode)
}

/// Early-binding scenario: every task is pinned to a random pilot large
/// enough for it. Returns the pins.
pub fn random_pinned_scenario(seed: u64) -> (Scenario, BTreeMap<String, String>) {
    let mut rng = rng(seed ^ 0x5eed);
    let dcr = random_dcr(&mut rng);
    let count = rng.random_range(1..=3);
    let pilots = random_pilots(&mut rng, &dcr, count);
    let biggest = pilots.iter().map(|p| p.nodes * p.cores_per_node).max().unwrap();
    let mut tasks = random_tasks(&mut rng, biggest);
    let mut pins = BTreeMap::new();
    for t in &mut tasks {
        let mut fit: Vec<&PilotSpec> = pilots.iter().filter(|p| p.nodes * p.cores_per_node >= t.cores).collect();
        fit.shuffle(&mut rng);
        t.pinned_pilot = Some(fit[0].pilot_id.clone());
        pins.insert(t.task_id.clone(), fit[0].pilot_id.clone());
    }
    let mut s = base(format!("pinned-{seed}"), dcr, WorkloadSpec::new("w", tasks), seed);
    perturb(&mut rng, &mut s);
    s.pilots = pilots;
    if rng.random_bool(0.2) {
        s.pilot_cancellations.push(PilotCancellation {
            time: rng.random_range(0..200) as f64,
            pilot_id: s.pilots[rng.random_range(0..s.pilots.len())].pilot_id.clone(),
        });
    }
    (s, pins)
}

/// Random DAG of at most 12 one-core tasks with shuffled ids.
pub fn random_dag(seed: u64) -> Scenario {
    let mut rng = rng(seed ^ 0xda6);
    let n = rng.random_range(1..=12);
    let mut names: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
    names.shuffle(&mut rng);
    let tasks: Vec<TaskSpec> = names
        .iter()
        .map(|id| TaskSpec::new(id.clone(), "/bin/true", 1, pick(&mut rng, &[1.0, 3.0, 7.0, 20.0])))
        .collect();
    let edges = random_edges(&mut rng, &tasks, 0.3);
    let mut dcr = DcrDescriptor::batch_sim("sim", 2, 4, 30.0);
    dcr.max_concurrent_jobs = 4;
    let mut s = base(format!("dag-{seed}"), dcr, WorkloadSpec::new("dag", tasks).with_dependencies(edges), seed);
    s.pilot = Some(PilotShape {
        nodes: 1,
        cores_per_node: rng.random_range(1..=4),
        walltime: 2000.0,
    });
    s
}
