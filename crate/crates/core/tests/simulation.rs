mod support;

use std::collections::BTreeMap;

use pilotkit::harness::{run_scenario, PilotCancellation, Scenario};
use pilotkit::metrics::ExecutionMode;
use pilotkit::{Entity, EventLog, PilotSpec, TaskSpec, WorkloadSpec};
use proptest::prelude::*;

fn final_task_states(log: &EventLog) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for r in log.records().iter().filter(|r| r.entity == Entity::Task) {
        out.insert(r.entity_id.clone(), r.transition.clone());
    }
    out
}

fn dispatches_of(log: &EventLog, task: &str) -> usize {
    log.records()
        .iter()
        .filter(|r| r.entity == Entity::Task && r.entity_id == task && r.transition == "Dispatched")
        .count()
}

fn small(n: usize, duration: f64) -> Scenario {
    let mut s = Scenario::canonical();
    s.workload = WorkloadSpec::new(
        "w",
        (1..=n).map(|i| TaskSpec::new(format!("t{i:02}"), "/bin/true", 1, duration)).collect(),
    );
    s
}

#[test]
fn flaky_task_is_retried_until_it_succeeds() {
    let mut s = small(8, 10.0);
    s.max_attempts = 3;
    s.failing_tasks.insert("t05".into(), 2);
    let run = run_scenario(&s, ExecutionMode::PilotLate).unwrap();
    assert!(run.finished);
    assert!(support::violations(&run.log).is_empty());
    assert!(final_task_states(&run.log).values().all(|t| t == "Done"));
    assert_eq!(dispatches_of(&run.log, "t05"), 3);
}

#[test]
fn exhausted_attempts_leave_the_task_failed() {
    let mut s = small(4, 10.0);
    s.max_attempts = 2;
    s.failing_tasks.insert("t02".into(), 5);
    let run = run_scenario(&s, ExecutionMode::PilotLate).unwrap();
    assert!(run.finished);
    let states = final_task_states(&run.log);
    assert_eq!(states["t02"], "Failed");
    assert_eq!(states.values().filter(|t| *t == "Done").count(), 3);
    assert_eq!(dispatches_of(&run.log, "t02"), 2);
}

#[test]
fn direct_mode_queues_one_job_per_task() {
    let run = run_scenario(&small(9, 5.0), ExecutionMode::Direct).unwrap();
    assert!(run.finished);
    let queued = run
        .log
        .records()
        .iter()
        .filter(|r| r.entity == Entity::Job && r.transition == "JobQueued")
        .count();
    assert_eq!(queued, 9);
    // 4 cores per cycle of 60 s: three cycles, the last one running a single 5 s task.
    assert_eq!(run.report().unwrap().makespan, 3.0 * 60.0 + 5.0);
}

#[test]
fn explicit_pilot_cancellation_stops_dispatch_to_it() {
    let mut s = small(12, 20.0);
    s.pilot = None;
    s.pilots = ["a", "b"]
        .map(|id| PilotSpec {
            pilot_id: id.into(),
            target_dcr: "hpc".into(),
            nodes: 1,
            cores_per_node: 2,
            walltime: 600.0,
            bootstrap_mode: Default::default(),
        })
        .to_vec();
    s.pilot_cancellations.push(PilotCancellation {
        time: 70.0,
        pilot_id: "a".into(),
    });
    s.max_attempts = 2;
    let run = run_scenario(&s, ExecutionMode::PilotLate).unwrap();
    assert!(run.finished);
    assert!(support::violations(&run.log).is_empty());
    let canceled_at = run
        .log
        .records()
        .iter()
        .find(|r| r.entity == Entity::Pilot && r.entity_id == "a" && r.transition == "Canceled")
        .map(|r| r.time)
        .expect("pilot a canceled");
    assert!(run.log.records().iter().all(|r| !(r.transition == "Dispatched"
        && r.attr_str("pilot_id") == Some("a")
        && r.time >= canceled_at)));
}

#[test]
fn two_stage_workflow_waits_for_the_first_stage() {
    let mut s = small(6, 10.0);
    s.workload = s.workload.with_dependencies([("t01", "t04"), ("t02", "t04"), ("t03", "t05"), ("t04", "t06")]);
    let run = run_scenario(&s, ExecutionMode::PilotLate).unwrap();
    assert!(run.finished);
    let edges: Vec<(String, String)> = s.workload.dependencies.clone();
    assert!(support::dependency_violations(&run.log, &edges).is_empty());
    // Three levels of 10 s after the pilot starts at the first cycle.
    assert_eq!(run.report().unwrap().makespan, 60.0 + 30.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_runs_respect_dispatch_invariants(seed in any::<u64>()) {
        let (s, mode) = support::random_scenario(seed);
        let run = run_scenario(&s, mode).unwrap();
        let v = support::violations(&run.log);
        prop_assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn pinned_tasks_run_only_on_their_pilot(seed in any::<u64>()) {
        let (s, pins) = support::random_pinned_scenario(seed);
        let run = run_scenario(&s, ExecutionMode::PilotEarly).unwrap();
        let v = support::violations(&run.log);
        prop_assert!(v.is_empty(), "{v:?}");
        for r in run.log.records().iter().filter(|r| r.entity == Entity::Task && r.transition == "Dispatched") {
            prop_assert_eq!(r.attr_str("pilot_id"), pins.get(&r.entity_id).map(String::as_str));
        }
    }

    #[test]
    fn reruns_are_identical(seed in any::<u64>()) {
        let (s, mode) = support::random_scenario(seed);
        let a = run_scenario(&s, mode).unwrap();
        let b = run_scenario(&s, mode).unwrap();
        prop_assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    }
}
