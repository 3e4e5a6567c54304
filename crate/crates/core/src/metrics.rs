//! Metrics computed from an event log alone, so a persisted log yields the
//! same numbers as the live run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Entity, EventLog, EventRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("workload {0} not found in the log")]
    WorkloadNotFound(String),
    #[error("workload {0} has not finished")]
    WorkloadNotFinished(String),
    #[error("pilot {0} never became active")]
    PilotNeverActive(String),
    #[error("pilot {0} has not terminated")]
    PilotNotFinished(String),
}

const TASK_TERMINAL: [&str; 3] = ["Done", "Failed", "Canceled"];
const PILOT_TERMINAL: [&str; 3] = ["Done", "Failed", "Canceled"];

fn workload_of(r: &EventRecord) -> Option<&str> {
    r.attr_str("workload_id")
}

/// Latest task terminal time minus the workload's submission time.
pub fn makespan(log: &EventLog, workload_id: &str) -> Result<f64, MetricsError> {
    let recs = log.records();
    let submitted = recs
        .iter()
        .find(|r| r.entity == Entity::Workload && r.entity_id == workload_id && r.transition == "Submitted")
        .ok_or_else(|| MetricsError::WorkloadNotFound(workload_id.to_string()))?
        .time;
    let finished = recs.iter().any(|r| {
        r.entity == Entity::Workload
            && r.entity_id == workload_id
            && matches!(r.transition.as_str(), "Completed" | "PartiallyFailed")
    });
    if !finished {
        return Err(MetricsError::WorkloadNotFinished(workload_id.to_string()));
    }
    let last = recs
        .iter()
        .filter(|r| {
            r.entity == Entity::Task
                && workload_of(r) == Some(workload_id)
                && TASK_TERMINAL.contains(&r.transition.as_str())
        })
        .map(|r| r.time)
        .fold(submitted, f64::max);
    Ok(last - submitted)
}

/// Busy core-seconds of finished tasks over the pilot's core-seconds while
/// Active.
pub fn utilization(log: &EventLog, pilot_id: &str) -> Result<f64, MetricsError> {
    let recs = log.records();
    let pilot = |r: &&EventRecord| r.entity == Entity::Pilot && r.entity_id == pilot_id;
    let active = recs
        .iter()
        .filter(pilot)
        .find(|r| r.transition == "Active")
        .ok_or_else(|| MetricsError::PilotNeverActive(pilot_id.to_string()))?;
    let cores = active.attr_f64("cores").unwrap_or(0.0);
    let end = recs
        .iter()
        .filter(pilot)
        .find(|r| PILOT_TERMINAL.contains(&r.transition.as_str()))
        .ok_or_else(|| MetricsError::PilotNotFinished(pilot_id.to_string()))?
        .time;
    let span = cores * (end - active.time);
    if span <= 0.0 {
        return Ok(0.0);
    }
    let busy: f64 = recs
        .iter()
        .filter(|r| r.entity == Entity::Task && r.attr_str("pilot_id") == Some(pilot_id))
        .filter(|r| matches!(r.transition.as_str(), "Done" | "Failed"))
        .filter_map(|r| Some(r.attr_f64("cores")? * (r.attr_f64("end")? - r.attr_f64("start")?)))
        .sum();
    Ok(busy / span)
}

/// Mean utilization over every pilot that became Active and terminated.
pub fn mean_pilot_utilization(log: &EventLog) -> Option<f64> {
    let ids: Vec<&str> = log
        .records()
        .iter()
        .filter(|r| r.is(Entity::Pilot, "Active"))
        .map(|r| r.entity_id.as_str())
        .collect();
    let values: Vec<f64> = ids.iter().filter_map(|id| utilization(log, id).ok()).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean of (task Dispatched − pilot TaskRequest) over pilot dispatches.
pub fn dispatch_overhead(log: &EventLog) -> f64 {
    let samples: Vec<f64> = log
        .records()
        .iter()
        .filter(|r| r.is(Entity::Task, "Dispatched"))
        .filter_map(|r| r.attr_f64("requested_at").map(|q| r.time - q))
        .collect();
    if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<f64>() / samples.len() as f64
    }
}

/// Mean time from a task first becoming Ready to its first start.
pub fn mean_task_wait(log: &EventLog, workload_id: &str) -> f64 {
    let mut ready: BTreeMap<&str, f64> = BTreeMap::new();
    let mut started: BTreeMap<&str, f64> = BTreeMap::new();
    for r in log.records() {
        if r.entity != Entity::Task || workload_of(r) != Some(workload_id) {
            continue;
        }
        match r.transition.as_str() {
            "Ready" | "Bound" => {
                ready.entry(&r.entity_id).or_insert(r.time);
            }
            "Running" => {
                let start = r.attr_f64("start").unwrap_or(r.time);
                started.entry(&r.entity_id).or_insert(start);
            }
            _ => {}
        }
    }
    let waits: Vec<f64> = started
        .iter()
        .filter_map(|(id, s)| ready.get(id).map(|r| s - r))
        .collect();
    if waits.is_empty() {
        0.0
    } else {
        waits.iter().sum::<f64>() / waits.len() as f64
    }
}

/// Jobs that entered a DCR queue, background load excluded.
pub fn queued_jobs(log: &EventLog) -> usize {
    log.records()
        .iter()
        .filter(|r| r.is(Entity::Job, "JobQueued") && r.attr_str("payload") != Some("Background"))
        .count()
}

/// Tasks finished per second of makespan.
pub fn throughput(log: &EventLog, workload_id: &str) -> Result<f64, MetricsError> {
    let span = makespan(log, workload_id)?;
    let done = log
        .records()
        .iter()
        .filter(|r| r.is(Entity::Task, "Done") && workload_of(r) == Some(workload_id))
        .count();
    Ok(if span > 0.0 { done as f64 / span } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionMode {
    Direct,
    PilotLate,
    PilotEarly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub mode: ExecutionMode,
    pub makespan: f64,
    pub mean_task_wait: f64,
    pub pilot_utilization: Option<f64>,
    pub dispatch_overhead: f64,
    pub queued_jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log: Option<String>,
}

impl ExperimentReport {
    /// Recomputes every field from a log.
    pub fn from_log(
        scenario: &str,
        mode: ExecutionMode,
        workload_id: &str,
        log: &EventLog,
    ) -> Result<Self, MetricsError> {
        Ok(ExperimentReport {
            scenario: scenario.to_string(),
            mode,
            makespan: makespan(log, workload_id)?,
            mean_task_wait: mean_task_wait(log, workload_id),
            pilot_utilization: mean_pilot_utilization(log),
            dispatch_overhead: dispatch_overhead(log),
            queued_jobs: queued_jobs(log),
            event_log: None,
        })
    }
}

/// Aligned plain-text table of reports.
pub fn format_table(reports: &[ExperimentReport]) -> String {
    let mut out = format!(
        "{:<12} {:<11} {:>10} {:>10} {:>11} {:>10} {:>7}\n",
        "scenario", "mode", "makespan", "mean_wait", "utilization", "overhead", "queued"
    );
    for r in reports {
        let util = r.pilot_utilization.map_or("-".to_string(), |u| format!("{u:.4}"));
        out.push_str(&format!(
            "{:<12} {:<11} {:>10.1} {:>10.2} {:>11} {:>10.3} {:>7}\n",
            r.scenario,
            format!("{:?}", r.mode),
            r.makespan,
            r.mean_task_wait,
            util,
            r.dispatch_overhead,
            r.queued_jobs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs;

    /// `n` one-core tasks of `d` seconds run back to back on a pilot of
    /// `cores` cores that is Active from 0 to `active`.
    fn pilot_log(n: usize, d: f64, cores: u32, active: f64) -> EventLog {
        let mut log = EventLog::new();
        log.push(0.0, Entity::Workload, "w", "Submitted", attrs!());
        log.push(0.0, Entity::Pilot, "p", "Active", attrs! {"cores" => cores});
        for i in 0..n {
            let start = (i / cores as usize) as f64 * d;
            log.push(
                start + d,
                Entity::Task,
                format!("t{i}"),
                "Done",
                attrs! {"workload_id" => "w", "pilot_id" => "p", "cores" => 1, "start" => start, "end" => start + d},
            );
        }
        log.push(active, Entity::Workload, "w", "Completed", attrs!());
        log.push(active, Entity::Pilot, "p", "Done", attrs!());
        log
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&pilot_log(40, 10.0, 4, 100.0), "p").unwrap(), 1.0);
        let u = utilization(&pilot_log(5, 10.0, 4, 30.0), "p").unwrap();
        assert!((u - 50.0 / 120.0).abs() < 1e-12);
        assert_eq!(utilization(&pilot_log(0, 10.0, 4, 30.0), "p").unwrap(), 0.0);
        assert_eq!(
            utilization(&pilot_log(0, 10.0, 4, 30.0), "q"),
            Err(MetricsError::PilotNeverActive("q".into()))
        );
    }

    #[test]
    fn makespan_of_single_task() {
        assert_eq!(makespan(&pilot_log(1, 10.0, 4, 10.0), "w").unwrap(), 10.0);
        let mut log = EventLog::new();
        log.push(0.0, Entity::Workload, "w", "Submitted", attrs!());
        assert_eq!(makespan(&log, "w"), Err(MetricsError::WorkloadNotFinished("w".into())));
        assert_eq!(makespan(&log, "x"), Err(MetricsError::WorkloadNotFound("x".into())));
    }
}
