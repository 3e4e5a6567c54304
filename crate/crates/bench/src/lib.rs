//! Fixtures shared by the benchmarks in `benches/`.

use std::collections::BTreeMap;

use pilotkit::workload_manager::PilotDirectory;
use pilotkit::{PilotStatus, TaskSpec, WorkloadSpec};

/// A pilot directory with a fixed set of active pilots.
pub struct FixedPilots(BTreeMap<String, u32>);

impl FixedPilots {
    /// `count` active pilots named `p0..`, each with `cores` cores.
    pub fn active(count: usize, cores: u32) -> Self {
        FixedPilots((0..count).map(|i| (format!("p{i}"), cores)).collect())
    }
}

impl PilotDirectory for FixedPilots {
    fn pilot_status(&self, pilot_id: &str) -> Option<PilotStatus> {
        self.0.contains_key(pilot_id).then_some(PilotStatus::Active)
    }

    fn pilot_cores(&self, pilot_id: &str) -> Option<u32> {
        self.0.get(pilot_id).copied()
    }
}

/// `n` independent one-core tasks of 10 s.
pub fn bag_of_tasks(id: &str, n: usize) -> WorkloadSpec {
    let tasks = (0..n).map(|i| TaskSpec::new(format!("{id}-{i}"), "/bin/true", 1, 10.0)).collect();
    WorkloadSpec::new(id, tasks)
}
