use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{ModelError, TaskSpec, TaskState};

/// A set of tasks plus the dependency edges between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub workload_id: String,
    pub tasks: Vec<TaskSpec>,
    /// `(predecessor, successor)` pairs.
    #[serde(default)]
    pub dependencies: Vec<(String, String)>,
    #[serde(default)]
    pub coupling_flag: bool,
}

impl WorkloadSpec {
    pub fn new(workload_id: impl Into<String>, tasks: Vec<TaskSpec>) -> Self {
        WorkloadSpec {
            workload_id: workload_id.into(),
            tasks,
            dependencies: Vec::new(),
            coupling_flag: false,
        }
    }

    pub fn with_dependencies<I, A, B>(mut self, edges: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        self.dependencies = edges.into_iter().map(|(a, b)| (a.into(), b.into())).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkloadClass {
    BagOfTasks,
    Ensemble,
    CoupledEnsemble,
    Workflow,
}

/// A workload that passed [`validate_workload`]. Holds the cached
/// topological order and the predecessor/successor maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedWorkload {
    spec: WorkloadSpec,
    topo_order: Vec<String>,
    predecessors: BTreeMap<String, BTreeSet<String>>,
    successors: BTreeMap<String, BTreeSet<String>>,
}

impl ValidatedWorkload {
    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn workload_id(&self) -> &str {
        &self.spec.workload_id
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.spec.tasks
    }

    pub fn topo_order(&self) -> &[String] {
        &self.topo_order
    }

    pub fn predecessors(&self, task_id: &str) -> impl Iterator<Item = &str> {
        self.predecessors.get(task_id).into_iter().flatten().map(String::as_str)
    }

    pub fn successors(&self, task_id: &str) -> impl Iterator<Item = &str> {
        self.successors.get(task_id).into_iter().flatten().map(String::as_str)
    }

    /// Every task starts out Pending.
    pub fn initial_states(&self, at: f64) -> BTreeMap<String, TaskState> {
        self.spec
            .tasks
            .iter()
            .map(|t| (t.task_id.clone(), TaskState::new(at)))
            .collect()
    }

    pub fn into_spec(self) -> WorkloadSpec {
        self.spec
    }
}

/// Checks task fields, id uniqueness, edge endpoints and acyclicity.
/// Ties in the topological order are broken by task id.
pub fn validate_workload(spec: WorkloadSpec) -> Result<ValidatedWorkload, ModelError> {
    if spec.workload_id.is_empty() {
        return Err(ModelError::InvalidWorkload("workload_id must not be empty".into()));
    }
    let mut ids = HashSet::with_capacity(spec.tasks.len());
    for task in &spec.tasks {
        task.validate()?;
        if !ids.insert(task.task_id.as_str()) {
            return Err(ModelError::DuplicateTaskId(task.task_id.clone()));
        }
    }

    let mut predecessors: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut successors: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (from, to) in &spec.dependencies {
        for end in [from, to] {
            if !ids.contains(end.as_str()) {
                return Err(ModelError::DanglingDependency {
                    from: from.clone(),
                    to: to.clone(),
                });
            }
        }
        predecessors.entry(to.clone()).or_default().insert(from.clone());
        successors.entry(from.clone()).or_default().insert(to.clone());
    }

    // Kahn's algorithm over a sorted frontier.
    let mut indegree: BTreeMap<&str, usize> = spec
        .tasks
        .iter()
        .map(|t| (t.task_id.as_str(), predecessors.get(&t.task_id).map_or(0, BTreeSet::len)))
        .collect();
    let mut frontier: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut topo_order = Vec::with_capacity(spec.tasks.len());
    while let Some(id) = frontier.pop_first() {
        topo_order.push(id.to_string());
        for succ in successors.get(id).into_iter().flatten() {
            let d = indegree.get_mut(succ.as_str()).expect("edge endpoints checked");
            *d -= 1;
            if *d == 0 {
                frontier.insert(succ.as_str());
            }
        }
    }
    if topo_order.len() != spec.tasks.len() {
        let mut stuck: Vec<String> = indegree
            .into_iter()
            .filter(|(_, d)| *d > 0)
            .map(|(id, _)| id.to_string())
            .collect();
        stuck.sort();
        return Err(ModelError::CyclicDependency(stuck));
    }

    Ok(ValidatedWorkload {
        spec,
        topo_order,
        predecessors,
        successors,
    })
}

pub fn classify_workload(w: &ValidatedWorkload) -> WorkloadClass {
    let spec = w.spec();
    if !spec.dependencies.is_empty() {
        return WorkloadClass::Workflow;
    }
    if spec.coupling_flag {
        return WorkloadClass::CoupledEnsemble;
    }
    let mut tasks = spec.tasks.iter();
    let identical = match tasks.next() {
        None => true,
        Some(first) => {
            let key = first.similarity_key();
            tasks.all(|t| t.similarity_key() == key)
        }
    };
    if identical {
        WorkloadClass::BagOfTasks
    } else {
        WorkloadClass::Ensemble
    }
}
