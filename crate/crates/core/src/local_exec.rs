//! Real execution backend: each pilot job is an agent subprocess on this
//! host holding a logical number of cores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agent::runtime::{wall_clock, ENV_CORES, ENV_MANAGER_ADDR, ENV_PILOT_ID, ENV_WALLTIME, ENV_WORKDIR};
use crate::backend::{DcrBackend, DcrError};
use crate::model::{BootstrapMode, DcrDescriptor, JobPayload, JobRecord, JobRequest, JobStatus, Middleware};
use crate::sim::{SimEvent, SimEventKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessHandle {
    pub pilot_id: String,
    pub os_pid: u32,
    pub launch_time: f64,
    pub configured_cores: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessStatus {
    Running,
    Exited(i32),
}

struct Proc {
    handle: ProcessHandle,
    child: Child,
    record: JobRecord,
    exit: Option<i32>,
    kill_at: Option<Instant>,
}

pub struct LocalExecBackend {
    descriptor: DcrDescriptor,
    agent_path: PathBuf,
    manager_addr: String,
    sandbox_root: PathBuf,
    grace: Duration,
    procs: BTreeMap<String, Proc>,
    by_pilot: BTreeMap<String, String>,
    events: Vec<SimEvent>,
    seq: u64,
}

impl LocalExecBackend {
    pub fn new(
        descriptor: DcrDescriptor,
        agent_path: impl Into<PathBuf>,
        manager_addr: impl Into<String>,
        sandbox_root: impl Into<PathBuf>,
    ) -> Result<Self, DcrError> {
        descriptor.validate().map_err(|e| DcrError::Unsupported(e.to_string()))?;
        if descriptor.middleware != Middleware::LocalExec {
            return Err(DcrError::Unsupported(format!("DCR {} is not LocalExec", descriptor.dcr_id)));
        }
        Ok(LocalExecBackend {
            descriptor,
            agent_path: agent_path.into(),
            manager_addr: manager_addr.into(),
            sandbox_root: sandbox_root.into(),
            grace: Duration::from_secs(5),
            procs: BTreeMap::new(),
            by_pilot: BTreeMap::new(),
            events: Vec::new(),
            seq: 0,
        })
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    pub fn handle(&self, pilot_id: &str) -> Option<&ProcessHandle> {
        self.by_pilot.get(pilot_id).map(|j| &self.procs[j].handle)
    }

    fn live_jobs(&self) -> usize {
        self.procs.values().filter(|p| !p.record.status.is_terminal()).count()
    }

    fn staged_binary(&self, sandbox: &Path) -> Result<PathBuf, DcrError> {
        let name = self.agent_path.file_name().unwrap_or_else(|| "pilotkit-agent".as_ref());
        let dest = sandbox.join(name);
        fs::copy(&self.agent_path, &dest).map_err(|e| DcrError::SpawnFailure(format!("staging agent: {e}")))?;
        Ok(dest)
    }

    fn proc_for_pilot(&mut self, pilot_id: &str) -> Result<&mut Proc, DcrError> {
        let job = self
            .by_pilot
            .get(pilot_id)
            .ok_or_else(|| DcrError::UnknownJob(format!("no process for pilot {pilot_id}")))?;
        Ok(self.procs.get_mut(job).expect("pilot index points at a job"))
    }

    /// Non-blocking process status.
    pub fn poll(&mut self, pilot_id: &str) -> Result<ProcessStatus, DcrError> {
        let p = self.proc_for_pilot(pilot_id)?;
        if p.exit.is_none() {
            if let Ok(Some(status)) = p.child.try_wait() {
                p.exit = Some(exit_code(status));
            }
        }
        Ok(match p.exit {
            Some(c) => ProcessStatus::Exited(c),
            None => ProcessStatus::Running,
        })
    }

    /// Starts the grace period after which the agent is killed. The caller
    /// sends the graceful Shutdown over the protocol. Idempotent.
    pub fn terminate(&mut self, pilot_id: &str) -> Result<(), DcrError> {
        let grace = self.grace;
        let p = self.proc_for_pilot(pilot_id)?;
        if p.exit.is_none() && p.kill_at.is_none() {
            p.kill_at = Some(Instant::now() + grace);
        }
        Ok(())
    }

    /// Kills every agent still running and waits for it.
    pub fn kill_all(&mut self) {
        for p in self.procs.values_mut() {
            if p.exit.is_none() {
                let _ = p.child.kill();
                if let Ok(status) = p.child.wait() {
                    p.exit = Some(exit_code(status));
                }
            }
        }
    }

    fn emit(&mut self, time: f64, kind: SimEventKind, job_id: &str) {
        self.events.push(SimEvent {
            time,
            kind,
            job_id: job_id.to_string(),
        });
    }
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    if let Some(c) = status.code() {
        return c;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    1
}

impl DcrBackend for LocalExecBackend {
    fn descriptor(&self) -> &DcrDescriptor {
        &self.descriptor
    }

    fn submit_job(&mut self, request: JobRequest, at: f64) -> Result<String, DcrError> {
        let JobPayload::Pilot(spec) = &request.payload else {
            return Err(DcrError::Unsupported("LocalExec only runs pilot agents".into()));
        };
        if self.by_pilot.get(&spec.pilot_id).is_some_and(|j| !self.procs[j].record.status.is_terminal()) {
            return Err(DcrError::DuplicatePilot(spec.pilot_id.clone()));
        }
        let cores = request.nodes * request.cores_per_node;
        if cores > self.descriptor.total_cores() {
            return Err(DcrError::OversizedJob {
                requested: format!("{cores} cores"),
                available: format!("{} cores", self.descriptor.total_cores()),
            });
        }
        if request.walltime > self.descriptor.max_job_walltime {
            return Err(DcrError::WalltimeExceedsLimit {
                requested: request.walltime,
                limit: self.descriptor.max_job_walltime,
            });
        }
        if self.live_jobs() >= self.descriptor.max_concurrent_jobs as usize {
            return Err(DcrError::QueueFull(self.descriptor.dcr_id.clone()));
        }

        let sandbox = self.sandbox_root.join(&spec.pilot_id);
        fs::create_dir_all(&sandbox).map_err(|e| DcrError::SpawnFailure(format!("sandbox: {e}")))?;
        let program = match spec.bootstrap_mode {
            BootstrapMode::Bundled => self.agent_path.clone(),
            BootstrapMode::Staged => self.staged_binary(&sandbox)?,
        };
        let log_file = |name: &str| {
            fs::File::create(sandbox.join(name)).map_err(|e| DcrError::SpawnFailure(format!("agent log: {e}")))
        };
        let child = Command::new(&program)
            .env(ENV_PILOT_ID, &spec.pilot_id)
            .env(ENV_CORES, cores.to_string())
            .env(ENV_WALLTIME, request.walltime.to_string())
            .env(ENV_MANAGER_ADDR, &self.manager_addr)
            .env(ENV_WORKDIR, sandbox.join("tasks"))
            .current_dir(&sandbox)
            .stdin(Stdio::null())
            .stdout(log_file("agent.out")?)
            .stderr(log_file("agent.err")?)
            .spawn()
            .map_err(|e| DcrError::SpawnFailure(format!("{}: {e}", program.display())))?;

        self.seq += 1;
        let job_id = format!("{}.{:06}", self.descriptor.dcr_id, self.seq);
        let launch_time = wall_clock().max(at);
        let record = JobRecord {
            job_id: job_id.clone(),
            dcr_id: self.descriptor.dcr_id.clone(),
            payload: request.payload.clone(),
            requested_nodes: request.nodes,
            requested_cores: request.cores_per_node,
            walltime: request.walltime,
            submit_time: at,
            start_time: Some(launch_time),
            end_time: None,
            status: JobStatus::Running,
            exit_code: None,
        };
        let handle = ProcessHandle {
            pilot_id: spec.pilot_id.clone(),
            os_pid: child.id(),
            launch_time,
            configured_cores: cores,
        };
        self.by_pilot.insert(spec.pilot_id.clone(), job_id.clone());
        self.procs.insert(
            job_id.clone(),
            Proc {
                handle,
                child,
                record,
                exit: None,
                kill_at: None,
            },
        );
        self.emit(at, SimEventKind::JobQueued, &job_id);
        self.emit(launch_time, SimEventKind::JobStarted, &job_id);
        Ok(job_id)
    }

    fn cancel_job(&mut self, job_id: &str, at: f64) -> Result<(), DcrError> {
        let p = self
            .procs
            .get_mut(job_id)
            .ok_or_else(|| DcrError::UnknownJob(job_id.to_string()))?;
        if p.record.status.is_terminal() {
            return Err(DcrError::AlreadyTerminal(job_id.to_string()));
        }
        p.record.status = JobStatus::Canceled;
        p.record.end_time = Some(at);
        let pilot = p.handle.pilot_id.clone();
        self.terminate(&pilot)?;
        self.emit(at, SimEventKind::JobCanceled, job_id);
        Ok(())
    }

    fn query_job(&self, job_id: &str) -> Result<JobRecord, DcrError> {
        self.procs
            .get(job_id)
            .map(|p| p.record.clone())
            .ok_or_else(|| DcrError::UnknownJob(job_id.to_string()))
    }

    fn finish_job(&mut self, job_id: &str, _exit_code: i32, _at: f64) -> Result<(), DcrError> {
        // Agent processes end on their own; `advance` notices.
        if self.procs.contains_key(job_id) {
            Ok(())
        } else {
            Err(DcrError::UnknownJob(job_id.to_string()))
        }
    }

    fn advance(&mut self, until: f64) -> Vec<SimEvent> {
        let now = Instant::now();
        let mut ended = Vec::new();
        for (job_id, p) in &mut self.procs {
            if p.exit.is_none() {
                if p.kill_at.is_some_and(|k| now >= k) {
                    log::warn!("agent for {} did not stop in time, killing it", p.handle.pilot_id);
                    let _ = p.child.kill();
                }
                if let Ok(Some(status)) = p.child.try_wait() {
                    p.exit = Some(exit_code(status));
                } else if p.record.status == JobStatus::Running {
                    let limit = p.handle.launch_time + p.record.walltime + self.grace.as_secs_f64();
                    if until > limit {
                        let _ = p.child.kill();
                        let _ = p.child.wait();
                        p.exit = Some(137);
                        p.record.status = JobStatus::Killed;
                        p.record.end_time = Some(until);
                        ended.push((job_id.clone(), SimEventKind::JobKilledWalltime));
                        continue;
                    }
                }
            }
            if let Some(code) = p.exit {
                if p.record.status == JobStatus::Running {
                    p.record.status = JobStatus::Completed;
                    p.record.end_time = Some(until);
                    p.record.exit_code = Some(code);
                    ended.push((job_id.clone(), SimEventKind::JobEnded));
                } else if p.record.exit_code.is_none() {
                    p.record.exit_code = Some(code);
                }
            }
        }
        for (job_id, kind) in ended {
            self.emit(until, kind, &job_id);
        }
        std::mem::take(&mut self.events)
    }

    fn next_event_time(&self) -> Option<f64> {
        None
    }
}

impl Drop for LocalExecBackend {
    fn drop(&mut self) {
        self.kill_all();
    }
}
