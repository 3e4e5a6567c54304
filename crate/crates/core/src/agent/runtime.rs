//! Runs an [`AgentCore`] against a live manager: one control loop, a socket
//! reader thread and one worker thread per running task.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use super::{Action, AgentConfig, AgentCore, ExecutionEnvironment, SPAWN_FAILURE_EXIT};
use crate::model::TaskSpec;
use crate::protocol::{read_frame, write_frame, Message, TransportError};

pub const ENV_PILOT_ID: &str = "PILOTKIT_PILOT_ID";
pub const ENV_CORES: &str = "PILOTKIT_CORES";
pub const ENV_WALLTIME: &str = "PILOTKIT_WALLTIME_S";
pub const ENV_MANAGER_ADDR: &str = "PILOTKIT_MANAGER_ADDR";
/// Optional: where task sandboxes go. Defaults to the current directory.
pub const ENV_WORKDIR: &str = "PILOTKIT_WORKDIR";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("could not connect to {addr} after {attempts} attempts: {source}")]
    ConnectFailure {
        addr: String,
        attempts: u32,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub pilot_id: String,
    pub manager_addr: String,
    pub agent: AgentConfig,
    pub working_dir: PathBuf,
    pub connect_retries: u32,
    pub connect_backoff: Duration,
}

impl RuntimeConfig {
    /// Reads the bootstrap variables set by the launcher.
    pub fn from_env() -> Result<Self, AgentError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, AgentError> {
        let pilot_id = get(ENV_PILOT_ID).ok_or_else(|| AgentError::Usage(format!("{ENV_PILOT_ID} is not set")))?;
        let manager_addr =
            get(ENV_MANAGER_ADDR).ok_or_else(|| AgentError::Usage(format!("{ENV_MANAGER_ADDR} is not set")))?;
        let cores = match get(ENV_CORES) {
            Some(v) => v
                .parse::<u32>()
                .ok()
                .filter(|c| *c > 0)
                .ok_or_else(|| AgentError::Usage(format!("{ENV_CORES} must be a positive integer, got {v:?}")))?,
            None => 1,
        };
        let walltime = match get(ENV_WALLTIME) {
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite() && *w > 0.0)
                .ok_or_else(|| AgentError::Usage(format!("{ENV_WALLTIME} must be a positive number, got {v:?}")))?,
            None => 3600.0,
        };
        let working_dir = get(ENV_WORKDIR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        Ok(RuntimeConfig {
            pilot_id,
            manager_addr,
            agent: AgentConfig::new(cores, walltime),
            working_dir,
            connect_retries: 3,
            connect_backoff: Duration::from_millis(200),
        })
    }
}

/// Wall-clock seconds since the Unix epoch; the time base of real mode.
pub fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

enum Input {
    Frame(Message),
    Closed,
    TaskExit {
        task_id: String,
        exit_code: i32,
        start: Option<f64>,
        reason: Option<String>,
    },
}

fn connect(cfg: &RuntimeConfig) -> Result<TcpStream, AgentError> {
    let mut delay = cfg.connect_backoff;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match TcpStream::connect(&cfg.manager_addr) {
            Ok(s) => return Ok(s),
            Err(e) if attempt > cfg.connect_retries => {
                return Err(AgentError::ConnectFailure {
                    addr: cfg.manager_addr.clone(),
                    attempts: attempt,
                    source: e,
                })
            }
            Err(e) => {
                log::warn!("connect to {} failed ({e}), retrying", cfg.manager_addr);
                thread::sleep(delay);
                delay *= 2;
            }
        }
    }
}

/// Runs the agent to completion and returns its exit code.
pub fn run(cfg: RuntimeConfig) -> Result<i32, AgentError> {
    let stream = connect(&cfg)?;
    stream.set_nodelay(true)?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let (tx, rx) = mpsc::channel::<Input>();

    let reader_tx = tx.clone();
    let read_half = stream.try_clone()?;
    thread::spawn(move || {
        let mut reader = BufReader::new(read_half);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(m)) => {
                    if reader_tx.send(Input::Frame(m)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(TransportError::Decode(e)) => log::warn!("dropping bad frame: {e}"),
                Err(e) => {
                    log::warn!("connection error: {e}");
                    break;
                }
            }
        }
        let _ = reader_tx.send(Input::Closed);
    });

    let base_env: BTreeMap<String, String> = std::env::vars().collect();
    let mut core = AgentCore::new(&cfg.pilot_id, cfg.agent, wall_clock());
    let mut kill_flags: BTreeMap<String, Arc<AtomicBool>> = BTreeMap::new();
    let mut actions = core.start(wall_clock());

    loop {
        for action in actions.drain(..) {
            match action {
                Action::Send(m) => {
                    if let Err(e) = write_frame(&mut writer, &m) {
                        log::warn!("send failed: {e}");
                        let _ = tx.send(Input::Closed);
                    }
                }
                Action::Launch { task, .. } => {
                    let flag = Arc::new(AtomicBool::new(false));
                    kill_flags.insert(task.task_id.clone(), flag.clone());
                    let env = ExecutionEnvironment::for_task(&cfg.working_dir, &base_env, &task);
                    spawn_worker(task, env, flag, tx.clone());
                }
                Action::Kill { task_id } => {
                    if let Some(f) = kill_flags.remove(&task_id) {
                        f.store(true, Ordering::SeqCst);
                    }
                }
                Action::Exit(code) => {
                    for f in kill_flags.values() {
                        f.store(true, Ordering::SeqCst);
                    }
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return Ok(code);
                }
            }
        }

        let timeout = core
            .next_wakeup()
            .map(|t| Duration::from_secs_f64((t - wall_clock()).clamp(0.0, 3600.0)))
            .unwrap_or(Duration::from_secs(3600));
        let input = match rx.recv_timeout(timeout) {
            Ok(i) => Some(i),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => Some(Input::Closed),
        };
        let now = wall_clock();
        actions = match input {
            None => core.on_tick(now),
            Some(Input::Frame(m)) => core.on_message(m, now),
            Some(Input::Closed) => core.on_disconnect(),
            Some(Input::TaskExit {
                task_id,
                exit_code,
                start,
                reason,
            }) => {
                if kill_flags.remove(&task_id).is_none() {
                    // Already killed and reported.
                    core.on_tick(now)
                } else {
                    core.on_task_exit(&task_id, exit_code, start, reason, now)
                }
            }
        };
    }
}

fn exit_code(status: ExitStatus) -> i32 {
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

fn spawn_worker(task: TaskSpec, env: ExecutionEnvironment, kill: Arc<AtomicBool>, tx: Sender<Input>) {
    thread::spawn(move || {
        let spawn_failed = |reason: String| Input::TaskExit {
            task_id: task.task_id.clone(),
            exit_code: SPAWN_FAILURE_EXIT,
            start: None,
            reason: Some(reason),
        };
        let files = fs::create_dir_all(&env.working_dir)
            .and_then(|_| Ok((File::create(&env.stdout)?, File::create(&env.stderr)?)));
        let (out, err) = match files {
            Ok(f) => f,
            Err(e) => {
                let _ = tx.send(spawn_failed(format!("SpawnFailure: {e}")));
                return;
            }
        };
        let start = wall_clock();
        let child = Command::new(&task.executable)
            .args(&task.arguments)
            .env_clear()
            .envs(&env.environment)
            .current_dir(&env.working_dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .spawn();
        let mut child = match child {
            Ok(c) => c,
            Err(e) => {
                let _ = tx.send(spawn_failed(format!("SpawnFailure: {e}")));
                return;
            }
        };
        loop {
            if kill.load(Ordering::SeqCst) {
                let _ = child.kill();
                let _ = child.wait();
                return;
            }
            match child.try_wait() {
                Ok(Some(status)) => {
                    let _ = tx.send(Input::TaskExit {
                        task_id: task.task_id.clone(),
                        exit_code: exit_code(status),
                        start: Some(start),
                        reason: None,
                    });
                    return;
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    let _ = tx.send(Input::TaskExit {
                        task_id: task.task_id.clone(),
                        exit_code: 1,
                        start: Some(start),
                        reason: Some(format!("wait failed: {e}")),
                    });
                    return;
                }
            }
        }
    });
}
