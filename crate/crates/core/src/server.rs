//! Real-mode manager process: agents and operators connect to the same TCP
//! port. A connection whose first line is a protocol frame is an agent
//! session; anything else is a single control request answered with one
//! JSON line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::runtime::wall_clock;
use crate::backend::BackendSet;
use crate::events::EventLog;
use crate::local_exec::LocalExecBackend;
use crate::manager::{Manager, ManagerError};
use crate::model::{DcrDescriptor, Middleware, PilotSpec, WorkloadSpec};
use crate::pilot_manager::{PilotManager, PilotTimeouts, ProvisioningPolicy};
use crate::protocol::{decode, read_frame, write_frame, Message, TransportError};
use crate::workload_manager::{DispatchConfig, WorkloadManager};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    BindError { addr: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub dcrs: Vec<DcrDescriptor>,
    pub agent_path: PathBuf,
    pub sandbox_dir: PathBuf,
    pub policy: ProvisioningPolicy,
    pub dispatch: DispatchConfig,
    pub event_log: Option<PathBuf>,
    pub tick_interval: Duration,
    pub terminate_grace: Duration,
}

impl ServerConfig {
    pub fn new(listen: impl Into<String>, dcrs: Vec<DcrDescriptor>, agent_path: impl Into<PathBuf>, sandbox_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            listen: listen.into(),
            dcrs,
            agent_path: agent_path.into(),
            sandbox_dir: sandbox_dir.into(),
            policy: ProvisioningPolicy::explicit(),
            dispatch: DispatchConfig::default(),
            event_log: None,
            tick_interval: Duration::from_millis(100),
            terminate_grace: Duration::from_secs(5),
        }
    }
}

/// One operator request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlRequest {
    SubmitPilot { spec: PilotSpec },
    SubmitWorkload { spec: WorkloadSpec },
    Status { id: String },
    Cancel { id: String },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Value>,
    /// Error class, e.g. `UnknownEntity`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ControlResponse {
    fn ok(id: Option<String>, status: Option<Value>) -> Self {
        ControlResponse {
            ok: true,
            id,
            status,
            kind: None,
            error: None,
        }
    }

    fn err(kind: &str, error: impl ToString) -> Self {
        ControlResponse {
            ok: false,
            id: None,
            status: None,
            kind: Some(kind.to_string()),
            error: Some(error.to_string()),
        }
    }
}

/// Sends one control request and waits for the answer.
pub fn control_request(addr: &str, req: &ControlRequest) -> std::io::Result<ControlResponse> {
    let stream = TcpStream::connect(addr)?;
    let mut w = BufWriter::new(stream.try_clone()?);
    serde_json::to_writer(&mut w, req)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line)?;
    serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

struct State {
    mgr: Manager,
    sessions: BTreeMap<String, TcpStream>,
    log_file: Option<File>,
    log_written: usize,
}

impl State {
    fn deliver_outbox(&mut self) {
        for (pid, msg) in self.mgr.take_outbox() {
            if let Some(s) = self.sessions.get_mut(&pid) {
                if let Err(e) = write_frame(&mut *s, &msg) {
                    log::warn!("sending {} to {pid}: {e}", msg.type_name());
                }
            }
        }
    }

    fn flush_log(&mut self) {
        let records = &self.mgr.log().records()[self.log_written..];
        if let Some(f) = &mut self.log_file {
            for r in records {
                let res = serde_json::to_writer(&mut *f, r).map_err(std::io::Error::from).and_then(|_| f.write_all(b"\n"));
                if let Err(e) = res {
                    log::warn!("writing event log: {e}");
                    break;
                }
            }
            let _ = f.flush();
        }
        self.log_written = self.mgr.log().len();
    }

    fn step(&mut self) {
        let now = wall_clock();
        let events = self.mgr.pilots_mut().backends_mut().advance_all(now);
        if let Err(e) = self.mgr.on_backend_events(&events) {
            log::warn!("{e}");
        }
        if let Err(e) = self.mgr.tick(now) {
            log::warn!("{e}");
        }
        self.deliver_outbox();
        self.flush_log();
    }
}

struct Shared {
    state: Mutex<State>,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    grace: Duration,
}

impl Server {
    /// Binds the listener, builds the managers and starts serving.
    pub fn start(cfg: ServerConfig) -> Result<Server, ServerError> {
        let listener = TcpListener::bind(&cfg.listen).map_err(|source| ServerError::BindError {
            addr: cfg.listen.clone(),
            source,
        })?;
        let addr = listener.local_addr()?;
        let mut backends = BackendSet::new();
        for d in &cfg.dcrs {
            if d.middleware != Middleware::LocalExec {
                return Err(ServerError::Config(format!(
                    "DCR {} uses {:?}; only LocalExec DCRs can be served live",
                    d.dcr_id, d.middleware
                )));
            }
            let b = LocalExecBackend::new(d.clone(), &cfg.agent_path, addr.to_string(), cfg.sandbox_dir.join(&d.dcr_id))
                .map_err(|e| ServerError::Config(e.to_string()))?
                .with_grace(cfg.terminate_grace);
            backends.insert(Box::new(b));
        }
        let pm = PilotManager::new(backends, cfg.policy.clone(), PilotTimeouts::default())
            .map_err(|e| ServerError::Config(e.to_string()))?;
        let wm = WorkloadManager::new(cfg.dispatch);
        let log_file = match &cfg.event_log {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                mgr: Manager::new(pm, wm),
                sessions: BTreeMap::new(),
                log_file,
                log_written: 0,
            }),
            stop: AtomicBool::new(false),
        });

        let mut threads = Vec::new();
        let s = shared.clone();
        let tick = cfg.tick_interval;
        threads.push(thread::spawn(move || {
            while !s.stop.load(Ordering::SeqCst) {
                s.lock().step();
                thread::sleep(tick);
            }
        }));
        let s = shared.clone();
        threads.push(thread::spawn(move || {
            for conn in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let s = s.clone();
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(&s, stream) {
                                log::debug!("connection ended: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept: {e}"),
                }
            }
        }));
        Ok(Server {
            addr,
            shared,
            threads,
            grace: cfg.terminate_grace,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_stopping(&self) -> bool {
        self.shared.stop.load(Ordering::SeqCst)
    }

    /// Blocks until a Shutdown control request arrives or `stop` is called.
    pub fn wait(&self) {
        while !self.is_stopping() {
            thread::sleep(Duration::from_millis(50));
        }
    }

    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
    }

    /// Copy of the event log so far.
    pub fn event_log(&self) -> EventLog {
        self.shared.lock().mgr.log().clone()
    }

    /// Inspect the manager under the lock.
    pub fn with_manager<R>(&self, f: impl FnOnce(&Manager) -> R) -> R {
        f(&self.shared.lock().mgr)
    }

    /// Drains every pilot, waits up to the grace period for agents to
    /// leave, kills the rest and returns the final log.
    pub fn shutdown(mut self) -> EventLog {
        self.stop();
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        {
            let mut st = self.shared.lock();
            let now = wall_clock();
            let live: Vec<String> = st.mgr.pilots().live_pilots().map(|r| r.spec.pilot_id.clone()).collect();
            for pid in live {
                let (pm, _, log) = st.mgr.parts_mut();
                match pm.drain_pilot(&pid, now, log) {
                    Ok(Some(msg)) => {
                        if let Some(s) = st.sessions.get_mut(&pid) {
                            let _ = write_frame(&mut *s, &msg);
                        }
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("{e}"),
                }
            }
        }
        let deadline = Instant::now() + self.grace;
        loop {
            let mut st = self.shared.lock();
            st.step();
            if st.mgr.pilots().live_pilots().next().is_none() || Instant::now() >= deadline {
                let now = wall_clock();
                let live: Vec<String> = st.mgr.pilots().live_pilots().map(|r| r.spec.pilot_id.clone()).collect();
                for pid in live {
                    let _ = st.mgr.cancel_pilot(&pid, now);
                }
                st.flush_log();
                return st.mgr.log().clone();
            }
            drop(st);
            thread::sleep(Duration::from_millis(50));
        }
    }
}

fn serve_connection(shared: &Arc<Shared>, stream: TcpStream) -> Result<(), TransportError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut first = Vec::new();
    if reader.read_until(b'\n', &mut first)? == 0 {
        return Ok(());
    }
    if first.starts_with(b"{\"v\":") {
        serve_agent(shared, stream, reader, &first)
    } else {
        let response = match serde_json::from_slice::<ControlRequest>(&first) {
            Ok(req) => handle_control(shared, req),
            Err(e) => ControlResponse::err("BadRequest", e),
        };
        let mut w = BufWriter::new(stream);
        serde_json::to_writer(&mut w, &response).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn serve_agent(
    shared: &Arc<Shared>,
    stream: TcpStream,
    mut reader: BufReader<TcpStream>,
    first: &[u8],
) -> Result<(), TransportError> {
    let mut writer = stream.try_clone()?;
    let mut pilot_id: Option<String> = None;
    let mut next = Some(decode(first));
    while let Some(frame) = next.take() {
        match frame {
            Ok(msg) => handle_agent_frame(shared, &stream, &mut writer, &mut pilot_id, msg)?,
            Err(e) => log::warn!("bad frame from agent: {e}"),
        }
        next = match read_frame(&mut reader) {
            Ok(m) => m.map(Ok),
            Err(TransportError::Decode(e)) => Some(Err(e)),
            Err(e) => return Err(e),
        };
    }
    if let Some(pid) = pilot_id {
        shared.lock().sessions.remove(&pid);
    }
    Ok(())
}

fn handle_agent_frame(
    shared: &Arc<Shared>,
    stream: &TcpStream,
    writer: &mut TcpStream,
    pilot_id: &mut Option<String>,
    msg: Message,
) -> Result<(), TransportError> {
    let registering = match &msg {
        Message::Register(r) => Some(r.pilot_id.clone()),
        _ => None,
    };
    let mut st = shared.lock();
    let now = wall_clock();
    let replies = match st.mgr.handle_message(msg, now) {
        Ok(r) => r,
        Err(ManagerError::Pilot(e)) if registering.is_some() => {
            log::warn!("refusing agent: {e}");
            vec![Message::shutdown()]
        }
        Err(e) => {
            log::warn!("{e}");
            Vec::new()
        }
    };
    if let Some(pid) = registering {
        st.sessions.insert(pid.clone(), stream.try_clone()?);
        *pilot_id = Some(pid);
    }
    for r in &replies {
        write_frame(&mut *writer, r)?;
    }
    st.deliver_outbox();
    st.flush_log();
    Ok(())
}

fn handle_control(shared: &Arc<Shared>, req: ControlRequest) -> ControlResponse {
    let mut st = shared.lock();
    let now = wall_clock();
    let resp = match req {
        ControlRequest::SubmitPilot { spec } => match st.mgr.submit_pilot(spec, now) {
            Ok(id) => ControlResponse::ok(Some(id), None),
            Err(e) => ControlResponse::err(error_kind(&e), e),
        },
        ControlRequest::SubmitWorkload { spec } => match st.mgr.submit_workload(spec, now) {
            Ok(id) => ControlResponse::ok(Some(id), None),
            Err(e) => ControlResponse::err(error_kind(&e), e),
        },
        ControlRequest::Status { id } => match status_of(&st.mgr, &id) {
            Some(v) => ControlResponse::ok(Some(id), Some(v)),
            None => ControlResponse::err("UnknownEntity", format!("no pilot, task or workload named {id}")),
        },
        ControlRequest::Cancel { id } => {
            let m = &mut st.mgr;
            let res = if m.pilots().pilot(&id).is_some() {
                m.cancel_pilot(&id, now)
            } else if m.workloads().task(&id).is_some() {
                m.cancel_task(&id, now)
            } else if m.workloads().workload_status(&id).is_some() {
                m.cancel_workload(&id, now)
            } else {
                return ControlResponse::err("UnknownEntity", format!("no pilot, task or workload named {id}"));
            };
            match res {
                Ok(()) => ControlResponse::ok(Some(id), None),
                Err(e) => ControlResponse::err(error_kind(&e), e),
            }
        }
        ControlRequest::Shutdown => {
            shared.stop.store(true, Ordering::SeqCst);
            ControlResponse::ok(None, None)
        }
    };
    st.deliver_outbox();
    st.flush_log();
    resp
}

fn error_kind(e: &ManagerError) -> &'static str {
    use crate::pilot_manager::PilotError;
    use crate::workload_manager::DispatchError;
    match e {
        ManagerError::Model(_) => "InvalidSpec",
        ManagerError::Pilot(PilotError::UnknownPilot(_)) | ManagerError::Dispatch(DispatchError::UnknownTask(_)) => {
            "UnknownEntity"
        }
        ManagerError::Pilot(PilotError::AlreadyTerminal(_)) => "AlreadyTerminal",
        ManagerError::Pilot(PilotError::Dcr(_)) => "DcrError",
        ManagerError::Pilot(_) => "PilotError",
        ManagerError::Dispatch(_) => "DispatchError",
        ManagerError::UnexpectedMessage(_) => "ProtocolError",
    }
}

fn status_of(m: &Manager, id: &str) -> Option<Value> {
    if let Some(p) = m.pilots().pilot(id) {
        let busy = m.workloads().busy_cores(id);
        return Some(json!({
            "entity": "Pilot",
            "pilot_id": id,
            "status": p.status(),
            "entered": p.state.entered,
            "failure": p.state.failure,
            "job_id": p.job_id,
            "cores": p.spec.total_cores(),
            "busy_cores": busy,
        }));
    }
    if let Some(t) = m.workloads().task(id) {
        return Some(json!({
            "entity": "Task",
            "task_id": id,
            "workload_id": t.workload_id,
            "status": t.state.status,
            "attempt": t.state.attempt,
            "entered": t.state.entered,
            "pilot_id": t.pilot_id,
            "blocked": t.blocked,
            "reason": t.reason,
        }));
    }
    m.workloads().workload_status(id).map(|w| {
        let mut v = serde_json::to_value(&w).unwrap_or(Value::Null);
        v["entity"] = json!("Workload");
        v
    })
}
