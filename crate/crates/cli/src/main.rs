use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use pilotkit::harness::{format_comparison, run_scenario, Scenario};
use pilotkit::metrics::{format_table, ExecutionMode};
use pilotkit::pilot_manager::ProvisioningPolicy;
use pilotkit::server::{control_request, ControlRequest, ControlResponse, Server, ServerConfig};
use pilotkit::{DcrDescriptor, PilotSpec, WorkloadSpec};

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(name = "pilotkit", version, about = "Pilot-job manager and experiment runner")]
struct Cli {
    /// Manager configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Event log output (JSON lines).
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    /// Manager endpoint for client commands.
    #[arg(long, global = true, env = "PILOTKIT_MANAGER_ADDR", default_value = DEFAULT_ADDR)]
    addr: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pilot and workload managers until interrupted.
    ManagerRun,
    /// Submit a pilot description.
    SubmitPilot { file: PathBuf },
    /// Submit a workload description.
    SubmitWorkload { file: PathBuf },
    /// Show the state of a pilot, task or workload.
    Status { id: String },
    /// Cancel a pilot, task or workload.
    Cancel { id: String },
    /// Run a scenario directly and through pilots in the simulator.
    Experiment {
        scenario: PathBuf,
        /// Directory for the two report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Manager configuration. Relative paths resolve against the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    #[serde(default = "default_listen")]
    listen: String,
    dcrs: Vec<PathBuf>,
    #[serde(default)]
    event_log: Option<PathBuf>,
    #[serde(default)]
    policy: Option<PathBuf>,
    #[serde(default)]
    agent: Option<PathBuf>,
    #[serde(default)]
    sandbox: Option<PathBuf>,
}

fn default_listen() -> String {
    DEFAULT_ADDR.to_string()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid content", path.display()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_agent_path() -> Result<PathBuf> {
    let exe = std::env::current_exe().context("locating the pilotkit executable")?;
    Ok(exe.with_file_name(format!("pilotkit-agent{}", std::env::consts::EXE_SUFFIX)))
}

fn server_config(cli: &Cli) -> Result<ServerConfig> {
    let Some(path) = &cli.config else {
        bail!("manager-run needs --config PATH");
    };
    let cfg: CliConfig = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut dcrs = Vec::new();
    for d in &cfg.dcrs {
        let file = resolve(base, d);
        let dcr: DcrDescriptor = read_json(&file)?;
        dcr.validate().with_context(|| format!("{}: invalid DCR", file.display()))?;
        dcrs.push(dcr);
    }
    let agent = match &cfg.agent {
        Some(a) => resolve(base, a),
        None => default_agent_path()?,
    };
    let sandbox = cfg.sandbox.as_deref().map(|s| resolve(base, s)).unwrap_or_else(|| base.join("sandbox"));
    let mut sc = ServerConfig::new(cfg.listen, dcrs, agent, sandbox);
    if let Some(p) = &cfg.policy {
        let file = resolve(base, p);
        let policy: ProvisioningPolicy = read_json(&file)?;
        policy.validate().with_context(|| format!("{}: invalid policy", file.display()))?;
        sc.policy = policy;
    }
    sc.event_log = cli.log.clone().or_else(|| cfg.event_log.map(|p| resolve(base, &p)));
    Ok(sc)
}

fn manager_run(cli: &Cli) -> Result<()> {
    let cfg = server_config(cli)?;
    fs::create_dir_all(&cfg.sandbox_dir).with_context(|| format!("creating {}", cfg.sandbox_dir.display()))?;
    let server = Server::start(cfg)?;
    let interrupted = Arc::new(AtomicBool::new(false));
    let flag = interrupted.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    println!("ready {}", server.addr());
    while !interrupted.load(Ordering::SeqCst) && !server.is_stopping() {
        std::thread::sleep(Duration::from_millis(100));
    }
    log::info!("shutting down");
    let log = server.shutdown();
    log::info!("{} events recorded", log.len());
    Ok(())
}

fn request(cli: &Cli, req: ControlRequest) -> Result<ControlResponse> {
    let resp = control_request(&cli.addr, &req).with_context(|| format!("contacting manager at {}", cli.addr))?;
    if !resp.ok {
        bail!(
            "{}: {}",
            resp.kind.as_deref().unwrap_or("Error"),
            resp.error.as_deref().unwrap_or("request failed")
        );
    }
    Ok(resp)
}

fn experiment(cli: &Cli, path: &Path, out: &Path) -> Result<()> {
    let scenario: Scenario = read_json(path)?;
    let direct = run_scenario(&scenario, ExecutionMode::Direct)?;
    let pilot = run_scenario(&scenario, ExecutionMode::PilotLate)?;
    let mut reports = Vec::new();
    for (run, tag) in [(&direct, "direct"), (&pilot, "pilot")] {
        if !run.finished {
            bail!("{tag} run did not finish before the horizon ({}s)", scenario.horizon);
        }
        let mut report = run.report()?;
        if let Some(log) = &cli.log {
            let file = log.with_extension(format!("{tag}.jsonl"));
            fs::write(&file, run.log.to_jsonl()).with_context(|| format!("writing {}", file.display()))?;
            report.event_log = Some(file.display().to_string());
        }
        reports.push(report);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (report, tag) in reports.iter().zip(["direct", "pilot"]) {
        let file = out.join(format!("{}.{tag}.json", scenario.name));
        fs::write(&file, serde_json::to_vec_pretty(report)?).with_context(|| format!("writing {}", file.display()))?;
    }
    eprint!("{}", format_table(&reports));
    println!("{}", format_comparison(&reports[0], &reports[1]));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ManagerRun => manager_run(cli),
        Command::SubmitPilot { file } => {
            let spec: PilotSpec = read_json(file)?;
            let resp = request(cli, ControlRequest::SubmitPilot { spec })?;
            println!("{}", resp.id.unwrap_or_default());
            Ok(())
        }
        Command::SubmitWorkload { file } => {
            let spec: WorkloadSpec = read_json(file)?;
            let resp = request(cli, ControlRequest::SubmitWorkload { spec })?;
            println!("{}", resp.id.unwrap_or_default());
            Ok(())
        }
        Command::Status { id } => {
            let resp = request(cli, ControlRequest::Status { id: id.clone() })?;
            println!("{}", serde_json::to_string_pretty(&resp.status.unwrap_or_default())?);
            Ok(())
        }
        Command::Cancel { id } => {
            request(cli, ControlRequest::Cancel { id: id.clone() })?;
            println!("{id}");
            Ok(())
        }
        Command::Experiment { scenario, out } => experiment(cli, scenario, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
