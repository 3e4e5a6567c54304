//! Pilot agent launched inside a pilot job. Configuration comes from the
//! PILOTKIT_* environment variables set by the launcher.

use std::process::ExitCode;

use pilotkit::agent::runtime::{run, AgentError, RuntimeConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match RuntimeConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pilotkit-agent: {e}");
            return ExitCode::from(2);
        }
    };
    log::info!("agent {} starting with {} cores", cfg.pilot_id, cfg.agent.cores);
    match run(cfg) {
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(e @ AgentError::ConnectFailure { .. }) => {
            eprintln!("pilotkit-agent: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("pilotkit-agent: {e}");
            ExitCode::FAILURE
        }
    }
}
