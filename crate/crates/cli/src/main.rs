mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::RunConfigFile;
use dctwin_api::{ApiState, router};
use dctwin_core::formats::{load_topology, load_workload};
use dctwin_core::orchestrator::{OrchestratorError, RunSummary, Twin, TwinConfig};
use dctwin_core::telemetry::{synthesize_ground_truth, GroundTruthProfile};
use dctwin_core::workspace::{report_body, Workspace};

#[derive(Parser)]
#[command(name = "dc-twin", version, about = "Self-calibrating datacenter digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the twin over a workload and telemetry source.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// realtime | fixed:<factor> | max
        #[arg(long)]
        acceleration: Option<String>,
        #[arg(long)]
        no_calibration: bool,
        /// Seconds of simulated time to run.
        #[arg(long)]
        horizon: Option<i64>,
        /// Serve the HTTP API during the run and keep serving afterwards.
        #[arg(long)]
        serve: bool,
    },
    /// Run twice at maximum speed and check the reports are byte-identical.
    ReplayCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic trace and a matching run config.
    Synth {
        /// steady | drift | underutilized | large
        #[arg(long)]
        profile: String,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Failure classes mapped to process exit codes.
enum Failure {
    Config(anyhow::Error),
    Source(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Source(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Source(e) | Failure::Other(e) => e,
        }
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            e if e.is_config() => Failure::Config(e.into()),
            e @ OrchestratorError::Telemetry(_) => Failure::Source(e.into()),
            e => Failure::Other(e.into()),
        }
    }
}

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

struct Prepared {
    file: RunConfigFile,
    config: TwinConfig,
    workload: Vec<dctwin_core::WorkloadTask>,
}

fn prepare(
    path: &Path,
    acceleration: Option<&str>,
    no_calibration: bool,
    horizon: Option<i64>,
) -> Result<Prepared, Failure> {
    let mut file = RunConfigFile::load(path).map_err(|e| config_failure(anyhow::anyhow!(e)))?;
    if let Some(a) = acceleration {
        file.acceleration = a.to_string();
    }
    if no_calibration {
        file.calibration.enabled = false;
    }
    if horizon.is_some() {
        file.horizon_s = horizon;
    }
    let topology = load_topology(&file.topology, file.initial_r).map_err(config_failure)?;
    let workload = load_workload(&file.workload).map_err(config_failure)?;
    let config = file
        .twin_config(topology)
        .map_err(|e| config_failure(anyhow::anyhow!(e)))?;
    config.validate()?;
    Ok(Prepared {
        file,
        config,
        workload,
    })
}

fn run(
    path: &Path,
    acceleration: Option<&str>,
    no_calibration: bool,
    horizon: Option<i64>,
    serve: bool,
) -> Result<(), Failure> {
    let Prepared {
        file,
        config,
        workload,
    } = prepare(path, acceleration, no_calibration, horizon)?;
    let twin = Twin::new(config)?;

    let server = if serve {
        let addr = dctwin_api::listen_addr(file.api.addr.as_deref())
            .context("invalid API listen address")
            .map_err(Failure::Config)?;
        let workspace = Workspace::create(&file.workspace)
            .context("cannot create workspace")
            .map_err(Failure::Other)?;
        let mut state = ApiState::new(workspace);
        if file.api.control {
            state = state.with_control(twin.control());
        }
        let app = router(state).layer(dctwin_api::cors(&file.api.cors_origins));
        let runtime = tokio::runtime::Runtime::new()
            .context("cannot start async runtime")
            .map_err(Failure::Other)?;
        let handle = runtime.spawn(dctwin_api::serve(addr, app));
        Some((runtime, handle))
    } else {
        None
    };

    let summary: RunSummary = twin.run(&file.source(), workload, |report| {
        log::info!(
            "window {} committed: mape={:?} r={} stalled={}",
            report.window.index,
            report.mape_percent,
            report.params_used.r,
            report.stalled
        );
    })?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );

    if let Some((runtime, handle)) = server {
        eprintln!("run finished; API still serving (Ctrl-C to stop)");
        runtime
            .block_on(handle)
            .context("API server task failed")
            .map_err(Failure::Other)?
            .context("API server failed")
            .map_err(Failure::Other)?;
    }
    Ok(())
}

fn replay_check(path: &Path) -> Result<(), Failure> {
    let scratch = tempfile::tempdir()
        .context("cannot create scratch directory")
        .map_err(Failure::Other)?;
    let mut bodies = Vec::new();
    for attempt in 0..2 {
        let Prepared {
            file,
            mut config,
            workload,
        } = prepare(path, Some("max"), false, None)?;
        config.workspace = scratch.path().join(format!("run-{attempt}"));
        let twin = Twin::new(config)?;
        let mut run_bodies = Vec::new();
        twin.run(&file.source(), workload, |r| run_bodies.push(report_body(r)))?;
        bodies.push(run_bodies);
    }
    let (a, b) = (&bodies[0], &bodies[1]);
    if a.len() != b.len() {
        return Err(Failure::Other(anyhow::anyhow!(
            "runs produced {} and {} windows",
            a.len(),
            b.len()
        )));
    }
    if let Some(k) = a.iter().zip(b).position(|(x, y)| x != y) {
        return Err(Failure::Other(anyhow::anyhow!("window {k} differs between runs")));
    }
    println!("replay-check ok: {} windows byte-identical", a.len());
    Ok(())
}

fn synth(profile: &str, days: u32, out: &Path, seed: u64) -> Result<(), Failure> {
    let profile = GroundTruthProfile::named(profile).ok_or_else(|| {
        config_failure(anyhow::anyhow!(
            "unknown profile {profile:?}; expected one of {:?}",
            GroundTruthProfile::NAMES
        ))
    })?;
    if days == 0 {
        return Err(config_failure(anyhow::anyhow!("--days must be positive")));
    }
    let horizon = i64::from(days) * 86_400;
    let trace = synthesize_ground_truth(&profile, horizon, seed).map_err(config_failure)?;
    trace
        .write(&profile.topology, out)
        .context("cannot write trace")
        .map_err(Failure::Other)?;
    let mut config = RunConfigFile::new("topology.json", "workload.csv", "telemetry.jsonl", "workspace");
    config.horizon_s = Some(horizon);
    config.sampling_granularity_s = profile.sampling_granularity;
    let json = serde_json::to_string_pretty(&config).expect("config serializes");
    std::fs::write(out.join("config.json"), json)
        .context("cannot write config.json")
        .map_err(Failure::Other)?;
    println!(
        "wrote {} tasks and {} samples to {}",
        trace.tasks.len(),
        trace.telemetry.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            acceleration,
            no_calibration,
            horizon,
            serve,
        } => run(config, acceleration.as_deref(), *no_calibration, *horizon, *serve),
        Command::ReplayCheck { config } => replay_check(config),
        Command::Synth {
            profile,
            days,
            out,
            seed,
        } => synth(profile, *days, out, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
