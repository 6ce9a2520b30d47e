//! `pilotfarm`: run experiments and analyse their event logs.
//!
//! Exit status is 0 on success, 2 for configuration errors and 3 when a
//! run or an analysis fails.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pilotfarm_core::events::merge_files;
use pilotfarm_core::experiment::{emit_plots, report_json, run_experiment, ExperimentConfig, ExperimentError, EVENTS_LOG};
use pilotfarm_core::metrics::{analyze_log, AnalysisOptions, DEFAULT_BIN_S, DEFAULT_THRESHOLD};
use pilotfarm_core::model::Backend;
use pilotfarm_core::worker::{run_remote_worker, WorkerExit, WorkerSpec};

#[derive(Parser)]
#[command(name = "pilotfarm", version, about = "Pilot-based many-task execution on a local host or in simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its log, report and plot data.
    Run(RunArgs),
    /// Print the utilization report of an event log or run directory.
    Analyze(AnalyzeArgs),
    /// Rebuild the plot data files of a run directory.
    PlotData {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BIN_S)]
        bin_s: f64,
    },
    /// Check an experiment file without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge event logs into one, ordered by time then entity.
    Merge {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Worker process started by a local coordinator.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backend: Option<Backend>,
    /// Workload seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "RAPTOR_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Event log, or a run directory containing one.
    path: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_BIN_S)]
    bin_s: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: SocketAddr,
    #[arg(long)]
    worker_id: String,
    #[arg(long)]
    node_id: String,
    #[arg(long)]
    pilot_id: String,
    #[arg(long)]
    cores: u32,
    #[arg(long, default_value_t = 0)]
    gpus: u32,
    #[arg(long, default_value_t = 0)]
    prefetch: u32,
    #[arg(long)]
    events: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::PlotData { dir, bin_s } => emit_plots(&dir, bin_s).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::ValidateConfig { config } => validate(&config),
        Command::Merge { output, inputs } => {
            let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            merge_files(&inputs, &output).map(|n| println!("{n} records")).map_err(ExperimentError::from)
        }
        Command::Worker(a) => return worker(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pilotfarm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(a: RunArgs) -> Result<(), ExperimentError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    if let Some(s) = a.seed {
        cfg.workload.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.report);
    println!("artifacts in {} ({:.1}s)", outcome.out_dir.display(), outcome.wall_s);
    if !outcome.summary.clean {
        let bad: Vec<&str> = outcome.summary.pilots.iter().filter(|p| !p.clean()).map(|p| p.pilot_id.as_str()).collect();
        return Err(ExperimentError::Runtime(format!("pilots did not finish cleanly: {}", bad.join(", "))));
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), ExperimentError> {
    let log = if a.path.is_dir() { a.path.join(EVENTS_LOG) } else { a.path };
    if !log.is_file() {
        return Err(ExperimentError::MissingArtifacts(log));
    }
    let report = analyze_log(&log, &AnalysisOptions { threshold: a.threshold, bin_s: a.bin_s })?;
    if a.json {
        print!("{}", report_json(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn validate(path: &Path) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let workers: usize = cfg.pilots.iter().flat_map(|p| &p.coordinators).map(|c| c.n_workers).sum();
    let nodes: usize = cfg.pilots.iter().map(|p| p.n_nodes).sum();
    println!("ok: {} pilots, {nodes} nodes, {workers} workers, {} tasks, backend {}", cfg.pilots.len(), cfg.workload.n_tasks, cfg.backend);
    Ok(())
}

fn worker(a: WorkerArgs) -> ExitCode {
    let spec = WorkerSpec {
        worker_id: a.worker_id,
        node_id: a.node_id,
        pilot_id: a.pilot_id,
        core_slots: a.cores,
        gpu_slots: a.gpus,
        prefetch: a.prefetch,
    };
    match run_remote_worker(spec, a.connect, &a.events) {
        Ok(WorkerExit::Shutdown) => ExitCode::SUCCESS,
        Ok(WorkerExit::ConnectionLost) => ExitCode::from(3),
        Err(e) => {
            eprintln!("pilotfarm worker: {e}");
            ExitCode::from(3)
        }
    }
}
