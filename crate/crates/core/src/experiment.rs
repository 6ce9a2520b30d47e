//! Experiment files and the driver that runs them: generate the workload,
//! bring up pilots on the chosen backend, collect the event log and write
//! the report and plot data next to it.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LocalAdapter, NodePool};
use crate::coordinator::local::{Coordinator, CoordinatorError, LocalPilot, WorkerLaunch};
use crate::coordinator::{stride_split, DispatchPolicy, JoinSummary};
use crate::events::{merge, merge_sorted_files, read_log, write_log, LogError, LogWriter, MemoryLog, SharedSink, Tee, WallClock};
use crate::metrics::{AnalysisOptions, MetricsError, Timeline, UtilizationReport};
use crate::model::{Backend, PilotDescription, TaskDescription};
use crate::par::Execution;
use crate::scheduler::SlotMap;
use crate::sim::{simulate_pilot, SimSettings};
use crate::worker::FunctionRegistry;
use crate::workload::{generate, WorkloadSpec};

pub const EVENTS_LOG: &str = "events.log";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const DURATIONS_TSV: &str = "durations.tsv";
pub const CONCURRENCY_TSV: &str = "concurrency.tsv";
pub const RATE_TSV: &str = "rate.tsv";
/// Main program; worker processes are started as `pilotfarm worker ...`.
pub const PROGRAM: &str = "pilotfarm";
pub const DURATION_BINS: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    /// Workers are threads of the driver process.
    #[default]
    Threads,
    /// Each worker is a child process.
    Processes,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Backend for every pilot; overrides the pilots' own `backend` field.
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Cores the local backend may hand out. Defaults to the host's CPUs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_cores: Option<u64>,
    #[serde(default)]
    pub worker_launch: LaunchMode,
    #[serde(default)]
    pub policy: DispatchPolicy,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    pub workload: WorkloadSpec,
    pub pilots: Vec<PilotDescription>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifacts(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for everything that went wrong while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn config_err(e: impl ToString) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn new(workload: WorkloadSpec, pilots: Vec<PilotDescription>, backend: Backend) -> Self {
        ExperimentConfig {
            name: default_name(),
            backend,
            out_dir: default_out(),
            host_cores: None,
            worker_launch: LaunchMode::Threads,
            policy: DispatchPolicy::CreditPull,
            sim: SimSettings::default(),
            analysis: AnalysisOptions::default(),
            workload,
            pilots,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Referential and capacity checks that need no backend.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.pilots.is_empty() {
            return Err(config_err("no pilots"));
        }
        self.workload.validate().map_err(config_err)?;
        let mut ids = HashSet::new();
        for p in &self.pilots {
            p.validate().map_err(|e| config_err(format!("pilot {}: {e}", p.pilot_id)))?;
            if !ids.insert(p.pilot_id.as_str()) {
                return Err(config_err(format!("duplicate pilot id {}", p.pilot_id)));
            }
            if p.coordinators.is_empty() {
                return Err(config_err(format!("pilot {} has no coordinators", p.pilot_id)));
            }
            check_fit(p)?;
            for (k, c) in p.coordinators.iter().enumerate() {
                if self.workload.cores_per_task > c.cpn || self.workload.gpus_per_task > c.gpn {
                    return Err(config_err(format!(
                        "pilot {} coordinator {k}: tasks need {} cores / {} gpus, workers have {} / {}",
                        p.pilot_id, self.workload.cores_per_task, self.workload.gpus_per_task, c.cpn, c.gpn
                    )));
                }
            }
        }
        let a = &self.analysis;
        if !(a.threshold > 0.0 && a.threshold <= 1.0) {
            return Err(config_err(format!("analysis.threshold {} outside (0, 1]", a.threshold)));
        }
        if !(a.bin_s.is_finite() && a.bin_s > 0.0) {
            return Err(config_err("analysis.bin_s must be positive"));
        }
        let d = &self.sim.delays;
        let times = [self.sim.latency_s, d.bootstrap_s, d.staging_s, d.coordinator_s, d.preprocess_s, d.worker_launch_s];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(config_err("sim latency and delays must be finite and >= 0"));
        }
        if self.backend == Backend::Local {
            let need: u64 = self.pilots.iter().map(PilotDescription::total_cores).sum();
            if let Some(host) = self.host_cores {
                if need > host {
                    return Err(config_err(format!("pilots need {need} cores but host_cores is {host}")));
                }
            }
        }
        Ok(())
    }

    fn effective_pilots(&self) -> Vec<PilotDescription> {
        self.pilots.iter().map(|p| PilotDescription { backend: self.backend, ..p.clone() }).collect()
    }
}

/// Places coordinators and workers on an empty pool in the order the
/// backends do, so a configuration that passes here never fails placement.
fn check_fit(p: &PilotDescription) -> Result<(), ExperimentError> {
    let mut slots = SlotMap::for_pool(&NodePool::from_description(p, 0.0));
    for (k, c) in p.coordinators.iter().enumerate() {
        let id = format!("{}.c{k}", p.pilot_id);
        if c.coordinator_cores > 0 {
            slots.place(&id, c.coordinator_cores, 0, 0.0).map_err(|e| config_err(format!("coordinator {id}: {e}")))?;
        }
        for i in 0..c.n_workers {
            slots
                .place(&format!("{id}.w{i:04}"), c.cpn, c.gpn, 0.0)
                .map_err(|e| config_err(format!("worker {i} of coordinator {id}: {e}")))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub pilot_id: String,
    pub summary: JoinSummary,
    pub rejected: usize,
    pub walltime_hit: bool,
    pub slot_violations: u64,
}

impl PilotSummary {
    /// Every task was accepted and reached a terminal state, none of them
    /// canceled.
    pub fn clean(&self) -> bool {
        let s = &self.summary;
        self.rejected == 0 && !self.walltime_hit && self.slot_violations == 0 && s.finished() == s.submitted && s.canceled == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub backend: Backend,
    pub pilots: Vec<PilotSummary>,
    pub clean: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub report: UtilizationReport,
    pub out_dir: PathBuf,
    pub wall_s: f64,
}

/// Finds a program shipped with this one: next to the running executable
/// or one level up (test binaries live in `deps/`). Falls back to the bare
/// name for a `PATH` lookup.
pub fn resolve_program(name: &str) -> PathBuf {
    if name.contains(std::path::MAIN_SEPARATOR) {
        return PathBuf::from(name);
    }
    if let Ok(exe) = std::env::current_exe() {
        for dir in exe.ancestors().skip(1).take(2) {
            let candidate = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
            if candidate.is_file() {
                return candidate;
            }
        }
    }
    PathBuf::from(name)
}

/// Runs `cfg` and writes into `cfg.out_dir`:
///
/// | file | content |
/// |---|---|
/// | `config.toml` | the configuration as run |
/// | `events.log` | merged event log |
/// | `summary.json` | per-pilot task counts |
/// | `report.json`, `report.txt` | the utilization report |
/// | `durations.tsv`, `concurrency.tsv`, `rate.tsv` | plot data, see [`emit_plots`] |
///
/// A simulated run uses one thread throughout; pilots are simulated one
/// after the other.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_TOML), cfg.to_toml())?;

    let mut spec = cfg.workload.clone();
    if cfg.backend == Backend::Local {
        spec.sleeper = resolve_program(&spec.sleeper).display().to_string();
    }
    let tasks = generate(&spec, Execution::Sequential).map_err(config_err)?;
    let (pilots, timeline) = match cfg.backend {
        Backend::Sim => run_sim(cfg, tasks, &out)?,
        Backend::Local => run_local(cfg, tasks, &out)?,
    };
    let summary = RunSummary { name: cfg.name.clone(), backend: cfg.backend, clean: pilots.iter().all(PilotSummary::clean), pilots };
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    let report = timeline.report(&cfg.analysis)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    fs::write(out.join(REPORT_TXT), report.to_string())?;
    write_plots(&timeline, &out, cfg.analysis.bin_s)?;
    Ok(RunOutcome { summary, report, out_dir: out, wall_s: started.elapsed().as_secs_f64() })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// The report as written to `report.json`.
pub fn report_json(report: &UtilizationReport) -> Result<String, ExperimentError> {
    to_json(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

fn run_sim(cfg: &ExperimentConfig, tasks: Vec<TaskDescription>, out: &Path) -> Result<(Vec<PilotSummary>, Timeline), ExperimentError> {
    let pilots = cfg.effective_pilots();
    let settings = SimSettings { policy: cfg.policy, ..cfg.sim.clone() };
    let mut timeline = Timeline::new();
    let mut summaries = Vec::with_capacity(pilots.len());
    let events = out.join(EVENTS_LOG);
    let parts_dir = out.join("parts");
    let single = pilots.len() == 1;
    let mut parts = Vec::new();
    if !single {
        fs::create_dir_all(&parts_dir)?;
    }
    for (p, share) in pilots.iter().zip(stride_split(tasks, pilots.len())) {
        let path = if single { events.clone() } else { parts_dir.join(format!("{}.log", p.pilot_id)) };
        let mut log = LogWriter::create(&path)?;
        let outcome =
            simulate_pilot(p, share, &settings, &mut Tee(&mut log, &mut timeline)).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        log.finish()?;
        parts.push(path);
        summaries.push(PilotSummary {
            pilot_id: outcome.pilot_id,
            summary: outcome.summary,
            rejected: outcome.rejected,
            walltime_hit: outcome.walltime_hit,
            slot_violations: outcome.slot_violations,
        });
    }
    if !single {
        merge_sorted_files(&parts, &events)?;
        fs::remove_dir_all(&parts_dir)?;
    }
    Ok((summaries, timeline))
}

struct RunningPilot {
    pilot: Arc<LocalPilot>,
    coords: Vec<Coordinator>,
    rejected: usize,
}

fn run_local(cfg: &ExperimentConfig, tasks: Vec<TaskDescription>, out: &Path) -> Result<(Vec<PilotSummary>, Timeline), ExperimentError> {
    let mut adapter = cfg.host_cores.map_or_else(LocalAdapter::for_host, LocalAdapter::new);
    let memory = MemoryLog::new();
    let sink = SharedSink::new(memory.clone());
    let clock = WallClock::new();
    let worker_logs = out.join("worker-logs");
    let launch = match cfg.worker_launch {
        LaunchMode::Threads => WorkerLaunch::Threads(Arc::new(FunctionRegistry::builtin())),
        LaunchMode::Processes => {
            if worker_logs.exists() {
                fs::remove_dir_all(&worker_logs)?;
            }
            fs::create_dir_all(&worker_logs)?;
            WorkerLaunch::Processes { program: resolve_program(PROGRAM), log_dir: worker_logs.clone() }
        }
    };

    let pilots = cfg.effective_pilots();
    let mut running: Vec<RunningPilot> = Vec::with_capacity(pilots.len());
    let started = (|| {
        for (p, share) in pilots.iter().zip(stride_split(tasks, pilots.len())) {
            let pilot = LocalPilot::start(p, &mut adapter, sink.clone(), clock).map_err(|e| match e {
                BackendError::Capacity { .. } | BackendError::Invalid(_) => config_err(e),
                other => ExperimentError::Runtime(other.to_string()),
            })?;
            let mut run = RunningPilot { pilot: Arc::clone(&pilot), coords: Vec::new(), rejected: 0 };
            for (k, c) in p.coordinators.iter().enumerate() {
                let id = format!("{}.c{k}", p.pilot_id);
                let coord = Coordinator::start_with_policy(id, c.clone(), &pilot, launch.clone(), cfg.policy);
                match coord {
                    Ok(c) => run.coords.push(c),
                    Err(e) => {
                        running.push(run);
                        return Err(match e {
                            CoordinatorError::Config(_) | CoordinatorError::Placement { .. } => config_err(e),
                            other => ExperimentError::Runtime(other.to_string()),
                        });
                    }
                }
            }
            for (c, part) in run.coords.iter().zip(stride_split(share, p.coordinators.len())) {
                run.rejected += c.submit(part).rejected.len();
            }
            running.push(run);
        }
        Ok(())
    })();

    let mut summaries = Vec::with_capacity(running.len());
    for mut run in running {
        let mut total = JoinSummary::default();
        for c in &mut run.coords {
            c.join();
            c.stop();
            total.add(&c.summary());
        }
        let walltime_hit = clock.now() >= run.pilot.deadline();
        drop(run.coords);
        run.pilot.finish();
        summaries.push(PilotSummary {
            pilot_id: run.pilot.description().pilot_id.clone(),
            summary: total,
            rejected: run.rejected,
            walltime_hit,
            slot_violations: 0,
        });
    }
    started?;

    let mut logs = vec![memory.snapshot()];
    if worker_logs.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&worker_logs)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        files.sort();
        for f in files {
            logs.push(read_log(&f).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", f.display())))?);
        }
    }
    let merged = merge(logs);
    write_log(&out.join(EVENTS_LOG), &merged)?;
    Ok((summaries, Timeline::from_records(&merged)))
}

/// Rebuilds the plot data files of a finished run from its event log.
///
/// Column layout, tab separated, one header row:
///
/// * `durations.tsv`: `duration_lo duration_hi function executable`, task
///   counts in equal-width duration bins.
/// * `concurrency.tsv`: `t tasks cores_busy gpus_busy cores_available`,
///   a step function holding from each `t` to the next.
/// * `rate.tsv`: `t_bin total function executable`, completions per hour.
///
/// Times are seconds since the first pilot became active.
pub fn emit_plots(dir: &Path, bin_s: f64) -> Result<[PathBuf; 3], ExperimentError> {
    let log = dir.join(EVENTS_LOG);
    if !log.is_file() {
        return Err(ExperimentError::MissingArtifacts(log));
    }
    let timeline = Timeline::from_log(&log)?;
    write_plots(&timeline, dir, bin_s)
}

fn write_plots(tl: &Timeline, dir: &Path, bin_s: f64) -> Result<[PathBuf; 3], ExperimentError> {
    let t0 = tl.t_available().unwrap_or(0.0);
    let paths = [dir.join(DURATIONS_TSV), dir.join(CONCURRENCY_TSV), dir.join(RATE_TSV)];

    let mut w = io::BufWriter::new(fs::File::create(&paths[0])?);
    writeln!(w, "duration_lo\tduration_hi\tfunction\texecutable")?;
    for (lo, hi, f, e) in tl.duration_histogram(DURATION_BINS) {
        writeln!(w, "{lo}\t{hi}\t{f}\t{e}")?;
    }
    w.flush()?;

    let mut w = io::BufWriter::new(fs::File::create(&paths[1])?);
    writeln!(w, "t\ttasks\tcores_busy\tgpus_busy\tcores_available")?;
    for p in tl.concurrency() {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", p.t.0 - t0, p.tasks, p.cores_busy, p.gpus_busy, p.cores_available)?;
    }
    w.flush()?;

    let mut w = io::BufWriter::new(fs::File::create(&paths[2])?);
    writeln!(w, "t_bin\ttotal\tfunction\texecutable")?;
    for b in tl.rate_series(bin_s) {
        writeln!(w, "{}\t{}\t{}\t{}", b.t, b.total, b.function, b.executable)?;
    }
    w.flush()?;
    Ok(paths)
}

/// Reads a report written by [`run_experiment`].
pub fn load_report(dir: &Path) -> Result<UtilizationReport, ExperimentError> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|_| ExperimentError::MissingArtifacts(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))
}
