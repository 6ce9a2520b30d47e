//! Post-hoc metrics over event logs: utilization, startup and cooldown
//! phases, completion rates, the startup breakdown, and the report that
//! collects them.
//!
//! Everything is computed from a [`Timeline`], which is itself an
//! [`EventSink`], so a log can be analysed while it streams past without
//! being held in memory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::NodePool;
use crate::events::{for_each_record, EntityKind, EventName, EventRecord, EventSink, LogError};
use crate::model::{TaskKind, TaskState};
use crate::par::{self, Execution};

/// Fraction of peak task concurrency that delimits startup and cooldown.
pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_BIN_S: f64 = 10.0;
/// A stall is a run of more than `STALL_BINS` bins below
/// `STALL_FRACTION` of the steady mean rate.
pub const STALL_BINS: usize = 3;
pub const STALL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty window [{0}, {1}]")]
    EmptyWindow(f64, f64),
    #[error("no capacity in window [{0}, {1}]")]
    NoCapacity(f64, f64),
    #[error("no task was executed")]
    NoTasks,
    #[error("missing events: {0}")]
    MissingEvents(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub threshold: f64,
    pub bin_s: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { threshold: DEFAULT_THRESHOLD, bin_s: DEFAULT_BIN_S }
    }
}

/// One executed task: its first `task_start` and first `task_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpan {
    pub start: f64,
    pub end: f64,
    pub cores: u32,
    pub gpus: u32,
    pub kind: Option<TaskKind>,
    pub state: Option<TaskState>,
    /// Index into [`Timeline::pilots`].
    pub pilot: usize,
}

impl TaskSpan {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PilotSpan {
    pub id: String,
    pub nodes: u64,
    pub cores: u64,
    pub gpus: u64,
    pub active: Option<f64>,
    pub bootstrap_end: Option<f64>,
    pub staging_end: Option<f64>,
    pub shutdown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct CoordMarks {
    pilot: usize,
    start: Option<f64>,
    ready: Option<f64>,
    preprocess_end: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Open {
    start: f64,
    cores: u32,
    gpus: u32,
    kind: Option<TaskKind>,
    pilot: usize,
}

/// Busy and available resources over `[t, next point)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPoint {
    pub t: OrderedTime,
    pub tasks: u64,
    pub cores_busy: u64,
    pub gpus_busy: u64,
    pub cores_available: u64,
    pub gpus_available: u64,
}

/// `f64` seconds that compare by bits, so step points can derive `Eq`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedTime(pub f64);

impl Eq for OrderedTime {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundaries {
    pub t_startup_end: f64,
    pub t_cooldown_start: f64,
    pub peak: u64,
    pub threshold: f64,
}

/// Completions per hour in `[t, t + bin_s)`, `t` relative to the first
/// pilot becoming active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBin {
    pub t: f64,
    pub total: f64,
    pub function: f64,
    pub executable: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    /// Relative to the first pilot becoming active, like [`RateBin::t`].
    pub t_start: f64,
    pub t_end: f64,
    pub bins: usize,
}

/// Where the time to the first task went, for the earliest pilot and its
/// first coordinator.
///
/// `coordinator_wait` (pilot active to coordinator start) covers bootstrap
/// and staging, which run concurrently. The chain `coordinator_wait`,
/// `coordinator_startup`, `preprocessing`, `launch_gap`,
/// `first_task_latency` adds up to `t_first_task`. `worker_launch_spread`
/// overlaps `first_task_latency`: tasks start as soon as the first worker
/// is up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupBreakdown {
    pub pilot: String,
    pub bootstrap: f64,
    pub staging: f64,
    pub coordinator_wait: f64,
    pub coordinator_startup: f64,
    pub preprocessing: f64,
    pub launch_gap: f64,
    pub worker_launch_spread: f64,
    pub first_task_latency: f64,
    pub t_first_task: f64,
}

impl StartupBreakdown {
    pub fn sequential_sum(&self) -> f64 {
        self.coordinator_wait + self.coordinator_startup + self.preprocessing + self.launch_gap + self.first_task_latency
    }

    pub fn labeled(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("pilot bootstrap", self.bootstrap),
            ("staging", self.staging),
            ("coordinator wait", self.coordinator_wait),
            ("coordinator startup", self.coordinator_startup),
            ("input pre-processing", self.preprocessing),
            ("launch gap", self.launch_gap),
            ("worker launch", self.worker_launch_spread),
            ("first-task latency", self.first_task_latency),
        ]
    }
}

/// Task bookkeeping and pilot/coordinator/worker milestones extracted from
/// a log.
#[derive(Debug, Default)]
pub struct Timeline {
    spans: Vec<TaskSpan>,
    pilots: Vec<PilotSpan>,
    pilot_index: HashMap<String, usize>,
    coords: Vec<CoordMarks>,
    coord_index: HashMap<String, usize>,
    worker_starts: Vec<(f64, usize)>,
    open: HashMap<Box<str>, Open>,
    closed: HashSet<Box<str>>,
    end_states: BTreeMap<String, u64>,
    t_last: Option<f64>,
}

impl EventSink for Timeline {
    fn record(&mut self, e: EventRecord) {
        self.observe(&e);
    }
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Self {
        let mut tl = Timeline::new();
        for e in records {
            tl.observe(e);
        }
        tl
    }

    pub fn from_log(path: &Path) -> Result<Self, MetricsError> {
        let mut tl = Timeline::new();
        for_each_record(path, |e| tl.observe(&e))?;
        Ok(tl)
    }

    pub fn spans(&self) -> &[TaskSpan] {
        &self.spans
    }

    pub fn pilots(&self) -> &[PilotSpan] {
        &self.pilots
    }

    /// Terminal states of every task that ended, started or not.
    pub fn end_states(&self) -> &BTreeMap<String, u64> {
        &self.end_states
    }

    /// Tasks that started but never ended.
    pub fn unfinished(&self) -> usize {
        self.open.len()
    }

    fn pilot_slot(&mut self, id: &str) -> usize {
        if let Some(&i) = self.pilot_index.get(id) {
            return i;
        }
        self.pilots.push(PilotSpan { id: id.to_string(), ..PilotSpan::default() });
        self.pilot_index.insert(id.to_string(), self.pilots.len() - 1);
        self.pilots.len() - 1
    }

    fn coord_slot(&mut self, id: &str, pilot: usize) -> usize {
        if let Some(&i) = self.coord_index.get(id) {
            return i;
        }
        self.coords.push(CoordMarks { pilot, start: None, ready: None, preprocess_end: None });
        self.coord_index.insert(id.to_string(), self.coords.len() - 1);
        self.coords.len() - 1
    }

    pub fn observe(&mut self, e: &EventRecord) {
        let t = e.t;
        self.t_last = Some(self.t_last.map_or(t, |l| l.max(t)));
        match (e.entity_kind, &e.event) {
            (EntityKind::Pilot, ev) => {
                let i = self.pilot_slot(&e.entity_id);
                let p = &mut self.pilots[i];
                match ev {
                    EventName::PilotActive => {
                        p.active.get_or_insert(t);
                        p.nodes = e.get_parsed("nodes").unwrap_or(0);
                        p.cores = e.get_parsed("cores").unwrap_or(0);
                        p.gpus = e.get_parsed("gpus").unwrap_or(0);
                    }
                    EventName::BootstrapEnd => {
                        p.bootstrap_end.get_or_insert(t);
                    }
                    EventName::StagingEnd => {
                        p.staging_end.get_or_insert(t);
                    }
                    EventName::Shutdown => {
                        p.shutdown.get_or_insert(t);
                    }
                    _ => {}
                }
            }
            (EntityKind::Coordinator, ev @ (EventName::CoordStart | EventName::CoordReady | EventName::PreprocessEnd)) => {
                let pilot = self.pilot_slot(e.get("pilot").unwrap_or(""));
                let i = self.coord_slot(&e.entity_id, pilot);
                let c = &mut self.coords[i];
                let slot = match ev {
                    EventName::CoordStart => &mut c.start,
                    EventName::CoordReady => &mut c.ready,
                    _ => &mut c.preprocess_end,
                };
                slot.get_or_insert(t);
            }
            (EntityKind::Worker, EventName::WorkerStart) => {
                let pilot = self.pilot_slot(e.get("pilot").unwrap_or(""));
                self.worker_starts.push((t, pilot));
            }
            (EntityKind::Task, EventName::TaskStart) => {
                let uid = e.entity_id.as_str();
                if self.closed.contains(uid) || self.open.contains_key(uid) {
                    return;
                }
                let pilot = self.pilot_slot(e.get("pilot").unwrap_or(""));
                let open = Open {
                    start: t,
                    cores: e.get_parsed("cores").unwrap_or(1),
                    gpus: e.get_parsed("gpus").unwrap_or(0),
                    kind: e.get_parsed("kind"),
                    pilot,
                };
                self.open.insert(uid.into(), open);
            }
            (EntityKind::Task, EventName::TaskEnd) => {
                let uid = e.entity_id.as_str();
                if self.closed.contains(uid) {
                    return;
                }
                let state = e.get("state").unwrap_or("");
                *self.end_states.entry(state.to_string()).or_default() += 1;
                match self.open.remove_entry(uid) {
                    Some((key, o)) => {
                        self.spans.push(TaskSpan {
                            start: o.start,
                            end: t,
                            cores: o.cores,
                            gpus: o.gpus,
                            kind: o.kind,
                            state: state.parse().ok(),
                            pilot: o.pilot,
                        });
                        self.closed.insert(key);
                    }
                    None => {
                        self.closed.insert(uid.into());
                    }
                }
            }
            _ => {}
        }
    }

    /// First pilot activation.
    pub fn t_available(&self) -> Option<f64> {
        self.pilots.iter().filter_map(|p| p.active).min_by(f64::total_cmp)
    }

    /// Last pilot shutdown. A pilot that never shut down counts until the
    /// last event of the log.
    pub fn t_end(&self) -> Option<f64> {
        let last = self.t_last?;
        self.pilots.iter().filter(|p| p.active.is_some()).map(|p| p.shutdown.unwrap_or(last)).max_by(f64::total_cmp)
    }

    fn pilot_window(&self, p: &PilotSpan) -> Option<(f64, f64)> {
        let a = p.active?;
        Some((a, p.shutdown.unwrap_or(self.t_last.unwrap_or(a))))
    }

    /// Busy over available core-seconds in `[w0, w1]`, where available
    /// cores are those of the pilots active at each instant. The second
    /// value is the GPU equivalent when any pilot has GPUs.
    pub fn utilization(&self, w0: f64, w1: f64) -> Result<(f64, Option<f64>), MetricsError> {
        if !(w1 > w0) {
            return Err(MetricsError::EmptyWindow(w0, w1));
        }
        let (mut cap_cores, mut cap_gpus) = (0.0, 0.0);
        for p in &self.pilots {
            if let Some((a, b)) = self.pilot_window(p) {
                let o = overlap(a, b, w0, w1);
                cap_cores += p.cores as f64 * o;
                cap_gpus += p.gpus as f64 * o;
            }
        }
        if cap_cores <= 0.0 {
            return Err(MetricsError::NoCapacity(w0, w1));
        }
        let (busy_cores, busy_gpus) = self.busy(w0, w1);
        let gpus = (cap_gpus > 0.0).then(|| busy_gpus / cap_gpus);
        Ok((busy_cores / cap_cores, gpus))
    }

    /// Busy core-seconds and GPU-seconds inside `[w0, w1]`.
    pub fn busy(&self, w0: f64, w1: f64) -> (f64, f64) {
        let (mut cores, mut gpus) = (0.0, 0.0);
        for s in &self.spans {
            let o = overlap(s.start, s.end, w0, w1);
            cores += s.cores as f64 * o;
            gpus += s.gpus as f64 * o;
        }
        (cores, gpus)
    }

    /// The combined step function of running tasks, busy and available
    /// resources. Intervals are half-open, so a task ending at `t` and
    /// another starting at `t` never overlap.
    pub fn concurrency(&self) -> Vec<StepPoint> {
        // (t, tasks, cores, gpus, cap cores, cap gpus)
        let mut edges: Vec<(f64, i64, i64, i64, i64, i64)> = Vec::with_capacity(self.spans.len() * 2 + self.pilots.len() * 2);
        for s in &self.spans {
            let (c, g) = (s.cores as i64, s.gpus as i64);
            edges.push((s.start, 1, c, g, 0, 0));
            edges.push((s.end, -1, -c, -g, 0, 0));
        }
        for p in &self.pilots {
            if let Some((a, b)) = self.pilot_window(p) {
                let (c, g) = (p.cores as i64, p.gpus as i64);
                edges.push((a, 0, 0, 0, c, g));
                edges.push((b, 0, 0, 0, -c, -g));
            }
        }
        edges.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out: Vec<StepPoint> = Vec::new();
        let mut level = [0i64; 5];
        let mut i = 0;
        while i < edges.len() {
            let t = edges[i].0;
            while i < edges.len() && edges[i].0 == t {
                let e = edges[i];
                for (l, d) in level.iter_mut().zip([e.1, e.2, e.3, e.4, e.5]) {
                    *l += d;
                }
                i += 1;
            }
            let [tasks, cores_busy, gpus_busy, cores_available, gpus_available] = level.map(|v| v.max(0) as u64);
            out.push(StepPoint { t: OrderedTime(t), tasks, cores_busy, gpus_busy, cores_available, gpus_available });
        }
        out
    }

    /// End of startup and start of cooldown: the first and last instants at
    /// which the number of running tasks is at least `threshold` × peak.
    pub fn phase_boundaries(&self, threshold: f64) -> Result<PhaseBoundaries, MetricsError> {
        if self.spans.is_empty() {
            return Err(MetricsError::NoTasks);
        }
        let first = self.spans.iter().map(|s| s.start).min_by(f64::total_cmp).unwrap();
        let last = self.spans.iter().map(|s| s.end).max_by(f64::total_cmp).unwrap();
        let steps = self.concurrency();
        let peak = steps.iter().map(|p| p.tasks).max().unwrap_or(0);
        let full = PhaseBoundaries { t_startup_end: first, t_cooldown_start: last, peak, threshold };
        if peak <= 1 {
            return Ok(full);
        }
        let level = threshold * peak as f64;
        let above = |p: &StepPoint| p.tasks as f64 >= level;
        let (Some(a), Some(b)) = (steps.iter().position(above), steps.iter().rposition(above)) else {
            return Ok(full);
        };
        Ok(PhaseBoundaries { t_startup_end: steps[a].t.0, t_cooldown_start: steps[b + 1].t.0, peak, threshold })
    }

    fn rate_origin(&self) -> Option<f64> {
        self.t_available().or_else(|| self.spans.iter().map(|s| s.start).min_by(f64::total_cmp))
    }

    /// Completions per hour in consecutive bins from the first pilot
    /// activation to the last completion.
    pub fn rate_series(&self, bin_s: f64) -> Vec<RateBin> {
        assert!(bin_s > 0.0, "bin width must be positive");
        let Some(t0) = self.rate_origin() else {
            return Vec::new();
        };
        let last = self.spans.iter().map(|s| s.end).max_by(f64::total_cmp).unwrap_or(t0);
        let n_bins = ((last - t0) / bin_s).floor().max(0.0) as usize + 1;
        let mut counts = vec![[0u64; 3]; n_bins];
        for s in &self.spans {
            let b = (((s.end - t0) / bin_s).floor().max(0.0) as usize).min(n_bins - 1);
            counts[b][0] += 1;
            match s.kind {
                Some(TaskKind::Function) => counts[b][1] += 1,
                Some(TaskKind::Executable) => counts[b][2] += 1,
                None => {}
            }
        }
        let per_hour = |c: u64| c as f64 * 3600.0 / bin_s;
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| RateBin { t: i as f64 * bin_s, total: per_hour(c[0]), function: per_hour(c[1]), executable: per_hour(c[2]) })
            .collect()
    }

    /// Mean completion rate per hour over first start to last end,
    /// optionally for one kind only.
    pub fn mean_rate(&self, kind: Option<TaskKind>) -> Option<f64> {
        let mut n = 0u64;
        let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in self.spans.iter().filter(|s| kind.is_none() || s.kind == kind) {
            n += 1;
            a = a.min(s.start);
            b = b.max(s.end);
        }
        (n > 0 && b > a).then(|| n as f64 / (b - a) * 3600.0)
    }

    /// Runs of more than [`STALL_BINS`] bins inside the steady window whose
    /// rate is below [`STALL_FRACTION`] of the steady mean.
    pub fn stalls(&self, bins: &[RateBin], bin_s: f64, phases: &PhaseBoundaries) -> Vec<Stall> {
        let Some(t0) = self.rate_origin() else {
            return Vec::new();
        };
        let (lo, hi) = (phases.t_startup_end - t0, phases.t_cooldown_start - t0);
        let steady: Vec<&RateBin> = bins.iter().filter(|b| b.t >= lo && b.t + bin_s <= hi).collect();
        if steady.is_empty() {
            return Vec::new();
        }
        let mean = steady.iter().map(|b| b.total).sum::<f64>() / steady.len() as f64;
        let mut out = Vec::new();
        let mut run: Vec<&RateBin> = Vec::new();
        for b in
            steady.iter().copied().chain(std::iter::once(&RateBin { t: f64::NAN, total: f64::INFINITY, function: 0.0, executable: 0.0 }))
        {
            let contiguous = run.last().is_none_or(|p| p.t + bin_s == b.t);
            if b.total < STALL_FRACTION * mean && contiguous {
                run.push(b);
                continue;
            }
            if run.len() > STALL_BINS {
                out.push(Stall { t_start: run[0].t, t_end: run[run.len() - 1].t + bin_s, bins: run.len() });
            }
            run.clear();
            if b.total < STALL_FRACTION * mean {
                run.push(b);
            }
        }
        out
    }

    pub fn startup_breakdown(&self) -> Result<StartupBreakdown, MetricsError> {
        let missing = |what: &str| MetricsError::MissingEvents(what.to_string());
        let (pi, p) = self
            .pilots
            .iter()
            .enumerate()
            .filter(|(_, p)| p.active.is_some())
            .min_by(|a, b| a.1.active.unwrap().total_cmp(&b.1.active.unwrap()))
            .ok_or_else(|| missing("pilot_active"))?;
        let active = p.active.unwrap();
        let coord = self
            .coords
            .iter()
            .filter(|c| c.pilot == pi && c.start.is_some())
            .min_by(|a, b| a.start.unwrap().total_cmp(&b.start.unwrap()))
            .ok_or_else(|| missing("coord_start"))?;
        let coord_start = coord.start.unwrap();
        let ready = coord.ready.ok_or_else(|| missing("coord_ready"))?;
        let pre = coord.preprocess_end.unwrap_or(ready);
        let workers = self.worker_starts.iter().filter(|w| w.1 == pi).map(|w| w.0);
        let (w_first, w_last) = workers.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
        if !w_first.is_finite() {
            return Err(missing("worker_start"));
        }
        let first_task = self
            .spans
            .iter()
            .filter(|s| s.pilot == pi)
            .map(|s| s.start)
            .chain(self.open.values().filter(|o| o.pilot == pi).map(|o| o.start))
            .min_by(f64::total_cmp)
            .ok_or_else(|| missing("task_start"))?;
        Ok(StartupBreakdown {
            pilot: p.id.clone(),
            bootstrap: p.bootstrap_end.map_or(0.0, |t| t - active),
            staging: p.staging_end.map_or(0.0, |t| t - active),
            coordinator_wait: coord_start - active,
            coordinator_startup: ready - coord_start,
            preprocessing: pre - ready,
            launch_gap: w_first - pre,
            worker_launch_spread: w_last - w_first,
            first_task_latency: first_task - w_first,
            t_first_task: first_task - active,
        })
    }

    /// Task durations in `n_bins` equal bins from 0 to the longest task:
    /// `(lo, hi, function, executable)`.
    pub fn duration_histogram(&self, n_bins: usize) -> Vec<(f64, f64, u64, u64)> {
        let n_bins = n_bins.max(1);
        let max = self.spans.iter().map(TaskSpan::duration).fold(0.0, f64::max);
        let width = if max > 0.0 { max / n_bins as f64 } else { 1.0 };
        let mut out: Vec<(f64, f64, u64, u64)> = (0..n_bins).map(|i| (i as f64 * width, (i + 1) as f64 * width, 0, 0)).collect();
        for s in &self.spans {
            let b = ((s.duration() / width).floor().max(0.0) as usize).min(n_bins - 1);
            match s.kind {
                Some(TaskKind::Executable) => out[b].3 += 1,
                _ => out[b].2 += 1,
            }
        }
        out
    }

    pub fn report(&self, opts: &AnalysisOptions) -> Result<UtilizationReport, MetricsError> {
        if self.spans.is_empty() {
            return Err(MetricsError::NoTasks);
        }
        let t_available = self.t_available().ok_or_else(|| MetricsError::MissingEvents("pilot_active".into()))?;
        let t_end = self.t_end().unwrap();
        let (avg, gpu_avg) = self.utilization(t_available, t_end)?;
        let phases = self.phase_boundaries(opts.threshold)?;
        let (steady, gpu_steady) = match self.utilization(phases.t_startup_end, phases.t_cooldown_start) {
            Ok(u) => u,
            Err(MetricsError::EmptyWindow(..)) => (avg, gpu_avg),
            Err(e) => return Err(e),
        };
        let first_start = self.spans.iter().map(|s| s.start).min_by(f64::total_cmp).unwrap();
        let durations = self.spans.iter().map(TaskSpan::duration);
        let task_time_max = durations.clone().fold(f64::NEG_INFINITY, f64::max);
        let task_time_mean = durations.sum::<f64>() / self.spans.len() as f64;
        let bins = self.rate_series(opts.bin_s);
        let rate_max = bins.iter().map(|b| b.total).fold(0.0, f64::max);
        let count = |s: &str| self.end_states.get(s).copied().unwrap_or(0);
        Ok(UtilizationReport {
            nodes: self.pilots.iter().map(|p| p.nodes).sum(),
            pilots: self.pilots.iter().filter(|p| p.active.is_some()).count(),
            tasks: self.spans.len() as u64,
            tasks_done: count(TaskState::Done.as_str()),
            tasks_failed: count(TaskState::Failed.as_str()),
            tasks_canceled: count(TaskState::Canceled.as_str()),
            t_available,
            t_end,
            t_startup: phases.t_startup_end - t_available,
            t_cooldown: t_end - phases.t_cooldown_start,
            t_first_task: first_start - t_available,
            t_startup_end: phases.t_startup_end,
            t_cooldown_start: phases.t_cooldown_start,
            peak_concurrency: phases.peak,
            avg,
            steady,
            gpu_avg,
            gpu_steady: gpu_avg.and(gpu_steady),
            task_time_max,
            task_time_mean,
            rate_max,
            rate_mean: self.mean_rate(None).unwrap_or(0.0),
            rate_mean_function: self.mean_rate(Some(TaskKind::Function)),
            rate_mean_executable: self.mean_rate(Some(TaskKind::Executable)),
            threshold: opts.threshold,
            bin_s: opts.bin_s,
            stalls: self.stalls(&bins, opts.bin_s, &phases),
            startup_breakdown: self.startup_breakdown().ok(),
        })
    }
}

fn overlap(a: f64, b: f64, w0: f64, w1: f64) -> f64 {
    (b.min(w1) - a.max(w0)).max(0.0)
}

/// The measured quantities of one run. Times are seconds, rates are
/// completions per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub nodes: u64,
    pub pilots: usize,
    /// Tasks that started and ended.
    pub tasks: u64,
    pub tasks_done: u64,
    pub tasks_failed: u64,
    pub tasks_canceled: u64,
    pub t_available: f64,
    pub t_end: f64,
    pub t_startup: f64,
    pub t_cooldown: f64,
    pub t_first_task: f64,
    pub t_startup_end: f64,
    pub t_cooldown_start: f64,
    pub peak_concurrency: u64,
    pub avg: f64,
    pub steady: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_steady: Option<f64>,
    pub task_time_max: f64,
    pub task_time_mean: f64,
    pub rate_max: f64,
    pub rate_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_mean_function: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_mean_executable: Option<f64>,
    pub threshold: f64,
    pub bin_s: f64,
    pub stalls: Vec<Stall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub startup_breakdown: Option<StartupBreakdown>,
}

impl fmt::Display for UtilizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>6} {:>10} {:>11} {:>12} {:>8} {:>8} {:>13} {:>13} {:>14} {:>14}",
            "Nodes", "Pilots", "Tasks", "Startup[s]", "1stTask[s]", "Util", "Util", "TaskTime[s]", "TaskTime[s]", "Rate[/h]", "Rate[/h]"
        )?;
        writeln!(
            f,
            "{:>8} {:>6} {:>10} {:>11} {:>12} {:>8} {:>8} {:>13} {:>13} {:>14} {:>14}",
            "", "", "", "", "", "avg", "steady", "max", "mean", "max", "mean"
        )?;
        writeln!(
            f,
            "{:>8} {:>6} {:>10} {:>11.1} {:>12.1} {:>7.1}% {:>7.1}% {:>13.1} {:>13.1} {:>14.0} {:>14.0}",
            self.nodes,
            self.pilots,
            self.tasks,
            self.t_startup,
            self.t_first_task,
            self.avg * 100.0,
            self.steady * 100.0,
            self.task_time_max,
            self.task_time_mean,
            self.rate_max,
            self.rate_mean
        )?;
        if let (Some(a), Some(s)) = (self.gpu_avg, self.gpu_steady) {
            writeln!(f, "gpu utilization: avg {:.1}% steady {:.1}%", a * 100.0, s * 100.0)?;
        }
        writeln!(
            f,
            "done {} failed {} canceled {}; cooldown {:.1}s; peak concurrency {} (threshold {})",
            self.tasks_done, self.tasks_failed, self.tasks_canceled, self.t_cooldown, self.peak_concurrency, self.threshold
        )?;
        for s in &self.stalls {
            writeln!(f, "stall: {:.0}s to {:.0}s ({} bins of {}s)", s.t_start, s.t_end, s.bins, self.bin_s)?;
        }
        if let Some(b) = &self.startup_breakdown {
            writeln!(f, "startup breakdown ({}):", b.pilot)?;
            for (label, v) in b.labeled() {
                writeln!(f, "  {label:<22} {v:>10.3}")?;
            }
            writeln!(f, "  {:<22} {:>10.3}", "first task at", b.t_first_task)?;
        }
        Ok(())
    }
}

/// Fraction of `pool`'s cores busy over `window`.
pub fn utilization(events: &[EventRecord], pool: &NodePool, window: (f64, f64)) -> Result<f64, MetricsError> {
    let (w0, w1) = window;
    if !(w1 > w0) {
        return Err(MetricsError::EmptyWindow(w0, w1));
    }
    let cores = pool.total_cores();
    if cores == 0 {
        return Err(MetricsError::NoCapacity(w0, w1));
    }
    let (busy, _) = Timeline::from_records(events).busy(w0, w1);
    Ok(busy / (cores as f64 * (w1 - w0)))
}

pub fn phase_boundaries(events: &[EventRecord], threshold: f64) -> Result<PhaseBoundaries, MetricsError> {
    Timeline::from_records(events).phase_boundaries(threshold)
}

pub fn rate_series(events: &[EventRecord], bin_s: f64) -> Vec<RateBin> {
    Timeline::from_records(events).rate_series(bin_s)
}

pub fn startup_breakdown(events: &[EventRecord]) -> Result<StartupBreakdown, MetricsError> {
    Timeline::from_records(events).startup_breakdown()
}

pub fn analyze_log(path: &Path, opts: &AnalysisOptions) -> Result<UtilizationReport, MetricsError> {
    Timeline::from_log(path)?.report(opts)
}

/// Analyses independent logs, one per item.
pub fn analyze_logs(paths: &[PathBuf], opts: &AnalysisOptions, exec: Execution) -> Vec<Result<UtilizationReport, MetricsError>> {
    par::map(exec, paths.iter().collect(), |p| analyze_log(p, opts))
}
