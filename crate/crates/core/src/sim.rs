//! Discrete-event simulation of whole pilots. Coordinators and workers run
//! the same [`CoordinatorCore`] and [`WorkerCore`] logic as the local
//! backend; payloads are not executed, a task simply ends after its
//! synthetic duration. Message delivery takes a fixed latency.
//!
//! One pilot is simulated on one thread. Pilots never share resources, so a
//! multi-pilot run simulates them independently (optionally in parallel) and
//! interleaves their logs by time afterwards.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{NodePool, SimAdapter, SimClock};
use crate::coordinator::{stride_split, CoordinatorCore, DispatchPolicy, JoinSummary};
use crate::events::{EntityKind, EventName, EventRecord, EventSink};
use crate::model::{PilotDescription, TaskDescription, TaskState, ValidationError};
use crate::par::{self, Execution};
use crate::protocol::{Body, Message};
use crate::scheduler::{SchedulerError, SlotMap};
use crate::worker::{ExecOutcome, StartOrder, WorkerCore, WorkerSpec, TIMEOUT_TEXT};

/// Fixed durations of the startup phases, in simulated seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartupDelays {
    /// Pilot bootstrap, from activation.
    pub bootstrap_s: f64,
    /// Staging to node-local storage, concurrent with bootstrap.
    pub staging_s: f64,
    /// Coordinator process startup.
    pub coordinator_s: f64,
    /// Input pre-processing inside each coordinator.
    pub preprocess_s: f64,
    /// Spread between the first and the last worker launch of a coordinator.
    pub worker_launch_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// One-way message latency between coordinator and worker.
    pub latency_s: f64,
    pub delays: StartupDelays,
    /// Set by the caller; experiment files choose it at the top level.
    #[serde(skip)]
    pub policy: DispatchPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotOutcome {
    pub pilot_id: String,
    pub summary: JoinSummary,
    pub rejected: usize,
    pub n_workers: usize,
    pub t_active: f64,
    pub t_end: f64,
    pub walltime_hit: bool,
    /// Number of times a worker was found running more cores or GPUs than
    /// it holds. Always zero unless the slot accounting is broken.
    pub slot_violations: u64,
    pub events: u64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("pilot {pilot}: cannot place {what}: {source}")]
    Placement { pilot: String, what: String, source: SchedulerError },
    #[error("pilot {0} has no coordinators")]
    NoCoordinators(String),
    #[error("pilot {pilot}: inconsistent slot map: {reason}")]
    Slots { pilot: String, reason: String },
}

enum Ev {
    PilotActive,
    BootstrapEnd,
    StagingEnd,
    CoordStart,
    CoordReady(usize),
    PreprocessEnd(usize),
    WorkerLaunch(usize),
    ToCoord(usize, Message),
    ToWorker(usize, Message),
    TaskEnd { worker: usize, uid: String, state: TaskState, timed_out: bool },
    Flush(usize),
    Walltime,
}

struct SimWorker {
    spec: WorkerSpec,
    core: WorkerCore,
    coord: usize,
    flush_pending: bool,
    stopped: bool,
}

struct Counting<'a> {
    inner: &'a mut dyn EventSink,
    n: u64,
}

impl EventSink for Counting<'_> {
    fn record(&mut self, e: EventRecord) {
        self.n += 1;
        self.inner.record(e);
    }
}

struct PilotSim<'a> {
    desc: &'a PilotDescription,
    settings: &'a SimSettings,
    pool: NodePool,
    clock: SimClock<Ev>,
    sink: Counting<'a>,
    slots: SlotMap,
    coords: Vec<CoordinatorCore>,
    inputs: Vec<Vec<TaskDescription>>,
    submitted: Vec<bool>,
    workers: Vec<SimWorker>,
    worker_index: HashMap<String, usize>,
    alive: usize,
    stopping: bool,
    finished: bool,
    walltime_hit: bool,
    t_end: f64,
    rejected: usize,
    slot_violations: u64,
}

/// Simulates one pilot executing `tasks`, which are split across its
/// coordinators by stride. Events go to `sink` in simulated-time order.
pub fn simulate_pilot(
    desc: &PilotDescription,
    tasks: Vec<TaskDescription>,
    settings: &SimSettings,
    sink: &mut dyn EventSink,
) -> Result<PilotOutcome, SimError> {
    desc.validate()?;
    if desc.coordinators.is_empty() {
        return Err(SimError::NoCoordinators(desc.pilot_id.clone()));
    }
    for c in &desc.coordinators {
        c.validate()?;
    }
    let pool = SimAdapter::acquire(desc).map_err(|e| ValidationError::new("pilot", e.to_string()))?;
    let k = desc.coordinators.len();
    let mut sim = PilotSim {
        desc,
        settings,
        slots: SlotMap::for_pool(&pool),
        pool,
        clock: SimClock::new(),
        sink: Counting { inner: sink, n: 0 },
        coords: Vec::with_capacity(k),
        inputs: stride_split(tasks, k),
        submitted: vec![false; k],
        workers: Vec::new(),
        worker_index: HashMap::new(),
        alive: 0,
        stopping: false,
        finished: false,
        walltime_hit: false,
        t_end: desc.available_at_s,
        rejected: 0,
        slot_violations: 0,
    };
    sim.clock.schedule_at(desc.available_at_s, Ev::PilotActive);
    while let Some((t, ev)) = sim.clock.pop() {
        sim.handle(t, ev)?;
        if sim.finished {
            break;
        }
    }
    let mut summary = JoinSummary::default();
    for c in &sim.coords {
        summary.add(&c.summary());
    }
    Ok(PilotOutcome {
        pilot_id: desc.pilot_id.clone(),
        summary,
        rejected: sim.rejected,
        n_workers: sim.workers.len(),
        t_active: desc.available_at_s,
        t_end: sim.t_end,
        walltime_hit: sim.walltime_hit,
        slot_violations: sim.slot_violations,
        events: sim.sink.n,
    })
}

/// Simulates several pilots. The workload is split across pilots by
/// stride; each pilot gets its own sink from `make_sink`.
pub fn simulate_pilots<S, F>(
    pilots: &[PilotDescription],
    tasks: Vec<TaskDescription>,
    settings: &SimSettings,
    exec: Execution,
    make_sink: F,
) -> Result<Vec<(PilotOutcome, S)>, SimError>
where
    S: EventSink + Send,
    F: Fn(usize) -> S + Sync + Send,
{
    if pilots.is_empty() {
        return Ok(Vec::new());
    }
    let parts: Vec<(usize, Vec<TaskDescription>)> = stride_split(tasks, pilots.len()).into_iter().enumerate().collect();
    par::map(exec, parts, |(i, part)| {
        let mut sink = make_sink(i);
        simulate_pilot(&pilots[i], part, settings, &mut sink).map(|o| (o, sink))
    })
    .into_iter()
    .collect()
}

impl PilotSim<'_> {
    fn pilot_id(&self) -> &str {
        &self.desc.pilot_id
    }

    fn emit(&mut self, e: EventRecord) {
        self.sink.record(e);
    }

    fn latency(&self) -> f64 {
        self.settings.latency_s
    }

    fn handle(&mut self, now: f64, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::PilotActive => self.on_active(now),
            Ev::BootstrapEnd => {
                let e = EventRecord::new(now, EntityKind::Pilot, self.pilot_id(), EventName::BootstrapEnd);
                self.emit(e);
            }
            Ev::StagingEnd => {
                let e = EventRecord::new(now, EntityKind::Pilot, self.pilot_id(), EventName::StagingEnd);
                self.emit(e);
            }
            Ev::CoordStart => self.on_coord_start(now)?,
            Ev::CoordReady(k) => {
                let e = self.coord_event(now, k, EventName::CoordReady);
                self.emit(e);
                self.clock.schedule_at(now + self.settings.delays.preprocess_s, Ev::PreprocessEnd(k));
            }
            Ev::PreprocessEnd(k) => self.on_preprocess_end(now, k),
            Ev::WorkerLaunch(w) => {
                let m = self.workers[w].core.register_message();
                let c = self.workers[w].coord;
                self.clock.schedule_at(now + self.latency(), Ev::ToCoord(c, m));
            }
            Ev::ToCoord(k, m) => self.on_coord_message(now, k, m),
            Ev::ToWorker(w, m) => self.on_worker_message(now, w, m),
            Ev::TaskEnd { worker, uid, state, timed_out } => self.on_task_end(now, worker, uid, state, timed_out),
            Ev::Flush(w) => {
                self.workers[w].flush_pending = false;
                self.flush(now, w);
            }
            Ev::Walltime => self.on_walltime(now),
        }
        Ok(())
    }

    fn coord_event(&self, t: f64, k: usize, name: EventName) -> EventRecord {
        EventRecord::new(t, EntityKind::Coordinator, self.coords[k].id(), name).attr("pilot", self.pilot_id())
    }

    fn on_active(&mut self, now: f64) {
        let d = self.desc;
        let e = EventRecord::new(now, EntityKind::Pilot, d.pilot_id.as_str(), EventName::PilotActive)
            .attr("nodes", d.n_nodes)
            .attr("cpn", d.cores_per_node)
            .attr("gpn", d.gpus_per_node)
            .attr("cores", d.total_cores())
            .attr("gpus", d.total_gpus())
            .attr("backend", "sim");
        self.emit(e);
        let delays = self.settings.delays;
        self.clock.schedule_at(now + delays.bootstrap_s, Ev::BootstrapEnd);
        self.clock.schedule_at(now + delays.staging_s, Ev::StagingEnd);
        self.clock.schedule_at(now + delays.bootstrap_s.max(delays.staging_s), Ev::CoordStart);
        self.clock.schedule_at(self.pool.t_deadline, Ev::Walltime);
    }

    fn on_coord_start(&mut self, now: f64) -> Result<(), SimError> {
        let pilot = self.desc.pilot_id.clone();
        for (k, cfg) in self.desc.coordinators.iter().enumerate() {
            let id = format!("{pilot}.c{k}");
            let core = CoordinatorCore::new(id.clone(), pilot.clone(), cfg.clone()).with_policy(self.settings.policy);
            self.coords.push(core);
            let e = self.coord_event(now, k, EventName::CoordStart);
            self.emit(e);
            if cfg.coordinator_cores > 0 {
                self.place(now, EntityKind::Coordinator, &id, cfg.coordinator_cores, 0)?;
            }
            for i in 0..cfg.n_workers {
                let worker_id = format!("{id}.w{i:04}");
                let node = self.place(now, EntityKind::Worker, &worker_id, cfg.cpn, cfg.gpn)?;
                let spec = WorkerSpec {
                    worker_id: worker_id.clone(),
                    node_id: self.pool.nodes[node].name.clone(),
                    pilot_id: pilot.clone(),
                    core_slots: cfg.cpn,
                    gpu_slots: cfg.gpn,
                    prefetch: cfg.prefetch,
                };
                self.worker_index.insert(worker_id, self.workers.len());
                self.workers.push(SimWorker { core: WorkerCore::new(spec.shape()), spec, coord: k, flush_pending: false, stopped: false });
            }
            self.clock.schedule_at(now + self.settings.delays.coordinator_s, Ev::CoordReady(k));
        }
        self.alive = self.workers.len();
        self.slots.check_consistency().map_err(|reason| SimError::Slots { pilot, reason })
    }

    fn place(&mut self, now: f64, kind: EntityKind, uid: &str, cores: u32, gpus: u32) -> Result<usize, SimError> {
        let p = self.slots.place(uid, cores, gpus, now).map_err(|source| SimError::Placement {
            pilot: self.desc.pilot_id.clone(),
            what: uid.to_string(),
            source,
        })?;
        let e = EventRecord::new(now, kind, uid, EventName::Place)
            .attr("node", &self.pool.nodes[p.node_id].name)
            .attr("cores", cores)
            .attr("gpus", gpus);
        self.emit(e);
        Ok(p.node_id)
    }

    fn on_preprocess_end(&mut self, now: f64, k: usize) {
        let e = self.coord_event(now, k, EventName::PreprocessEnd);
        self.emit(e);
        let tasks = std::mem::take(&mut self.inputs[k]);
        let out = self.coords[k].submit(tasks, now, &mut self.sink);
        self.rejected += out.rejected.len();
        self.submitted[k] = true;
        let members: Vec<usize> = (0..self.workers.len()).filter(|&w| self.workers[w].coord == k).collect();
        let spread = self.settings.delays.worker_launch_s;
        let n = members.len();
        for (j, w) in members.into_iter().enumerate() {
            let offset = if n > 1 { spread * j as f64 / (n - 1) as f64 } else { 0.0 };
            self.clock.schedule_at(now + offset, Ev::WorkerLaunch(w));
        }
        self.dispatch(now, k);
        self.maybe_stop(now);
    }

    fn dispatch(&mut self, now: f64, k: usize) {
        if self.stopping {
            return;
        }
        loop {
            let sent = self.coords[k].dispatch_step(now, &mut self.sink);
            if sent.is_empty() {
                break;
            }
            for (worker_id, m) in sent {
                let w = self.worker_index[&worker_id];
                self.clock.schedule_at(now + self.latency(), Ev::ToWorker(w, m));
            }
        }
    }

    fn on_coord_message(&mut self, now: f64, k: usize, m: Message) {
        let sender = m.sender_id;
        match m.body {
            Body::Register(reg) => {
                let ack = self.coords[k].on_register(&reg);
                let w = self.worker_index[&reg.worker_id];
                self.clock.schedule_at(now + self.latency(), Ev::ToWorker(w, ack));
                self.dispatch(now, k);
            }
            Body::Credit(c) => {
                self.coords[k].on_credit(&sender, c);
                self.dispatch(now, k);
            }
            Body::ResultBulk(bulk) => {
                self.coords[k].on_results(&sender, bulk.results);
                self.maybe_stop(now);
            }
            _ => {}
        }
    }

    fn on_worker_message(&mut self, now: f64, w: usize, m: Message) {
        match m.body {
            Body::RegisterAck(_) => {
                let e = self.workers[w].spec.start_event(now);
                self.emit(e);
                self.send_credit(now, w);
            }
            Body::TaskBulk(bulk) => {
                if self.workers[w].core.is_draining() {
                    for t in &bulk.tasks {
                        let e = self.workers[w].spec.task_end_event(now, &t.uid, TaskState::Canceled, Some("worker draining"));
                        self.emit(e);
                    }
                }
                let starts = self.workers[w].core.accept_bulk(bulk.tasks, now);
                self.start(now, w, starts);
                self.flush(now, w);
            }
            Body::Drain => self.worker_drain(now, w),
            Body::Shutdown => self.worker_shutdown(now, w),
            _ => {}
        }
    }

    fn send_credit(&mut self, now: f64, w: usize) {
        if let Some(m) = self.workers[w].core.credit_update() {
            let c = self.workers[w].coord;
            self.clock.schedule_at(now + self.latency(), Ev::ToCoord(c, m));
        }
    }

    fn start(&mut self, now: f64, w: usize, starts: Vec<StartOrder>) {
        for StartOrder { task, .. } in starts {
            let e = self.workers[w].spec.task_start_event(now, &task);
            self.emit(e);
            let duration = task.synthetic_duration().unwrap_or(0.0).max(0.0);
            let (end, state, timed_out) = match task.timeout_s {
                Some(limit) if duration > limit => (now + limit, TaskState::Failed, true),
                _ => (now + duration, TaskState::Done, false),
            };
            self.clock.schedule_at(end, Ev::TaskEnd { worker: w, uid: task.uid, state, timed_out });
        }
        let sw = &self.workers[w];
        if sw.core.busy_cores() > sw.spec.core_slots || sw.core.free_cores() > sw.spec.core_slots {
            self.slot_violations += 1;
        }
    }

    fn on_task_end(&mut self, now: f64, w: usize, uid: String, state: TaskState, timed_out: bool) {
        let Some(start) = self.workers[w].core.start_time(&uid) else { return };
        let error = timed_out.then_some(TIMEOUT_TEXT);
        let e = self.workers[w].spec.task_end_event(now, &uid, state, error);
        self.emit(e);
        let outcome = ExecOutcome { state, exit_code: None, value: None, error_text: error.map(str::to_string), start, end: now };
        let starts = self.workers[w].core.complete(&uid, outcome, now);
        self.start(now, w, starts);
        self.send_credit(now, w);
        self.flush(now, w);
    }

    fn flush(&mut self, now: f64, w: usize) {
        while self.workers[w].core.should_flush(now) {
            let Some(m) = self.workers[w].core.take_results() else { break };
            let c = self.workers[w].coord;
            self.clock.schedule_at(now + self.latency(), Ev::ToCoord(c, m));
        }
        let sw = &mut self.workers[w];
        if !sw.flush_pending {
            if let Some(due) = sw.core.flush_due() {
                sw.flush_pending = true;
                self.clock.schedule_at(due, Ev::Flush(w));
            }
        }
    }

    fn worker_drain(&mut self, now: f64, w: usize) {
        if self.workers[w].core.is_draining() {
            return;
        }
        let canceled = self.workers[w].core.drain(now);
        for t in &canceled {
            let e = self.workers[w].spec.task_end_event(now, &t.uid, TaskState::Canceled, Some("canceled by drain"));
            self.emit(e);
        }
        let e = self.workers[w].spec.event(now, EventName::Drain);
        self.emit(e);
    }

    fn worker_shutdown(&mut self, now: f64, w: usize) {
        if self.workers[w].stopped {
            return;
        }
        self.worker_drain(now, w);
        let canceled = self.workers[w].core.cancel_running(now);
        for uid in &canceled {
            let e = self.workers[w].spec.task_end_event(now, uid, TaskState::Canceled, Some("canceled"));
            self.emit(e);
        }
        let spec = &self.workers[w].spec;
        let (a, b) = (spec.event(now, EventName::Shutdown), spec.event(now, EventName::WorkerStop).attr("reason", "shutdown"));
        self.emit(a);
        self.emit(b);
        self.workers[w].stopped = true;
        self.alive -= 1;
        if self.stopping && self.alive == 0 {
            self.finish(now);
        }
    }

    // All input submitted, every worker registered and nothing left to run:
    // stop the coordinators, which drain and shut down their workers.
    fn maybe_stop(&mut self, now: f64) {
        if self.stopping || !self.submitted.iter().all(|&s| s) {
            return;
        }
        let ready = self.coords.iter().all(|c| c.is_idle() && c.n_registered() == c.config().n_workers);
        if !ready {
            return;
        }
        self.stopping = true;
        for k in 0..self.coords.len() {
            let e = self.stop_event(now, k);
            self.emit(e);
        }
        if self.workers.is_empty() {
            self.finish(now);
            return;
        }
        for w in 0..self.workers.len() {
            let k = self.workers[w].coord;
            let drain = self.coords[k].message(Body::Drain);
            let shutdown = self.coords[k].message(Body::Shutdown);
            self.clock.schedule_at(now + self.latency(), Ev::ToWorker(w, drain));
            self.clock.schedule_at(now + self.latency(), Ev::ToWorker(w, shutdown));
        }
    }

    fn stop_event(&self, t: f64, k: usize) -> EventRecord {
        let s = self.coords[k].summary();
        self.coord_event(t, k, EventName::CoordStop)
            .attr("submitted", s.submitted)
            .attr("done", s.done)
            .attr("failed", s.failed)
            .attr("canceled", s.canceled)
    }

    fn finish(&mut self, now: f64) {
        let e = EventRecord::new(now, EntityKind::Pilot, self.pilot_id(), EventName::Shutdown);
        self.emit(e);
        self.t_end = now;
        self.finished = true;
    }

    // Batch walltime: everything still running or waiting is canceled.
    fn on_walltime(&mut self, now: f64) {
        self.walltime_hit = true;
        // results already on the wire belong to tasks that have ended
        let mut pending = Vec::new();
        while let Some((_, ev)) = self.clock.pop() {
            if let Ev::ToCoord(k, m) = ev {
                if let Body::ResultBulk(bulk) = m.body {
                    pending.push((k, m.sender_id, bulk.results));
                }
            }
        }
        for (k, sender, results) in pending {
            self.coords[k].on_results(&sender, results);
        }
        for w in 0..self.workers.len() {
            if self.workers[w].stopped {
                continue;
            }
            self.worker_shutdown_at_walltime(now, w);
        }
        for k in 0..self.coords.len() {
            self.coords[k].cancel_pending(now, &mut self.sink);
            self.coords[k].abandon_outstanding(TaskState::Canceled, "walltime", now, &mut self.sink);
            if !self.stopping {
                let e = self.stop_event(now, k);
                self.emit(e);
            }
        }
        self.stopping = true;
        self.finish(now);
    }

    fn worker_shutdown_at_walltime(&mut self, now: f64, w: usize) {
        self.worker_drain(now, w);
        let canceled = self.workers[w].core.cancel_running(now);
        for uid in &canceled {
            let e = self.workers[w].spec.task_end_event(now, uid, TaskState::Canceled, Some("walltime"));
            self.emit(e);
        }
        let results = self.workers[w].core.take_all_results();
        let k = self.workers[w].coord;
        for m in results {
            if let Body::ResultBulk(bulk) = m.body {
                self.coords[k].on_results(&m.sender_id, bulk.results);
            }
        }
        let spec = &self.workers[w].spec;
        let (a, b) = (spec.event(now, EventName::Shutdown), spec.event(now, EventName::WorkerStop).attr("reason", "walltime"));
        self.emit(a);
        self.emit(b);
        self.workers[w].stopped = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backend, CoordinatorConfig, Value};

    fn pilot(nodes: usize, cpn: u32, workers: usize) -> PilotDescription {
        let mut p = PilotDescription::new("p0", nodes, cpn, Backend::Sim);
        p.coordinators.push(CoordinatorConfig::new(workers, cpn));
        p
    }

    fn unit_tasks(durations: &[f64]) -> Vec<TaskDescription> {
        durations
            .iter()
            .enumerate()
            .map(|(i, d)| TaskDescription::function(format!("t{i:06}"), "dock", Value::Null).with_duration(*d))
            .collect()
    }

    fn run(p: &PilotDescription, tasks: Vec<TaskDescription>, s: &SimSettings) -> (PilotOutcome, Vec<EventRecord>) {
        let mut log = Vec::new();
        let out = simulate_pilot(p, tasks, s, &mut log).unwrap();
        (out, log)
    }

    fn times(log: &[EventRecord], name: &str) -> Vec<f64> {
        log.iter().filter(|e| e.event.as_str() == name).map(|e| e.t).collect()
    }

    #[test]
    fn four_slots_run_128_one_second_tasks_in_32s() {
        let p = pilot(1, 4, 1);
        let (out, log) = run(&p, unit_tasks(&[1.0; 128]), &SimSettings::default());
        assert_eq!(out.summary, JoinSummary { submitted: 128, done: 128, failed: 0, canceled: 0 });
        let last_end = times(&log, "task_end").into_iter().fold(0.0, f64::max);
        assert_eq!(last_end, 32.0);
        assert_eq!(out.slot_violations, 0);
    }

    #[test]
    fn log_times_never_decrease() {
        let p = pilot(4, 2, 4);
        let s = SimSettings { latency_s: 0.01, ..Default::default() };
        let (_, log) = run(&p, unit_tasks(&[0.5, 3.0, 1.0, 2.5, 0.0, 7.0, 1.5, 1.5, 4.0]), &s);
        assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn runs_are_deterministic() {
        let p = pilot(3, 2, 3);
        let s = SimSettings { latency_s: 0.003, ..Default::default() };
        let durations: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 * 0.25).collect();
        let (_, a) = run(&p, unit_tasks(&durations), &s);
        let (_, b) = run(&p, unit_tasks(&durations), &s);
        let lines = |l: &[EventRecord]| l.iter().map(EventRecord::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
    }

    #[test]
    fn timeout_fails_at_cutoff() {
        let p = pilot(1, 1, 1);
        let tasks = vec![unit_tasks(&[100.0])[0].clone().with_timeout(60.0)];
        let (out, log) = run(&p, tasks, &SimSettings::default());
        assert_eq!(out.summary.failed, 1);
        let end = log.iter().find(|e| e.event == EventName::TaskEnd).unwrap();
        assert_eq!(end.t, 60.0);
        assert_eq!(end.get("error"), Some(TIMEOUT_TEXT));
    }

    #[test]
    fn walltime_cancels_running_and_pending() {
        let mut p = pilot(10, 1, 10);
        p.walltime_s = 5.0;
        let (out, _) = run(&p, unit_tasks(&[100.0; 30]), &SimSettings::default());
        assert!(out.walltime_hit);
        assert_eq!(out.summary, JoinSummary { submitted: 30, done: 0, failed: 0, canceled: 30 });
        assert_eq!(out.t_end, 5.0);
    }

    #[test]
    fn startup_delays_shape_the_log() {
        let mut p = pilot(5, 1, 5);
        p.available_at_s = 10.0;
        let s = SimSettings {
            latency_s: 0.0,
            delays: StartupDelays { bootstrap_s: 78.0, staging_s: 60.0, coordinator_s: 1.0, preprocess_s: 42.0, worker_launch_s: 330.0 },
            ..Default::default()
        };
        let (_, log) = run(&p, unit_tasks(&[1.0; 5]), &s);
        assert_eq!(times(&log, "pilot_active"), vec![10.0]);
        assert_eq!(times(&log, "bootstrap_end"), vec![88.0]);
        assert_eq!(times(&log, "staging_end"), vec![70.0]);
        assert_eq!(times(&log, "coord_start"), vec![88.0]);
        assert_eq!(times(&log, "coord_ready"), vec![89.0]);
        assert_eq!(times(&log, "preprocess_end"), vec![131.0]);
        let starts = times(&log, "worker_start");
        assert_eq!(starts.first(), Some(&131.0));
        assert_eq!(starts.last(), Some(&461.0));
    }

    #[test]
    fn workers_that_do_not_fit_are_an_error() {
        let p = pilot(8, 1, 9);
        let err = simulate_pilot(&p, Vec::new(), &SimSettings::default(), &mut Vec::new()).unwrap_err();
        assert!(matches!(err, SimError::Placement { .. }));
    }

    #[test]
    fn ten_thousand_unit_tasks_on_a_hundred_nodes() {
        let p = pilot(100, 56, 100);
        let (out, _) = run(&p, unit_tasks(&vec![1.0; 10_000]), &SimSettings::default());
        assert_eq!(out.summary.done, 10_000);
        assert_eq!(out.slot_violations, 0);
    }

    #[test]
    fn multi_pilot_split_is_exhaustive_and_mode_independent() {
        let mut pilots = Vec::new();
        for i in 0..3 {
            let mut p = pilot(2, 1, 2);
            p.pilot_id = format!("p{i}");
            p.available_at_s = i as f64 * 10.0;
            pilots.push(p);
        }
        let tasks = unit_tasks(&[1.0; 20]);
        let seq = simulate_pilots(&pilots, tasks.clone(), &SimSettings::default(), Execution::Sequential, |_| Vec::new()).unwrap();
        let par = simulate_pilots(&pilots, tasks, &SimSettings::default(), Execution::Parallel, |_| Vec::new()).unwrap();
        let total: usize = seq.iter().map(|(o, _)| o.summary.done).sum();
        assert_eq!(total, 20);
        for ((a, la), (b, lb)) in seq.iter().zip(&par) {
            assert_eq!(a, b);
            assert_eq!(la, lb);
        }
    }
}
