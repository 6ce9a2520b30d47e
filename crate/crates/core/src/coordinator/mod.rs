//! Workload owner. [`CoordinatorCore`] is the transport-free control logic:
//! pending FIFO, worker table, credit-based dispatch in bulks and result
//! accounting. [`local::Coordinator`] runs it over TCP with real workers; the
//! simulator drives it with simulated message delivery.

pub mod local;

pub use local::{Coordinator, CoordinatorError, LocalPilot, WorkerLaunch};

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::events::{EntityKind, EventName, EventRecord, EventSink};
use crate::model::{validate_task, CoordinatorConfig, TaskDescription, TaskResult, TaskState, Timestamps, ValidationError};
use crate::protocol::{Body, Credit, Message, Outbox, Register, RegisterAck, TaskBulk};

/// How pending tasks are handed to workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    /// Workers advertise free slots; tasks go only where credit exists.
    #[default]
    CreditPull,
    /// Every task is pre-assigned to worker `index mod n_workers` once all
    /// workers have registered, ignoring credit. Baseline for comparison.
    StaticRoundRobin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinSummary {
    pub submitted: usize,
    pub done: usize,
    pub failed: usize,
    pub canceled: usize,
}

impl JoinSummary {
    pub fn finished(&self) -> usize {
        self.done + self.failed + self.canceled
    }

    pub fn add(&mut self, other: &JoinSummary) {
        self.submitted += other.submitted;
        self.done += other.done;
        self.failed += other.failed;
        self.canceled += other.canceled;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubmitOutcome {
    pub accepted: usize,
    pub rejected: Vec<(String, ValidationError)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Active,
    Lost,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct WorkerEntry {
    pub worker_id: String,
    pub node_id: String,
    pub cores: u32,
    pub gpus: u32,
    pub state: WorkerState,
    pub credit_cores: u32,
    pub credit_gpus: u32,
    pub granted_cores_total: u64,
    pub sent_cores_total: u64,
    pub tasks_outstanding: usize,
}

#[derive(Debug, Clone)]
struct Outstanding {
    worker: usize,
    stamps: Timestamps,
}

/// Partition of an input sequence across `of` coordinators: coordinator
/// `k` takes the items whose index is `k` modulo `of`.
pub fn stride_partition<T: Clone>(items: &[T], k: usize, of: usize) -> Vec<T> {
    assert!(of > 0 && k < of, "coordinator {k} of {of}");
    items.iter().skip(k).step_by(of).cloned().collect()
}

/// Consumes `items` into `of` stride partitions.
pub fn stride_split<T>(items: Vec<T>, of: usize) -> Vec<Vec<T>> {
    assert!(of > 0);
    let mut parts: Vec<Vec<T>> = (0..of).map(|_| Vec::with_capacity(items.len() / of + 1)).collect();
    for (i, t) in items.into_iter().enumerate() {
        parts[i % of].push(t);
    }
    parts
}

pub struct CoordinatorCore {
    id: String,
    pilot_id: String,
    config: CoordinatorConfig,
    policy: DispatchPolicy,
    known_functions: Option<BTreeSet<String>>,
    workers: Vec<WorkerEntry>,
    index: HashMap<String, usize>,
    ready: VecDeque<usize>,
    in_ready: Vec<bool>,
    pending: VecDeque<(TaskDescription, f64)>,
    outstanding: HashMap<String, Outstanding>,
    seen: HashSet<String>,
    static_next: usize,
    summary: JoinSummary,
    outbox: Outbox,
    accepting: bool,
}

impl CoordinatorCore {
    pub fn new(id: impl Into<String>, pilot_id: impl Into<String>, config: CoordinatorConfig) -> Self {
        let id = id.into();
        CoordinatorCore {
            outbox: Outbox::new(id.clone()),
            id,
            pilot_id: pilot_id.into(),
            config,
            policy: DispatchPolicy::CreditPull,
            known_functions: None,
            workers: Vec::new(),
            index: HashMap::new(),
            ready: VecDeque::new(),
            in_ready: Vec::new(),
            pending: VecDeque::new(),
            outstanding: HashMap::new(),
            seen: HashSet::new(),
            static_next: 0,
            summary: JoinSummary::default(),
            accepting: true,
        }
    }

    pub fn with_policy(mut self, policy: DispatchPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Restricts function tasks to these names.
    pub fn with_functions<'a>(mut self, names: impl IntoIterator<Item = &'a str>) -> Self {
        self.known_functions = Some(names.into_iter().map(str::to_string).collect());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn summary(&self) -> JoinSummary {
        self.summary
    }

    pub fn n_pending(&self) -> usize {
        self.pending.len()
    }

    pub fn n_outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn n_registered(&self) -> usize {
        self.workers.len()
    }

    pub fn workers(&self) -> &[WorkerEntry] {
        &self.workers
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerEntry> {
        self.index.get(worker_id).map(|&i| &self.workers[i])
    }

    /// No pending and no outstanding tasks.
    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.outstanding.is_empty()
    }

    fn task_event(&self, t: f64, uid: &str, ev: EventName) -> EventRecord {
        EventRecord::new(t, EntityKind::Task, uid, ev).attr("coordinator", &self.id)
    }

    /// Validates and queues tasks. Invalid ones are reported and skipped.
    pub fn submit(&mut self, tasks: Vec<TaskDescription>, now: f64, sink: &mut dyn EventSink) -> SubmitOutcome {
        let mut out = SubmitOutcome::default();
        for t in tasks {
            if let Err(e) = self.check(&t) {
                out.rejected.push((t.uid.clone(), e));
                continue;
            }
            self.seen.insert(t.uid.clone());
            let e = self.task_event(now, &t.uid, EventName::TaskSubmit).attr("kind", t.kind());
            sink.record(e);
            self.pending.push_back((t, now));
            out.accepted += 1;
        }
        self.summary.submitted += out.accepted;
        out
    }

    fn check(&self, t: &TaskDescription) -> Result<(), ValidationError> {
        validate_task(t, |name| self.known_functions.as_ref().is_none_or(|k| k.contains(name)))?;
        if !self.config.fits_worker(t) {
            let field = if t.cores > self.config.cpn { "cores" } else { "gpus" };
            return Err(ValidationError::new(
                field,
                format!("task needs {}c/{}g but workers have {}c/{}g", t.cores, t.gpus, self.config.cpn, self.config.gpn),
            ));
        }
        if self.seen.contains(&t.uid) {
            return Err(ValidationError::new("uid", format!("duplicate uid {:?}", t.uid)));
        }
        Ok(())
    }

    pub fn on_register(&mut self, reg: &Register) -> Message {
        if !self.index.contains_key(&reg.worker_id) {
            let i = self.workers.len();
            self.workers.push(WorkerEntry {
                worker_id: reg.worker_id.clone(),
                node_id: reg.node_id.clone(),
                cores: reg.cores,
                gpus: reg.gpus,
                state: WorkerState::Active,
                credit_cores: 0,
                credit_gpus: 0,
                granted_cores_total: 0,
                sent_cores_total: 0,
                tasks_outstanding: 0,
            });
            self.in_ready.push(false);
            self.index.insert(reg.worker_id.clone(), i);
        }
        self.outbox.message(Body::RegisterAck(RegisterAck { coordinator_id: self.id.clone() }))
    }

    pub fn on_credit(&mut self, worker_id: &str, c: Credit) {
        let Some(&i) = self.index.get(worker_id) else { return };
        let w = &mut self.workers[i];
        if w.state != WorkerState::Active {
            return;
        }
        w.credit_cores += c.cores;
        w.credit_gpus += c.gpus;
        w.granted_cores_total += c.cores as u64;
        if w.credit_cores > 0 && !self.in_ready[i] {
            self.in_ready[i] = true;
            self.ready.push_back(i);
        }
    }

    /// Accounts for returned results. Returns them with the coordinator's
    /// submit/schedule/dispatch stamps filled in. Results for unknown or
    /// already-finished tasks are dropped.
    pub fn on_results(&mut self, worker_id: &str, results: Vec<TaskResult>) -> Vec<TaskResult> {
        let wi = self.index.get(worker_id).copied();
        let mut out = Vec::with_capacity(results.len());
        for mut r in results {
            let Some(o) = self.outstanding.remove(&r.uid) else { continue };
            if Some(o.worker) != wi {
                log::warn!("{}: result for {} from {worker_id}, dispatched elsewhere", self.id, r.uid);
            }
            let w = &mut self.workers[o.worker];
            w.tasks_outstanding -= 1;
            r.timestamps.submit = o.stamps.submit;
            r.timestamps.schedule = o.stamps.schedule;
            r.timestamps.dispatch = o.stamps.dispatch;
            r.timestamps.make_monotone();
            self.count(r.state);
            out.push(r);
        }
        out
    }

    fn count(&mut self, state: TaskState) {
        match state {
            TaskState::Done => self.summary.done += 1,
            TaskState::Failed => self.summary.failed += 1,
            TaskState::Canceled => self.summary.canceled += 1,
            other => panic!("non-terminal result state {other}"),
        }
    }

    /// One dispatch round: every worker with credit gets at most one bulk,
    /// a FIFO prefix of pending that fits its credit, capped at bulk size.
    pub fn dispatch_step(&mut self, now: f64, sink: &mut dyn EventSink) -> Vec<(String, Message)> {
        if !self.accepting || self.pending.is_empty() {
            return Vec::new();
        }
        match self.policy {
            DispatchPolicy::CreditPull => self.dispatch_credit(now, sink),
            DispatchPolicy::StaticRoundRobin => self.dispatch_static(now, sink),
        }
    }

    fn send_bulk(&mut self, wi: usize, tasks: Vec<TaskDescription>, now: f64, sink: &mut dyn EventSink) -> (String, Message) {
        let worker_id = self.workers[wi].worker_id.clone();
        let msg = self.outbox.message(Body::TaskBulk(TaskBulk { tasks }));
        let Body::TaskBulk(bulk) = &msg.body else { unreachable!() };
        for t in &bulk.tasks {
            let e = self.task_event(now, &t.uid, EventName::TaskSchedule).attr("worker", &worker_id);
            sink.record(e);
            let e = self.task_event(now, &t.uid, EventName::TaskDispatch).attr("worker", &worker_id).attr("bulk", msg.seq);
            sink.record(e);
        }
        (worker_id, msg)
    }

    fn dispatch_credit(&mut self, now: f64, sink: &mut dyn EventSink) -> Vec<(String, Message)> {
        let mut out = Vec::new();
        let rounds = self.ready.len();
        for _ in 0..rounds {
            if self.pending.is_empty() {
                break;
            }
            let Some(wi) = self.ready.pop_front() else { break };
            let (mut cores, mut gpus) = {
                let w = &self.workers[wi];
                if w.state != WorkerState::Active || w.credit_cores == 0 {
                    self.in_ready[wi] = false;
                    continue;
                }
                (w.credit_cores, w.credit_gpus)
            };
            let mut tasks = Vec::new();
            while tasks.len() < self.config.bulk_size {
                let Some((head, _)) = self.pending.front() else { break };
                if head.cores > cores || head.gpus > gpus {
                    break;
                }
                let (t, submitted) = self.pending.pop_front().expect("front exists");
                cores -= t.cores;
                gpus -= t.gpus;
                self.outstanding.insert(
                    t.uid.clone(),
                    Outstanding {
                        worker: wi,
                        stamps: Timestamps { submit: submitted, schedule: now, dispatch: now, start: now, end: now },
                    },
                );
                tasks.push(t);
            }
            let w = &mut self.workers[wi];
            let used = w.credit_cores - cores;
            w.sent_cores_total += used as u64;
            w.credit_cores = cores;
            w.credit_gpus = gpus;
            w.tasks_outstanding += tasks.len();
            debug_assert!(w.sent_cores_total <= w.granted_cores_total);
            if w.credit_cores > 0 {
                self.ready.push_back(wi);
            } else {
                self.in_ready[wi] = false;
            }
            if !tasks.is_empty() {
                out.push(self.send_bulk(wi, tasks, now, sink));
            }
        }
        out
    }

    fn dispatch_static(&mut self, now: f64, sink: &mut dyn EventSink) -> Vec<(String, Message)> {
        let active: Vec<usize> = (0..self.workers.len()).filter(|&i| self.workers[i].state == WorkerState::Active).collect();
        if self.workers.len() < self.config.n_workers || active.is_empty() {
            return Vec::new();
        }
        let mut per_worker: Vec<Vec<TaskDescription>> = vec![Vec::new(); active.len()];
        while let Some((t, submitted)) = self.pending.pop_front() {
            let slot = self.static_next % active.len();
            self.static_next += 1;
            let wi = active[slot];
            self.outstanding.insert(
                t.uid.clone(),
                Outstanding { worker: wi, stamps: Timestamps { submit: submitted, schedule: now, dispatch: now, start: now, end: now } },
            );
            self.workers[wi].tasks_outstanding += 1;
            per_worker[slot].push(t);
        }
        let mut out = Vec::new();
        for (slot, tasks) in per_worker.into_iter().enumerate() {
            let mut it = tasks.into_iter().peekable();
            while it.peek().is_some() {
                let chunk: Vec<TaskDescription> = it.by_ref().take(self.config.bulk_size).collect();
                out.push(self.send_bulk(active[slot], chunk, now, sink));
            }
        }
        out
    }

    /// Marks a worker lost: its outstanding tasks fail and are not resent.
    pub fn worker_lost(&mut self, worker_id: &str, now: f64, sink: &mut dyn EventSink) -> Vec<TaskResult> {
        let Some(&wi) = self.index.get(worker_id) else { return Vec::new() };
        if self.workers[wi].state != WorkerState::Active {
            return Vec::new();
        }
        self.workers[wi].state = WorkerState::Lost;
        self.workers[wi].credit_cores = 0;
        self.abandon(|o| o.worker == wi, TaskState::Failed, "worker lost", now, sink)
    }

    fn abandon(
        &mut self,
        pick: impl Fn(&Outstanding) -> bool,
        state: TaskState,
        why: &str,
        now: f64,
        sink: &mut dyn EventSink,
    ) -> Vec<TaskResult> {
        let mut uids: Vec<String> = self.outstanding.iter().filter(|(_, o)| pick(o)).map(|(u, _)| u.clone()).collect();
        uids.sort();
        let mut out = Vec::with_capacity(uids.len());
        for uid in uids {
            let o = self.outstanding.remove(&uid).expect("listed above");
            let w = &mut self.workers[o.worker];
            w.tasks_outstanding -= 1;
            let worker_id = w.worker_id.clone();
            let node_id = w.node_id.clone();
            let e = self.task_event(now, &uid, EventName::TaskEnd).attr("state", state).attr("error", why);
            sink.record(e);
            let mut stamps = o.stamps;
            stamps.start = stamps.dispatch;
            stamps.end = now.max(stamps.dispatch);
            out.push(TaskResult {
                uid,
                state,
                exit_code: None,
                value: None,
                error_text: Some(why.to_string()),
                timestamps: stamps,
                worker_id,
                node_id,
                kind: crate::model::TaskKind::Function,
            });
            self.count(state);
        }
        out
    }

    /// Cancels every task not yet dispatched and stops further dispatch.
    pub fn cancel_pending(&mut self, now: f64, sink: &mut dyn EventSink) -> usize {
        self.accepting = false;
        let n = self.pending.len();
        for (t, _) in std::mem::take(&mut self.pending) {
            let e = self
                .task_event(now, &t.uid, EventName::TaskEnd)
                .attr("state", TaskState::Canceled)
                .attr("error", "canceled before dispatch");
            sink.record(e);
            self.count(TaskState::Canceled);
        }
        n
    }

    /// Gives up on every outstanding task, recording it as `state`.
    pub fn abandon_outstanding(&mut self, state: TaskState, why: &str, now: f64, sink: &mut dyn EventSink) -> Vec<TaskResult> {
        self.abandon(|_| true, state, why, now, sink)
    }

    pub fn mark_stopped(&mut self, worker_id: &str) {
        if let Some(&wi) = self.index.get(worker_id) {
            if self.workers[wi].state == WorkerState::Active {
                self.workers[wi].state = WorkerState::Stopped;
            }
        }
    }

    pub fn message(&mut self, body: Body) -> Message {
        self.outbox.message(body)
    }

    pub fn pilot_id(&self) -> &str {
        &self.pilot_id
    }
}
