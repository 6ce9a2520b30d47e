//! Single-node executor. [`WorkerCore`] holds the slot accounting, local
//! queue, credit and result-batching rules; the local runtime in
//! [`runtime`] and the simulator both drive it.

pub mod exec;
mod registry;
pub mod runtime;

pub use exec::{call_function, execute_executable, execute_function, ExecOutcome, LOCAL_TIMEOUT_GRACE_S, TIMEOUT_TEXT};
pub use registry::{FunctionEntry, FunctionImpl, FunctionRegistry, Interrupted, TaskContext};
pub use runtime::{run_remote_worker, worker_loop, WorkerExit, WorkerSpec};

use std::collections::{HashMap, VecDeque};

use crate::model::{TaskDescription, TaskKind, TaskResult, TaskState, Timestamps};
use crate::protocol::{Body, Credit, Message, Outbox, Register, ResultBulk};

/// Results are flushed once this many are buffered...
pub const RESULT_BATCH: usize = 32;
/// ...or once the oldest buffered result is this old.
pub const RESULT_FLUSH_S: f64 = 1.0;

#[derive(Debug, Clone)]
struct Running {
    cores: u32,
    gpus: u32,
    kind: TaskKind,
    received: f64,
    start: f64,
    // result already reported (timeout); the slot is held until the call returns
    reported: bool,
}

#[derive(Debug, Clone)]
struct Queued {
    task: TaskDescription,
    received: f64,
}

/// A task the caller must start now; its slots are already reserved.
#[derive(Debug, Clone)]
pub struct StartOrder {
    pub task: TaskDescription,
    pub received: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShape {
    pub worker_id: String,
    pub node_id: String,
    pub core_slots: u32,
    pub gpu_slots: u32,
    pub prefetch: u32,
}

/// Slot ledger, local FIFO and outgoing-message rules of one worker.
#[derive(Debug)]
pub struct WorkerCore {
    shape: WorkerShape,
    free_cores: u32,
    free_gpus: u32,
    queue: VecDeque<Queued>,
    queued_cores: u32,
    queued_gpus: u32,
    running: HashMap<String, Running>,
    // credit granted to the coordinator that has not come back as tasks yet
    granted_cores: u32,
    granted_gpus: u32,
    draining: bool,
    results: Vec<TaskResult>,
    oldest_result: Option<f64>,
    outbox: Outbox,
}

impl WorkerCore {
    pub fn new(shape: WorkerShape) -> Self {
        WorkerCore {
            free_cores: shape.core_slots,
            free_gpus: shape.gpu_slots,
            outbox: Outbox::new(shape.worker_id.clone()),
            shape,
            queue: VecDeque::new(),
            queued_cores: 0,
            queued_gpus: 0,
            running: HashMap::new(),
            granted_cores: 0,
            granted_gpus: 0,
            draining: false,
            results: Vec::new(),
            oldest_result: None,
        }
    }

    pub fn shape(&self) -> &WorkerShape {
        &self.shape
    }

    pub fn worker_id(&self) -> &str {
        &self.shape.worker_id
    }

    pub fn free_cores(&self) -> u32 {
        self.free_cores
    }

    pub fn busy_cores(&self) -> u32 {
        self.shape.core_slots - self.free_cores
    }

    pub fn n_running(&self) -> usize {
        self.running.len()
    }

    pub fn n_queued(&self) -> usize {
        self.queue.len()
    }

    pub fn is_draining(&self) -> bool {
        self.draining
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.queue.is_empty()
    }

    pub fn running_uids(&self) -> impl Iterator<Item = &str> {
        self.running.keys().map(String::as_str)
    }

    pub fn register_message(&mut self) -> Message {
        let body = Body::Register(Register {
            worker_id: self.shape.worker_id.clone(),
            node_id: self.shape.node_id.clone(),
            cores: self.shape.core_slots,
            gpus: self.shape.gpu_slots,
        });
        self.outbox.message(body)
    }

    pub fn message(&mut self, body: Body) -> Message {
        self.outbox.message(body)
    }

    /// New credit to advertise: free capacity (plus prefetch) not yet
    /// promised to the coordinator or taken by queued tasks.
    pub fn credit_update(&mut self) -> Option<Message> {
        if self.draining {
            return None;
        }
        let used_cores = self.busy_cores() + self.queued_cores + self.granted_cores;
        let used_gpus = (self.shape.gpu_slots - self.free_gpus) + self.queued_gpus + self.granted_gpus;
        let cores = (self.shape.core_slots + self.shape.prefetch).saturating_sub(used_cores);
        let gpus = self.shape.gpu_slots.saturating_sub(used_gpus);
        if cores == 0 {
            return None;
        }
        self.granted_cores += cores;
        self.granted_gpus += gpus;
        Some(self.outbox.message(Body::Credit(Credit { cores, gpus })))
    }

    /// Accepts a bulk. Returns the tasks that start immediately; the rest
    /// wait in the local queue. While draining, every task is rejected and
    /// reported as canceled.
    pub fn accept_bulk(&mut self, tasks: Vec<TaskDescription>, now: f64) -> Vec<StartOrder> {
        for t in &tasks {
            self.granted_cores = self.granted_cores.saturating_sub(t.cores);
            self.granted_gpus = self.granted_gpus.saturating_sub(t.gpus);
        }
        if self.draining {
            for t in tasks {
                let r = self.unstarted_result(&t, now, TaskState::Canceled, "worker draining");
                self.push_result(r, now);
            }
            return Vec::new();
        }
        for task in tasks {
            self.queued_cores += task.cores;
            self.queued_gpus += task.gpus;
            self.queue.push_back(Queued { task, received: now });
        }
        self.start_ready(now)
    }

    fn start_ready(&mut self, now: f64) -> Vec<StartOrder> {
        let mut out = Vec::new();
        while let Some(head) = self.queue.front() {
            let t = &head.task;
            if t.cores > self.free_cores || t.gpus > self.free_gpus {
                break;
            }
            let Queued { task, received } = self.queue.pop_front().expect("front exists");
            self.queued_cores -= task.cores;
            self.queued_gpus -= task.gpus;
            self.free_cores -= task.cores;
            self.free_gpus -= task.gpus;
            self.running.insert(
                task.uid.clone(),
                Running { cores: task.cores, gpus: task.gpus, kind: task.kind(), received, start: now, reported: false },
            );
            out.push(StartOrder { task, received });
        }
        debug_assert!(self.busy_cores() <= self.shape.core_slots);
        out
    }

    /// Records the result of a running task, frees its slots and starts
    /// whatever fits next. A task whose result was already reported only
    /// frees its slots.
    pub fn complete(&mut self, uid: &str, outcome: ExecOutcome, now: f64) -> Vec<StartOrder> {
        let Some(run) = self.running.remove(uid) else {
            return Vec::new();
        };
        self.free_cores += run.cores;
        self.free_gpus += run.gpus;
        assert!(self.free_cores <= self.shape.core_slots && self.free_gpus <= self.shape.gpu_slots, "slot accounting broken");
        if !run.reported {
            let r = self.result_for(uid, &run, outcome);
            self.push_result(r, now);
        }
        if self.draining {
            Vec::new()
        } else {
            self.start_ready(now)
        }
    }

    /// Reports a running task as finished (e.g. timed out) while its slots
    /// stay reserved until [`WorkerCore::complete`] is called for it.
    pub fn report_early(&mut self, uid: &str, outcome: ExecOutcome, now: f64) -> bool {
        let Some(run) = self.running.get_mut(uid) else {
            return false;
        };
        if run.reported {
            return false;
        }
        run.reported = true;
        let run = run.clone();
        let r = self.result_for(uid, &run, outcome);
        self.push_result(r, now);
        true
    }

    /// Start time recorded when the task left the queue.
    pub fn start_time(&self, uid: &str) -> Option<f64> {
        self.running.get(uid).map(|r| r.start)
    }

    fn result_for(&self, uid: &str, run: &Running, o: ExecOutcome) -> TaskResult {
        let mut timestamps =
            Timestamps { submit: run.received, schedule: run.received, dispatch: run.received, start: o.start, end: o.end };
        timestamps.make_monotone();
        TaskResult {
            uid: uid.to_string(),
            state: o.state,
            exit_code: o.exit_code,
            value: o.value,
            error_text: o.error_text,
            timestamps,
            worker_id: self.shape.worker_id.clone(),
            node_id: self.shape.node_id.clone(),
            kind: run.kind,
        }
    }

    fn unstarted_result(&self, t: &TaskDescription, now: f64, state: TaskState, why: &str) -> TaskResult {
        TaskResult {
            uid: t.uid.clone(),
            state,
            exit_code: None,
            value: None,
            error_text: Some(why.to_string()),
            timestamps: Timestamps { submit: now, schedule: now, dispatch: now, start: now, end: now },
            worker_id: self.shape.worker_id.clone(),
            node_id: self.shape.node_id.clone(),
            kind: t.kind(),
        }
    }

    fn push_result(&mut self, r: TaskResult, now: f64) {
        if self.results.is_empty() {
            self.oldest_result = Some(now);
        }
        self.results.push(r);
    }

    /// Stops accepting work. Queued tasks are canceled and returned; running
    /// tasks continue.
    pub fn drain(&mut self, now: f64) -> Vec<TaskDescription> {
        self.draining = true;
        let queued: Vec<TaskDescription> = self.queue.drain(..).map(|q| q.task).collect();
        self.queued_cores = 0;
        self.queued_gpus = 0;
        for t in &queued {
            let r = self.unstarted_result(t, now, TaskState::Canceled, "canceled by drain");
            self.push_result(r, now);
        }
        queued
    }

    /// Reports every running task as canceled and frees its slots. Used on
    /// shutdown and on walltime expiry.
    pub fn cancel_running(&mut self, now: f64) -> Vec<String> {
        let mut uids: Vec<String> = self.running.keys().cloned().collect();
        uids.sort();
        for uid in &uids {
            let start = self.running[uid].start;
            let outcome = ExecOutcome {
                state: TaskState::Canceled,
                exit_code: None,
                value: None,
                error_text: Some("canceled".into()),
                start,
                end: now.max(start),
            };
            self.complete(uid, outcome, now);
        }
        uids
    }

    pub fn pending_results(&self) -> usize {
        self.results.len()
    }

    /// When the oldest buffered result must be flushed, if any is buffered.
    pub fn flush_due(&self) -> Option<f64> {
        self.oldest_result.map(|t| t + RESULT_FLUSH_S)
    }

    pub fn should_flush(&self, now: f64) -> bool {
        self.results.len() >= RESULT_BATCH || self.flush_due().is_some_and(|t| now >= t)
    }

    /// Takes up to one batch of buffered results as a RESULT_BULK.
    pub fn take_results(&mut self) -> Option<Message> {
        if self.results.is_empty() {
            return None;
        }
        let n = self.results.len().min(RESULT_BATCH);
        let batch: Vec<TaskResult> = self.results.drain(..n).collect();
        self.oldest_result = if self.results.is_empty() { None } else { self.oldest_result };
        Some(self.outbox.message(Body::ResultBulk(ResultBulk { results: batch })))
    }

    /// All buffered results, in batches of at most [`RESULT_BATCH`].
    pub fn take_all_results(&mut self) -> Vec<Message> {
        std::iter::from_fn(|| self.take_results()).collect()
    }
}
