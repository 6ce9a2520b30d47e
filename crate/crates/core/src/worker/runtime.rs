//! Local worker runtime: speaks the wire protocol over a byte stream and
//! runs tasks on threads and child processes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};

use crate::events::{EntityKind, EventName, EventRecord, SharedSink, WallClock};
use crate::model::{Payload, TaskDescription, TaskState};
use crate::protocol::{read_message, write_message, Body, Message};
use crate::worker::exec::{call_function, execute_executable, ExecOutcome, TIMEOUT_TEXT};
use crate::worker::registry::{FunctionRegistry, TaskContext};
use crate::worker::{StartOrder, WorkerCore, WorkerShape};

/// Identity and size of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSpec {
    pub worker_id: String,
    pub node_id: String,
    pub pilot_id: String,
    pub core_slots: u32,
    pub gpu_slots: u32,
    pub prefetch: u32,
}

impl WorkerSpec {
    pub fn start_event(&self, t: f64) -> EventRecord {
        EventRecord::new(t, EntityKind::Worker, self.worker_id.as_str(), EventName::WorkerStart)
            .attr("pilot", &self.pilot_id)
            .attr("node", &self.node_id)
            .attr("cores", self.core_slots)
            .attr("gpus", self.gpu_slots)
    }

    pub fn task_start_event(&self, t: f64, task: &TaskDescription) -> EventRecord {
        EventRecord::new(t, EntityKind::Task, task.uid.as_str(), EventName::TaskStart)
            .attr("pilot", &self.pilot_id)
            .attr("worker", &self.worker_id)
            .attr("node", &self.node_id)
            .attr("kind", task.kind())
            .attr("cores", task.cores)
            .attr("gpus", task.gpus)
    }

    pub fn task_end_event(&self, t: f64, uid: &str, state: TaskState, error: Option<&str>) -> EventRecord {
        let e = EventRecord::new(t, EntityKind::Task, uid, EventName::TaskEnd).attr("state", state).attr("worker", &self.worker_id);
        match error {
            Some(err) => e.attr("error", err),
            None => e,
        }
    }

    pub fn event(&self, t: f64, name: EventName) -> EventRecord {
        EventRecord::new(t, EntityKind::Worker, self.worker_id.as_str(), name)
    }

    pub(crate) fn shape(&self) -> WorkerShape {
        WorkerShape {
            worker_id: self.worker_id.clone(),
            node_id: self.node_id.clone(),
            core_slots: self.core_slots,
            gpu_slots: self.gpu_slots,
            prefetch: self.prefetch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerExit {
    Shutdown,
    ConnectionLost,
}

enum Input {
    Msg(Message),
    Closed(Option<String>),
    Done { uid: String, outcome: ExecOutcome },
}

struct Live {
    cancel: Arc<AtomicBool>,
    deadline: Option<Instant>,
    is_function: bool,
}

struct Runtime<W: Write> {
    spec: WorkerSpec,
    core: WorkerCore,
    registry: Arc<FunctionRegistry>,
    writer: Option<W>,
    sink: SharedSink,
    clock: WallClock,
    tx: Sender<Input>,
    live: HashMap<String, Live>,
}

impl<W: Write> Runtime<W> {
    fn send(&mut self, m: &Message) {
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = write_message(w, m) {
                warn!("{}: send failed: {e}", self.spec.worker_id);
                self.writer = None;
            }
        }
    }

    fn emit(&self, e: EventRecord) {
        self.sink.emit(e);
    }

    fn launch(&mut self, order: StartOrder) {
        let StartOrder { task, .. } = order;
        let now = self.clock.now();
        self.emit(self.spec.task_start_event(now, &task));
        let cancel = Arc::new(AtomicBool::new(false));
        let is_function = matches!(task.payload, Payload::Function(_));
        let deadline = if is_function { task.timeout_s.map(|t| Instant::now() + Duration::from_secs_f64(t)) } else { None };
        self.live.insert(task.uid.clone(), Live { cancel: Arc::clone(&cancel), deadline, is_function });
        let tx = self.tx.clone();
        let clock = self.clock;
        let TaskDescription { uid, payload, timeout_s, .. } = task;
        match payload {
            Payload::Function(call) => {
                let registry = Arc::clone(&self.registry);
                thread::spawn(move || {
                    let ctx = TaskContext::new(uid.clone(), cancel);
                    let start = clock.now();
                    let (state, value, error_text) = call_function(&registry, &call, &ctx);
                    let outcome = ExecOutcome { state, exit_code: None, value, error_text, start, end: clock.now() };
                    let _ = tx.send(Input::Done { uid, outcome });
                });
            }
            Payload::Executable(spec) => {
                thread::spawn(move || {
                    let outcome = execute_executable(&spec, timeout_s, &cancel, &clock);
                    let _ = tx.send(Input::Done { uid, outcome });
                });
            }
        }
    }

    fn emit_end(&self, uid: &str, state: TaskState, t: f64, error: Option<&str>) {
        self.emit(self.spec.task_end_event(t, uid, state, error));
    }

    fn on_done(&mut self, uid: String, mut outcome: ExecOutcome) {
        let now = self.clock.now();
        let reported_already = self.live.remove(&uid).is_none();
        if let Some(start) = self.core.start_time(&uid) {
            outcome.start = start;
        }
        outcome.end = now.max(outcome.start);
        if !reported_already {
            self.emit_end(&uid, outcome.state, now, outcome.error_text.as_deref());
        }
        let starts = self.core.complete(&uid, outcome, now);
        for s in starts {
            self.launch(s);
        }
        if let Some(m) = self.core.credit_update() {
            self.send(&m);
        }
    }

    fn check_timeouts(&mut self) {
        let now_i = Instant::now();
        let expired: Vec<String> =
            self.live.iter().filter(|(_, l)| l.is_function && l.deadline.is_some_and(|d| d <= now_i)).map(|(uid, _)| uid.clone()).collect();
        for uid in expired {
            let live = self.live.remove(&uid).expect("listed above");
            live.cancel.store(true, Ordering::Relaxed);
            let now = self.clock.now();
            let start = self.core.start_time(&uid).unwrap_or(now);
            let outcome = ExecOutcome {
                state: TaskState::Failed,
                exit_code: None,
                value: None,
                error_text: Some(TIMEOUT_TEXT.into()),
                start,
                end: now,
            };
            self.emit_end(&uid, TaskState::Failed, now, Some(TIMEOUT_TEXT));
            self.core.report_early(&uid, outcome, now);
        }
    }

    fn next_wakeup(&self) -> Duration {
        let mut wait = Duration::from_millis(500);
        let now_i = Instant::now();
        for l in self.live.values() {
            if let Some(d) = l.deadline {
                wait = wait.min(d.saturating_duration_since(now_i));
            }
        }
        if let Some(due) = self.core.flush_due() {
            let secs = (due - self.clock.now()).max(0.0);
            wait = wait.min(Duration::from_secs_f64(secs));
        }
        wait
    }

    fn flush(&mut self, force: bool) {
        let now = self.clock.now();
        while force && self.core.pending_results() > 0 || self.core.should_flush(now) {
            match self.core.take_results() {
                Some(m) => self.send(&m),
                None => break,
            }
        }
    }

    fn drain(&mut self) {
        let now = self.clock.now();
        let canceled = self.core.drain(now);
        for t in &canceled {
            self.emit_end(&t.uid, TaskState::Canceled, now, Some("canceled by drain"));
        }
        self.emit(self.spec.event(now, EventName::Drain));
        self.flush(true);
    }

    fn shutdown(&mut self) {
        if !self.core.is_draining() {
            self.drain();
        }
        for l in self.live.values() {
            l.cancel.store(true, Ordering::Relaxed);
        }
        let now = self.clock.now();
        let running: Vec<String> = self.live.keys().cloned().collect();
        for uid in &running {
            self.emit_end(uid, TaskState::Canceled, now, Some("canceled"));
        }
        self.live.clear();
        self.core.cancel_running(now);
        self.flush(true);
        self.emit(self.spec.event(now, EventName::Shutdown));
        self.emit(self.spec.event(now, EventName::WorkerStop).attr("reason", "shutdown"));
    }
}

/// Runs a worker in its own process: connects to the coordinator at
/// `connect`, uses the built-in function registry and writes this worker's
/// events to the log file `events`.
pub fn run_remote_worker(spec: WorkerSpec, connect: std::net::SocketAddr, events: &std::path::Path) -> Result<WorkerExit, String> {
    let log = crate::events::LogWriter::create(events).map_err(|e| format!("{}: {e}", events.display()))?;
    let stream = std::net::TcpStream::connect(connect).map_err(|e| format!("connect {connect}: {e}"))?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let reader = stream.try_clone().map_err(|e| e.to_string())?;
    let closer = stream.try_clone().map_err(|e| e.to_string())?;
    let sink = SharedSink::new(log);
    let exit = worker_loop(spec, Arc::new(FunctionRegistry::builtin()), reader, stream, sink, WallClock::new());
    let _ = closer.shutdown(std::net::Shutdown::Both);
    exit
}

fn spawn_reader<R: Read + Send + 'static>(mut reader: R, tx: Sender<Input>) {
    thread::spawn(move || loop {
        match read_message(&mut reader) {
            Ok(Some(m)) => {
                if tx.send(Input::Msg(m)).is_err() {
                    return;
                }
            }
            Ok(None) => {
                let _ = tx.send(Input::Closed(None));
                return;
            }
            Err(e) => {
                let _ = tx.send(Input::Closed(Some(e.to_string())));
                return;
            }
        }
    });
}

fn wait_ack(rx: &Receiver<Input>, timeout: Duration) -> Result<(), String> {
    match rx.recv_timeout(timeout) {
        Ok(Input::Msg(Message { body: Body::RegisterAck(_), .. })) => Ok(()),
        Ok(Input::Msg(m)) => Err(format!("expected REGISTER_ACK, got {:?}", m.message_type())),
        Ok(Input::Closed(e)) => Err(format!("connection closed during registration: {e:?}")),
        Ok(Input::Done { .. }) => Err("task completion before registration".into()),
        Err(_) => Err("no REGISTER_ACK from coordinator".into()),
    }
}

/// Serves one coordinator connection until SHUTDOWN or connection loss.
///
/// On TASK_BULK tasks start as slots allow and the rest queue locally.
/// Results go back in RESULT_BULK batches of at most 32, flushed at 32 or
/// after one second. DRAIN lets running tasks finish and cancels queued
/// ones; SHUTDOWN also cancels running ones. If the connection drops, running
/// tasks are allowed to finish before the loop returns.
pub fn worker_loop<R, W>(
    spec: WorkerSpec,
    registry: Arc<FunctionRegistry>,
    reader: R,
    writer: W,
    sink: SharedSink,
    clock: WallClock,
) -> Result<WorkerExit, String>
where
    R: Read + Send + 'static,
    W: Write,
{
    let (tx, rx) = crossbeam_channel::unbounded();
    spawn_reader(reader, tx.clone());
    let mut rt =
        Runtime { core: WorkerCore::new(spec.shape()), spec, registry, writer: Some(writer), sink, clock, tx, live: HashMap::new() };
    let reg = rt.core.register_message();
    rt.send(&reg);
    wait_ack(&rx, Duration::from_secs(30))?;
    rt.emit(rt.spec.start_event(rt.clock.now()));
    if let Some(m) = rt.core.credit_update() {
        rt.send(&m);
    }

    let mut lost = false;
    loop {
        if lost && rt.core.n_running() == 0 {
            rt.emit(rt.spec.event(rt.clock.now(), EventName::WorkerStop).attr("reason", "connection lost"));
            return Ok(WorkerExit::ConnectionLost);
        }
        match rx.recv_timeout(rt.next_wakeup()) {
            Ok(Input::Msg(m)) => match m.body {
                Body::TaskBulk(bulk) => {
                    let now = rt.clock.now();
                    debug!("{}: bulk of {} from {}", rt.spec.worker_id, bulk.tasks.len(), m.sender_id);
                    if rt.core.is_draining() {
                        for t in &bulk.tasks {
                            rt.emit_end(&t.uid, TaskState::Canceled, now, Some("worker draining"));
                        }
                    }
                    for s in rt.core.accept_bulk(bulk.tasks, now) {
                        rt.launch(s);
                    }
                }
                Body::Drain => rt.drain(),
                Body::Shutdown => {
                    rt.shutdown();
                    return Ok(WorkerExit::Shutdown);
                }
                Body::Heartbeat | Body::RegisterAck(_) => {}
                other => warn!("{}: unexpected message {other:?}", rt.spec.worker_id),
            },
            Ok(Input::Done { uid, outcome }) => rt.on_done(uid, outcome),
            Ok(Input::Closed(err)) => {
                if !lost {
                    warn!("{}: coordinator connection lost ({})", rt.spec.worker_id, err.unwrap_or_else(|| "eof".into()));
                }
                lost = true;
                rt.writer = None;
                // queued work can no longer be reported
                rt.core.drain(rt.clock.now());
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => unreachable!("runtime holds a sender"),
        }
        rt.check_timeouts();
        rt.flush(false);
    }
}
