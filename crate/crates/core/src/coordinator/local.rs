//! Local runtime: a pilot partitioned out of the host, and coordinators that
//! talk to real workers over loopback TCP.

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};
use thiserror::Error;

use crate::backend::{BackendError, LocalAdapter, NodePool};
use crate::coordinator::{CoordinatorCore, DispatchPolicy, JoinSummary, SubmitOutcome, WorkerState};
use crate::events::{EntityKind, EventName, EventRecord, SharedSink, WallClock};
use crate::model::{CoordinatorConfig, PilotDescription, TaskDescription, TaskResult, TaskState, ValidationError};
use crate::protocol::{read_message, write_message, Body, Message};
use crate::scheduler::{AgentScheduler, Placement, SchedulerError, SlotMap};
use crate::worker::{worker_loop, FunctionRegistry, WorkerSpec};

const REGISTRATION_TIMEOUT: Duration = Duration::from_secs(60);
const STOP_GRACE: Duration = Duration::from_secs(10);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// An active local pilot: its node pool, the agent scheduler that owns the
/// pool's slots, and the event log its components write to.
pub struct LocalPilot {
    desc: PilotDescription,
    pool: NodePool,
    scheduler: Mutex<AgentScheduler>,
    sink: SharedSink,
    clock: WallClock,
    t_active: f64,
    finished: AtomicBool,
}

impl LocalPilot {
    /// Acquires the pool and records it active. Bootstrap and staging are
    /// instantaneous on the local host.
    pub fn start(
        desc: &PilotDescription,
        adapter: &mut LocalAdapter,
        sink: SharedSink,
        clock: WallClock,
    ) -> Result<Arc<LocalPilot>, BackendError> {
        let pool = adapter.acquire(desc)?;
        let t = clock.now();
        let id = desc.pilot_id.as_str();
        sink.emit(
            EventRecord::new(t, EntityKind::Pilot, id, EventName::PilotActive)
                .attr("nodes", desc.n_nodes)
                .attr("cpn", desc.cores_per_node)
                .attr("gpn", desc.gpus_per_node)
                .attr("cores", desc.total_cores())
                .attr("gpus", desc.total_gpus())
                .attr("backend", "local"),
        );
        sink.emit(EventRecord::new(t, EntityKind::Pilot, id, EventName::BootstrapEnd));
        sink.emit(EventRecord::new(t, EntityKind::Pilot, id, EventName::StagingEnd));
        let scheduler = Mutex::new(AgentScheduler::new(SlotMap::for_pool(&pool)));
        Ok(Arc::new(LocalPilot { desc: desc.clone(), pool, scheduler, sink, clock, t_active: t, finished: AtomicBool::new(false) }))
    }

    pub fn description(&self) -> &PilotDescription {
        &self.desc
    }

    pub fn pool(&self) -> &NodePool {
        &self.pool
    }

    pub fn sink(&self) -> &SharedSink {
        &self.sink
    }

    pub fn clock(&self) -> WallClock {
        self.clock
    }

    /// Epoch seconds at which the walltime expires.
    pub fn deadline(&self) -> f64 {
        self.t_active + self.desc.walltime_s
    }

    pub fn free_cores(&self) -> u64 {
        lock(&self.scheduler).slots().total_free_cores()
    }

    fn place(&self, kind: EntityKind, uid: &str, cores: u32, gpus: u32) -> Result<Placement, SchedulerError> {
        let now = self.clock.now();
        let p = lock(&self.scheduler).slots_mut().place(uid, cores, gpus, now)?;
        self.sink.emit(
            EventRecord::new(now, kind, uid, EventName::Place)
                .attr("node", &self.pool.nodes[p.node_id].name)
                .attr("cores", cores)
                .attr("gpus", gpus),
        );
        Ok(p)
    }

    fn release(&self, kind: EntityKind, uid: &str) {
        if lock(&self.scheduler).release(uid).is_ok() {
            self.sink.emit(EventRecord::new(self.clock.now(), kind, uid, EventName::Release));
        }
    }

    /// Records the end of the pilot's lifetime. Later calls do nothing.
    pub fn finish(&self) {
        if !self.finished.swap(true, Ordering::SeqCst) {
            self.sink.emit(EventRecord::new(self.clock.now(), EntityKind::Pilot, self.desc.pilot_id.as_str(), EventName::Shutdown));
        }
    }
}

/// How workers are brought up.
#[derive(Clone)]
pub enum WorkerLaunch {
    /// In-process threads sharing the given registry and the pilot's log.
    Threads(Arc<FunctionRegistry>),
    /// One child process per worker, running `program worker ...` with the
    /// arguments from [`worker_command_args`]. Each writes its own event log
    /// into `log_dir`.
    Processes { program: PathBuf, log_dir: PathBuf },
}

/// Command-line arguments that start a worker process.
pub fn worker_command_args(spec: &WorkerSpec, connect: SocketAddr, events: &std::path::Path) -> Vec<String> {
    vec![
        "worker".into(),
        "--connect".into(),
        connect.to_string(),
        "--worker-id".into(),
        spec.worker_id.clone(),
        "--node-id".into(),
        spec.node_id.clone(),
        "--pilot-id".into(),
        spec.pilot_id.clone(),
        "--cores".into(),
        spec.core_slots.to_string(),
        "--gpus".into(),
        spec.gpu_slots.to_string(),
        "--prefetch".into(),
        spec.prefetch.to_string(),
        "--events".into(),
        events.display().to_string(),
    ]
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid coordinator config: {0}")]
    Config(#[from] ValidationError),
    #[error("cannot place {what}: {source}")]
    Placement { what: String, source: SchedulerError },
    #[error("only {registered} of {expected} workers registered")]
    Registration { registered: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

enum Input {
    Connected(u64, TcpStream),
    Msg(u64, Message),
    Closed(u64),
    Submit(Vec<TaskDescription>, Sender<SubmitOutcome>),
    Sever(String),
    Stop(Sender<()>),
}

#[derive(Debug, Default)]
struct Status {
    summary: JoinSummary,
    registered: usize,
    idle: bool,
    stopped: bool,
}

#[derive(Default)]
struct Shared {
    status: Mutex<Status>,
    changed: Condvar,
    results: Mutex<Vec<TaskResult>>,
}

enum WorkerHandle {
    Thread(JoinHandle<()>),
    Process(Child),
}

/// A running coordinator with its workers.
pub struct Coordinator {
    id: String,
    pilot: Arc<LocalPilot>,
    inputs: Sender<Input>,
    shared: Arc<Shared>,
    control: Option<JoinHandle<()>>,
    acceptor: Option<JoinHandle<()>>,
    closing: Arc<AtomicBool>,
    addr: SocketAddr,
    workers: Vec<(String, WorkerHandle)>,
    placed: Vec<(EntityKind, String)>,
    stopped: bool,
}

impl Coordinator {
    /// Places the coordinator and its workers on the pilot, launches the
    /// workers and waits until every one has registered.
    pub fn start(
        id: impl Into<String>,
        config: CoordinatorConfig,
        pilot: &Arc<LocalPilot>,
        launch: WorkerLaunch,
    ) -> Result<Coordinator, CoordinatorError> {
        Self::start_with_policy(id, config, pilot, launch, DispatchPolicy::CreditPull)
    }

    pub fn start_with_policy(
        id: impl Into<String>,
        config: CoordinatorConfig,
        pilot: &Arc<LocalPilot>,
        launch: WorkerLaunch,
        policy: DispatchPolicy,
    ) -> Result<Coordinator, CoordinatorError> {
        config.validate()?;
        let id = id.into();
        let clock = pilot.clock();
        let sink = pilot.sink().clone();
        let pilot_id = pilot.description().pilot_id.clone();
        sink.emit(EventRecord::new(clock.now(), EntityKind::Coordinator, id.as_str(), EventName::CoordStart).attr("pilot", &pilot_id));

        let mut placed: Vec<(EntityKind, String)> = Vec::new();
        let undo = |placed: &[(EntityKind, String)]| {
            for (kind, uid) in placed {
                pilot.release(*kind, uid);
            }
        };
        if config.coordinator_cores > 0 {
            if let Err(source) = pilot.place(EntityKind::Coordinator, &id, config.coordinator_cores, 0) {
                return Err(CoordinatorError::Placement { what: format!("coordinator {id}"), source });
            }
            placed.push((EntityKind::Coordinator, id.clone()));
        }
        let mut specs = Vec::with_capacity(config.n_workers);
        for i in 0..config.n_workers {
            let worker_id = format!("{id}.w{i:04}");
            match pilot.place(EntityKind::Worker, &worker_id, config.cpn, config.gpn) {
                Ok(p) => {
                    placed.push((EntityKind::Worker, worker_id.clone()));
                    specs.push(WorkerSpec {
                        worker_id,
                        node_id: pilot.pool().nodes[p.node_id].name.clone(),
                        pilot_id: pilot_id.clone(),
                        core_slots: config.cpn,
                        gpu_slots: config.gpn,
                        prefetch: config.prefetch,
                    });
                }
                Err(source) => {
                    undo(&placed);
                    return Err(CoordinatorError::Placement { what: format!("worker {i} of {}", config.n_workers), source });
                }
            }
        }

        let listener = match TcpListener::bind("127.0.0.1:0") {
            Ok(l) => l,
            Err(e) => {
                undo(&placed);
                return Err(e.into());
            }
        };
        let addr = listener.local_addr()?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let closing = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, tx.clone(), Arc::clone(&closing));

        let registry_names: Vec<String> = match &launch {
            WorkerLaunch::Threads(r) => r.names().map(str::to_string).collect(),
            WorkerLaunch::Processes { .. } => FunctionRegistry::builtin().names().map(str::to_string).collect(),
        };
        let core = CoordinatorCore::new(id.clone(), pilot_id.clone(), config.clone())
            .with_policy(policy)
            .with_functions(registry_names.iter().map(String::as_str));
        let shared = Arc::new(Shared::default());
        let control = {
            let ctl = Control {
                core,
                sink: sink.clone(),
                clock,
                conns: HashMap::new(),
                conn_worker: HashMap::new(),
                worker_conn: HashMap::new(),
                shared: Arc::clone(&shared),
                stopping: None,
                stop_replies: Vec::new(),
            };
            thread::Builder::new().name(format!("{id}-control")).spawn(move || ctl.run(rx))?
        };
        let t_ready = clock.now();
        sink.emit(EventRecord::new(t_ready, EntityKind::Coordinator, id.as_str(), EventName::CoordReady).attr("pilot", &pilot_id));
        sink.emit(EventRecord::new(t_ready, EntityKind::Coordinator, id.as_str(), EventName::PreprocessEnd).attr("pilot", &pilot_id));

        let mut coord = Coordinator {
            id,
            pilot: Arc::clone(pilot),
            inputs: tx,
            shared,
            control: Some(control),
            acceptor: Some(acceptor),
            closing,
            addr,
            workers: Vec::new(),
            placed,
            stopped: false,
        };
        for spec in specs {
            match coord.launch_worker(spec, &launch) {
                Ok(()) => {}
                Err(e) => {
                    coord.stop();
                    return Err(e.into());
                }
            }
        }
        let expected = config.n_workers;
        let deadline = Instant::now() + REGISTRATION_TIMEOUT;
        let mut st = lock(&coord.shared.status);
        while st.registered < expected {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                let registered = st.registered;
                drop(st);
                coord.stop();
                return Err(CoordinatorError::Registration { registered, expected });
            }
            st = coord.shared.changed.wait_timeout(st, left).unwrap_or_else(|p| p.into_inner()).0;
        }
        drop(st);
        Ok(coord)
    }

    fn launch_worker(&mut self, spec: WorkerSpec, launch: &WorkerLaunch) -> io::Result<()> {
        let worker_id = spec.worker_id.clone();
        let handle = match launch {
            WorkerLaunch::Threads(registry) => {
                let stream = TcpStream::connect(self.addr)?;
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                let closer = stream.try_clone()?;
                let registry = Arc::clone(registry);
                let sink = self.pilot.sink().clone();
                let clock = self.pilot.clock();
                let h = thread::Builder::new().name(worker_id.clone()).spawn(move || {
                    let id = spec.worker_id.clone();
                    if let Err(e) = worker_loop(spec, registry, reader, stream, sink, clock) {
                        warn!("{id}: {e}");
                    }
                    // the reader thread holds a clone; close for the coordinator to see EOF
                    let _ = closer.shutdown(Shutdown::Both);
                })?;
                WorkerHandle::Thread(h)
            }
            WorkerLaunch::Processes { program, log_dir } => {
                let events = log_dir.join(format!("events.{worker_id}.log"));
                let child = Command::new(program).args(worker_command_args(&spec, self.addr, &events)).stdin(Stdio::null()).spawn()?;
                WorkerHandle::Process(child)
            }
        };
        self.workers.push((worker_id, handle));
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn worker_ids(&self) -> impl Iterator<Item = &str> {
        self.workers.iter().map(|(id, _)| id.as_str())
    }

    /// Queues tasks for dispatch. Invalid tasks are rejected one by one; the
    /// rest are accepted.
    pub fn submit(&self, tasks: Vec<TaskDescription>) -> SubmitOutcome {
        let (reply, answer) = crossbeam_channel::bounded(1);
        let n = tasks.len();
        if self.inputs.send(Input::Submit(tasks, reply)).is_err() {
            return SubmitOutcome {
                accepted: 0,
                rejected: vec![(String::new(), ValidationError::new("coordinator", format!("stopped; {n} tasks dropped")))],
            };
        }
        answer.recv().unwrap_or_default()
    }

    pub fn summary(&self) -> JoinSummary {
        lock(&self.shared.status).summary
    }

    /// Blocks until every accepted task has finished or the pilot's walltime
    /// expires. At walltime the coordinator is stopped, which cancels what is
    /// still pending or running.
    pub fn join(&mut self) -> JoinSummary {
        let clock = self.pilot.clock();
        let deadline = self.pilot.deadline();
        let mut st = lock(&self.shared.status);
        loop {
            if st.idle || st.stopped {
                return st.summary;
            }
            let left = deadline - clock.now();
            if left <= 0.0 {
                break;
            }
            let wait = Duration::from_secs_f64(left.min(1.0));
            st = self.shared.changed.wait_timeout(st, wait).unwrap_or_else(|p| p.into_inner()).0;
        }
        drop(st);
        debug!("{}: walltime reached", self.id);
        self.stop();
        self.summary()
    }

    /// Results received so far, in arrival order.
    pub fn results(&self) -> Vec<TaskResult> {
        lock(&self.shared.results).clone()
    }

    /// Cuts the connection to one worker, as if its node had failed.
    pub fn sever_worker(&self, worker_id: &str) {
        let _ = self.inputs.send(Input::Sever(worker_id.to_string()));
    }

    /// Sends DRAIN then SHUTDOWN to every worker, cancels what is pending,
    /// waits for the workers to exit and releases their slots. Idempotent.
    pub fn stop(&mut self) {
        if self.stopped {
            return;
        }
        self.stopped = true;
        let (reply, done) = crossbeam_channel::bounded(1);
        if self.inputs.send(Input::Stop(reply)).is_ok() {
            let _ = done.recv();
        }
        if let Some(h) = self.control.take() {
            let _ = h.join();
        }
        self.closing.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for (id, handle) in self.workers.drain(..) {
            match handle {
                WorkerHandle::Thread(h) => {
                    if h.join().is_err() {
                        warn!("{id}: worker thread panicked");
                    }
                }
                WorkerHandle::Process(mut child) => reap(&id, &mut child),
            }
        }
        for (kind, uid) in self.placed.drain(..).rev() {
            self.pilot.release(kind, &uid);
        }
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.stop();
    }
}

fn reap(id: &str, child: &mut Child) {
    let deadline = Instant::now() + STOP_GRACE;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                if !status.success() {
                    warn!("{id}: worker process exited with {status}");
                }
                return;
            }
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
            _ => {
                warn!("{id}: worker process did not exit, killing it");
                let _ = child.kill();
                let _ = child.wait();
                return;
            }
        }
    }
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Input>, closing: Arc<AtomicBool>) -> JoinHandle<()> {
    let next_conn = AtomicU64::new(0);
    thread::spawn(move || {
        for stream in listener.incoming() {
            if closing.load(Ordering::SeqCst) {
                return;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let conn = next_conn.fetch_add(1, Ordering::Relaxed);
            let mut reader = match stream.try_clone() {
                Ok(r) => r,
                Err(e) => {
                    warn!("cannot clone connection: {e}");
                    continue;
                }
            };
            if tx.send(Input::Connected(conn, stream)).is_err() {
                return;
            }
            let tx = tx.clone();
            thread::spawn(move || loop {
                match read_message(&mut reader) {
                    Ok(Some(m)) => {
                        if tx.send(Input::Msg(conn, m)).is_err() {
                            return;
                        }
                    }
                    Ok(None) | Err(_) => {
                        let _ = tx.send(Input::Closed(conn));
                        return;
                    }
                }
            });
        }
    })
}

struct Control {
    core: CoordinatorCore,
    sink: SharedSink,
    clock: WallClock,
    conns: HashMap<u64, TcpStream>,
    conn_worker: HashMap<u64, String>,
    worker_conn: HashMap<String, u64>,
    shared: Arc<Shared>,
    stopping: Option<Instant>,
    stop_replies: Vec<Sender<()>>,
}

impl Control {
    fn run(mut self, rx: Receiver<Input>) {
        loop {
            let wait = match self.stopping {
                Some(deadline) => deadline.saturating_duration_since(Instant::now()),
                None => Duration::from_secs(1),
            };
            match rx.recv_timeout(wait) {
                Ok(input) => self.handle(input),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    self.begin_stop();
                    self.stopping = Some(Instant::now());
                }
            }
            self.dispatch();
            self.give_up_without_workers();
            if let Some(deadline) = self.stopping {
                if self.conns.is_empty() || Instant::now() >= deadline {
                    break;
                }
            }
            self.publish(false);
        }
        self.finish();
    }

    fn handle(&mut self, input: Input) {
        match input {
            Input::Connected(conn, stream) => {
                self.conns.insert(conn, stream);
            }
            Input::Msg(conn, m) => self.on_message(conn, m),
            Input::Closed(conn) => {
                self.conns.remove(&conn);
                if let Some(worker) = self.conn_worker.remove(&conn) {
                    self.worker_conn.remove(&worker);
                    if self.stopping.is_some() {
                        self.core.mark_stopped(&worker);
                    } else {
                        warn!("{}: lost worker {worker}", self.core.id());
                        let now = self.clock.now();
                        let failed = self.core.worker_lost(&worker, now, &mut self.sink);
                        lock(&self.shared.results).extend(failed);
                    }
                }
            }
            Input::Submit(tasks, reply) => {
                let out = if self.stopping.is_some() {
                    SubmitOutcome {
                        accepted: 0,
                        rejected: tasks.iter().map(|t| (t.uid.clone(), ValidationError::new("coordinator", "stopping"))).collect(),
                    }
                } else {
                    let now = self.clock.now();
                    self.core.submit(tasks, now, &mut self.sink)
                };
                // joiners must not see the idle state from before the submit
                self.publish(false);
                let _ = reply.send(out);
            }
            Input::Sever(worker) => {
                if let Some(conn) = self.worker_conn.get(&worker) {
                    if let Some(s) = self.conns.get(conn) {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                }
            }
            Input::Stop(reply) => {
                self.stop_replies.push(reply);
                if self.stopping.is_none() {
                    self.begin_stop();
                }
            }
        }
    }

    fn on_message(&mut self, conn: u64, m: Message) {
        let sender = m.sender_id.clone();
        match m.body {
            Body::Register(reg) => {
                let ack = self.core.on_register(&reg);
                self.conn_worker.insert(conn, reg.worker_id.clone());
                self.worker_conn.insert(reg.worker_id, conn);
                self.send_conn(conn, &ack);
                lock(&self.shared.status).registered = self.core.n_registered();
                self.shared.changed.notify_all();
            }
            Body::Credit(c) => self.core.on_credit(&sender, c),
            Body::ResultBulk(bulk) => {
                let results = self.core.on_results(&sender, bulk.results);
                lock(&self.shared.results).extend(results);
            }
            Body::Heartbeat => {}
            other => warn!("{}: unexpected message from {sender}: {other:?}", self.core.id()),
        }
    }

    fn send_conn(&mut self, conn: u64, m: &Message) {
        let Some(stream) = self.conns.get_mut(&conn) else { return };
        if let Err(e) = write_message(stream, m) {
            debug!("{}: send on connection {conn} failed: {e}", self.core.id());
            let _ = stream.shutdown(Shutdown::Both);
        }
    }

    fn dispatch(&mut self) {
        if self.stopping.is_some() {
            return;
        }
        loop {
            let now = self.clock.now();
            let sent = self.core.dispatch_step(now, &mut self.sink);
            if sent.is_empty() {
                break;
            }
            for (worker, m) in sent {
                match self.worker_conn.get(&worker).copied() {
                    Some(conn) => self.send_conn(conn, &m),
                    None => warn!("{}: no connection for {worker}", self.core.id()),
                }
            }
        }
    }

    // Once every expected worker has registered and been lost, nothing
    // pending can ever run.
    fn give_up_without_workers(&mut self) {
        let cfg = self.core.config();
        let workers = self.core.workers();
        if self.stopping.is_none()
            && self.core.n_pending() > 0
            && workers.len() >= cfg.n_workers
            && workers.iter().all(|w| w.state != WorkerState::Active)
        {
            warn!("{}: no workers left, canceling pending tasks", self.core.id());
            let now = self.clock.now();
            self.core.cancel_pending(now, &mut self.sink);
        }
    }

    fn begin_stop(&mut self) {
        let now = self.clock.now();
        self.core.cancel_pending(now, &mut self.sink);
        let conns: Vec<u64> = self.worker_conn.values().copied().collect();
        for conn in conns {
            let drain = self.core.message(Body::Drain);
            self.send_conn(conn, &drain);
            let shutdown = self.core.message(Body::Shutdown);
            self.send_conn(conn, &shutdown);
        }
        self.stopping = Some(Instant::now() + STOP_GRACE);
    }

    fn publish(&self, stopped: bool) {
        let mut st = lock(&self.shared.status);
        st.summary = self.core.summary();
        st.idle = self.core.is_idle();
        st.stopped = stopped;
        drop(st);
        self.shared.changed.notify_all();
    }

    fn finish(&mut self) {
        let now = self.clock.now();
        let abandoned = self.core.abandon_outstanding(TaskState::Canceled, "coordinator stopped", now, &mut self.sink);
        lock(&self.shared.results).extend(abandoned);
        for s in self.conns.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let s = self.core.summary();
        self.sink.emit(
            EventRecord::new(now, EntityKind::Coordinator, self.core.id(), EventName::CoordStop)
                .attr("pilot", self.core.pilot_id())
                .attr("submitted", s.submitted)
                .attr("done", s.done)
                .attr("failed", s.failed)
                .attr("canceled", s.canceled),
        );
        self.publish(true);
        for r in self.stop_replies.drain(..) {
            let _ = r.send(());
        }
    }
}
