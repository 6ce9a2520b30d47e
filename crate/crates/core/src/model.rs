//! Domain types shared by every part of the framework: task descriptions,
//! the task lifecycle state machine, results, pilot and coordinator
//! configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serialized argument / return value tree for function tasks.
pub type Value = serde_json::Value;

/// Key of the synthetic duration (seconds), both as a tag and as the
/// argument of the docking surrogate function.
pub const DURATION_TAG: &str = "duration";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Function,
    Executable,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Function => "FUNCTION",
            TaskKind::Executable => "EXECUTABLE",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FUNCTION" => Ok(TaskKind::Function),
            "EXECUTABLE" => Ok(TaskKind::Executable),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// A call into the worker's function registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub function_name: String,
    #[serde(default)]
    pub args: Value,
}

/// A child process to spawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecSpec {
    pub argv: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub capture_output: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Function(FunctionCall),
    Executable(ExecSpec),
}

/// What to run, and with how many cores and GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub uid: String,
    #[serde(flatten)]
    pub payload: Payload,
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    /// Synthetic duration for generated workloads. The simulated backend
    /// ends the task after this long; local payloads sleep for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl TaskDescription {
    pub fn function(uid: impl Into<String>, name: impl Into<String>, args: Value) -> Self {
        TaskDescription {
            uid: uid.into(),
            payload: Payload::Function(FunctionCall { function_name: name.into(), args }),
            cores: 1,
            gpus: 0,
            timeout_s: None,
            duration_s: None,
            tags: BTreeMap::new(),
        }
    }

    pub fn executable<S: Into<String>>(uid: impl Into<String>, argv: impl IntoIterator<Item = S>) -> Self {
        TaskDescription {
            uid: uid.into(),
            payload: Payload::Executable(ExecSpec {
                argv: argv.into_iter().map(Into::into).collect(),
                env: BTreeMap::new(),
                capture_output: false,
            }),
            cores: 1,
            gpus: 0,
            timeout_s: None,
            duration_s: None,
            tags: BTreeMap::new(),
        }
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores = cores;
        self
    }

    pub fn with_gpus(mut self, gpus: u32) -> Self {
        self.gpus = gpus;
        self
    }

    pub fn with_timeout(mut self, timeout_s: f64) -> Self {
        self.timeout_s = Some(timeout_s);
        self
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.duration_s = Some(seconds);
        self
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn kind(&self) -> TaskKind {
        match self.payload {
            Payload::Function(_) => TaskKind::Function,
            Payload::Executable(_) => TaskKind::Executable,
        }
    }

    /// Synthetic duration: the `duration_s` field, else a `duration` tag.
    pub fn synthetic_duration(&self) -> Option<f64> {
        self.duration_s.or_else(|| self.tags.get(DURATION_TAG).and_then(|d| d.parse().ok()))
    }

    /// Structural checks that do not need a function registry.
    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_task(self, |_| true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid task field `{field}`: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ValidationError { field, reason: reason.into() }
    }
}

/// Checks every task invariant. `is_registered` answers whether a function
/// name is known to the workers that will run it.
pub fn validate_task(t: &TaskDescription, is_registered: impl Fn(&str) -> bool) -> Result<(), ValidationError> {
    if t.uid.is_empty() {
        return Err(ValidationError::new("uid", "must not be empty"));
    }
    if t.cores < 1 {
        return Err(ValidationError::new("cores", "must be at least 1"));
    }
    if let Some(timeout) = t.timeout_s {
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(ValidationError::new("timeout_s", "must be a positive number of seconds"));
        }
    }
    match &t.payload {
        Payload::Function(call) => {
            if call.function_name.is_empty() {
                return Err(ValidationError::new("function_name", "must not be empty"));
            }
            if !is_registered(&call.function_name) {
                return Err(ValidationError::new("function_name", format!("no registered function named {:?}", call.function_name)));
            }
        }
        Payload::Executable(spec) => match spec.argv.first() {
            None => return Err(ValidationError::new("argv", "must not be empty")),
            Some(a) if a.is_empty() => return Err(ValidationError::new("argv", "argv[0] must not be empty")),
            Some(_) => {}
        },
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Submitted,
    Scheduled,
    Dispatched,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::Canceled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Submitted => "SUBMITTED",
            TaskState::Scheduled => "SCHEDULED",
            TaskState::Dispatched => "DISPATCHED",
            TaskState::Running => "RUNNING",
            TaskState::Done => "DONE",
            TaskState::Failed => "FAILED",
            TaskState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "SUBMITTED" => TaskState::Submitted,
            "SCHEDULED" => TaskState::Scheduled,
            "DISPATCHED" => TaskState::Dispatched,
            "RUNNING" => TaskState::Running,
            "DONE" => TaskState::Done,
            "FAILED" => TaskState::Failed,
            "CANCELED" => TaskState::Canceled,
            other => return Err(format!("unknown task state {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    Schedule,
    Dispatch,
    Start,
    Succeed,
    Fail,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition from {from} on {event:?}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

/// Advances the task state machine by one lifecycle event.
pub fn transition(s: TaskState, e: LifecycleEvent) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;
    let next = match (s, e) {
        (from, _) if from.is_terminal() => None,
        (_, E::Cancel) => Some(S::Canceled),
        (S::Submitted, E::Schedule) => Some(S::Scheduled),
        (S::Scheduled, E::Dispatch) => Some(S::Dispatched),
        (S::Dispatched, E::Start) => Some(S::Running),
        (S::Running, E::Succeed) => Some(S::Done),
        (S::Running, E::Fail) => Some(S::Failed),
        _ => None,
    };
    next.ok_or(IllegalTransition { from: s, event: e })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub submit: f64,
    pub schedule: f64,
    pub dispatch: f64,
    pub start: f64,
    pub end: f64,
}

impl Timestamps {
    pub fn is_monotone(&self) -> bool {
        self.submit <= self.schedule && self.schedule <= self.dispatch && self.dispatch <= self.start && self.start <= self.end
    }

    /// Pulls later stamps forward so the sequence is non-decreasing. Used when
    /// stamps come from clocks on different processes.
    pub fn make_monotone(&mut self) {
        self.schedule = self.schedule.max(self.submit);
        self.dispatch = self.dispatch.max(self.schedule);
        self.start = self.start.max(self.dispatch);
        self.end = self.end.max(self.start);
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub uid: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    /// A function that returned JSON `null` still has a value.
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present_value")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
    pub timestamps: Timestamps,
    pub worker_id: String,
    pub node_id: String,
    pub kind: TaskKind,
}

impl TaskResult {
    pub fn duration(&self) -> f64 {
        self.timestamps.duration()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Local,
    Sim,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Backend::Local),
            "sim" => Ok(Backend::Sim),
            other => Err(format!("unknown backend {other:?} (expected local or sim)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Local => "local",
            Backend::Sim => "sim",
        })
    }
}

fn present_value<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

fn default_bulk_size() -> usize {
    128
}

/// How a coordinator launches and feeds its workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    pub n_workers: usize,
    /// Cores per worker; each worker is placed on exactly one node.
    pub cpn: u32,
    /// GPUs per worker.
    #[serde(default)]
    pub gpn: u32,
    #[serde(default = "default_bulk_size")]
    pub bulk_size: usize,
    /// Cores reserved for the coordinator process itself. Zero means it runs
    /// alongside the agent and holds no slots.
    #[serde(default)]
    pub coordinator_cores: u32,
    /// Extra core credit a worker advertises beyond its free slots, letting
    /// the coordinator keep a local queue filled on the worker.
    #[serde(default)]
    pub prefetch: u32,
}

impl CoordinatorConfig {
    pub fn new(n_workers: usize, cpn: u32) -> Self {
        CoordinatorConfig { n_workers, cpn, gpn: 0, bulk_size: 128, coordinator_cores: 0, prefetch: 0 }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.n_workers < 1 {
            return Err(ValidationError::new("n_workers", "must be at least 1"));
        }
        if self.cpn < 1 {
            return Err(ValidationError::new("cpn", "must be at least 1"));
        }
        if self.bulk_size < 1 {
            return Err(ValidationError::new("bulk_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Whether a single task can ever run on a worker of this shape.
    pub fn fits_worker(&self, t: &TaskDescription) -> bool {
        t.cores <= self.cpn && t.gpus <= self.gpn
    }
}

/// The resource request for one pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDescription {
    pub pilot_id: String,
    pub n_nodes: usize,
    pub cores_per_node: u32,
    #[serde(default)]
    pub gpus_per_node: u32,
    pub walltime_s: f64,
    #[serde(default)]
    pub backend: Backend,
    /// Queue wait before the pool becomes active (simulated backend only).
    #[serde(default)]
    pub available_at_s: f64,
    #[serde(default)]
    pub coordinators: Vec<CoordinatorConfig>,
}

impl PilotDescription {
    pub fn new(pilot_id: impl Into<String>, n_nodes: usize, cores_per_node: u32, backend: Backend) -> Self {
        PilotDescription {
            pilot_id: pilot_id.into(),
            n_nodes,
            cores_per_node,
            gpus_per_node: 0,
            walltime_s: 86_400.0,
            backend,
            available_at_s: 0.0,
            coordinators: Vec::new(),
        }
    }

    pub fn total_cores(&self) -> u64 {
        self.n_nodes as u64 * self.cores_per_node as u64
    }

    pub fn total_gpus(&self) -> u64 {
        self.n_nodes as u64 * self.gpus_per_node as u64
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.pilot_id.is_empty() {
            return Err(ValidationError::new("pilot_id", "must not be empty"));
        }
        if self.n_nodes < 1 {
            return Err(ValidationError::new("n_nodes", "must be at least 1"));
        }
        if self.cores_per_node < 1 {
            return Err(ValidationError::new("cores_per_node", "must be at least 1"));
        }
        if !(self.walltime_s.is_finite() && self.walltime_s > 0.0) {
            return Err(ValidationError::new("walltime_s", "must be positive"));
        }
        if !(self.available_at_s.is_finite() && self.available_at_s >= 0.0) {
            return Err(ValidationError::new("available_at_s", "must be >= 0"));
        }
        for c in &self.coordinators {
            c.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registered(name: &str) -> bool {
        name == "noop"
    }

    #[test]
    fn minimal_executable_is_valid() {
        let t = TaskDescription::executable("t1", ["/bin/true"]);
        assert_eq!(validate_task(&t, registered), Ok(()));
    }

    #[test]
    fn empty_argv_is_rejected() {
        let t = TaskDescription::executable("t2", Vec::<String>::new());
        assert_eq!(validate_task(&t, registered).unwrap_err().field, "argv");
    }

    #[test]
    fn zero_cores_is_rejected() {
        let t = TaskDescription::function("t3", "noop", Value::Null).with_cores(0);
        assert_eq!(validate_task(&t, registered).unwrap_err().field, "cores");
    }

    #[test]
    fn unregistered_function_is_rejected() {
        let t = TaskDescription::function("t4", "missing", Value::Null);
        assert_eq!(validate_task(&t, registered).unwrap_err().field, "function_name");
    }

    #[test]
    fn bad_timeout_is_rejected() {
        let t = TaskDescription::function("t5", "noop", Value::Null).with_timeout(0.0);
        assert_eq!(validate_task(&t, registered).unwrap_err().field, "timeout_s");
    }

    #[test]
    fn forward_edges() {
        assert_eq!(transition(TaskState::Submitted, LifecycleEvent::Schedule), Ok(TaskState::Scheduled));
        assert_eq!(transition(TaskState::Scheduled, LifecycleEvent::Dispatch), Ok(TaskState::Dispatched));
        assert_eq!(transition(TaskState::Dispatched, LifecycleEvent::Start), Ok(TaskState::Running));
        assert_eq!(transition(TaskState::Running, LifecycleEvent::Succeed), Ok(TaskState::Done));
        assert_eq!(transition(TaskState::Running, LifecycleEvent::Fail), Ok(TaskState::Failed));
    }

    #[test]
    fn terminal_absorbs_nothing() {
        let err = transition(TaskState::Done, LifecycleEvent::Start).unwrap_err();
        assert_eq!(err.from, TaskState::Done);
        assert!(transition(TaskState::Canceled, LifecycleEvent::Cancel).is_err());
    }

    #[test]
    fn cancel_from_running() {
        assert_eq!(transition(TaskState::Running, LifecycleEvent::Cancel), Ok(TaskState::Canceled));
    }

    #[test]
    fn skipping_states_is_illegal() {
        assert!(transition(TaskState::Submitted, LifecycleEvent::Start).is_err());
        assert!(transition(TaskState::Scheduled, LifecycleEvent::Succeed).is_err());
    }

    #[test]
    fn task_description_json_shape() {
        let t = TaskDescription::executable("t1", ["/bin/true"]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"uid":"t1","kind":"EXECUTABLE","payload":{"argv":["/bin/true"],"capture_output":false},"cores":1,"gpus":0}"#);
        let back: TaskDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn make_monotone_repairs_skew() {
        let mut ts = Timestamps { submit: 5.0, schedule: 4.0, dispatch: 6.0, start: 5.5, end: 7.0 };
        ts.make_monotone();
        assert!(ts.is_monotone());
        assert_eq!(ts.start, 6.0);
    }

    fn any_event() -> impl Strategy<Value = LifecycleEvent> {
        prop_oneof![
            Just(LifecycleEvent::Schedule),
            Just(LifecycleEvent::Dispatch),
            Just(LifecycleEvent::Start),
            Just(LifecycleEvent::Succeed),
            Just(LifecycleEvent::Fail),
            Just(LifecycleEvent::Cancel),
        ]
    }

    proptest! {
        #[test]
        fn at_most_one_terminal_state(events in proptest::collection::vec(any_event(), 0..40)) {
            let mut state = TaskState::Submitted;
            let mut terminals = 0;
            for e in events {
                if let Ok(next) = transition(state, e) {
                    if next.is_terminal() {
                        terminals += 1;
                    }
                    state = next;
                }
            }
            prop_assert!(terminals <= 1);
        }
    }
}
