//! Running one task: in-process function calls and supervised child
//! processes.

use std::io::Read;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::events::WallClock;
use crate::model::{ExecSpec, FunctionCall, TaskState, Value};
use crate::worker::registry::{FunctionRegistry, TaskContext};

/// Slack allowed past `timeout_s` before a timed-out task is reported.
pub const LOCAL_TIMEOUT_GRACE_S: f64 = 1.0;

pub const TIMEOUT_TEXT: &str = "timeout";

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub state: TaskState,
    pub exit_code: Option<i32>,
    pub value: Option<Value>,
    pub error_text: Option<String>,
    pub start: f64,
    pub end: f64,
}

impl ExecOutcome {
    fn failed(error: impl Into<String>, start: f64, end: f64) -> Self {
        ExecOutcome { state: TaskState::Failed, exit_code: None, value: None, error_text: Some(error.into()), start, end }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "function panicked".to_string()
    }
}

/// Calls a registered function on the current thread. Panics are caught and
/// turned into a failure.
pub fn call_function(registry: &FunctionRegistry, call: &FunctionCall, ctx: &TaskContext) -> (TaskState, Option<Value>, Option<String>) {
    let Some(entry) = registry.get(&call.function_name) else {
        return (TaskState::Failed, None, Some(format!("unknown function {:?}", call.function_name)));
    };
    if let Err(e) = registry.check_args(&call.function_name, &call.args) {
        return (TaskState::Failed, None, Some(e));
    }
    let imp = Arc::clone(&entry.imp);
    match panic::catch_unwind(AssertUnwindSafe(|| imp(&call.args, ctx))) {
        Ok(Ok(v)) => (TaskState::Done, Some(v), None),
        Ok(Err(_)) if ctx.is_canceled() => (TaskState::Canceled, None, Some("canceled".into())),
        Ok(Err(e)) => (TaskState::Failed, None, Some(e)),
        Err(p) => (TaskState::Failed, None, Some(format!("panic: {}", panic_text(p)))),
    }
}

/// Runs a function task on a helper thread and waits for it, enforcing the
/// timeout. A function that ignores cancellation keeps running detached
/// after its timeout has been reported.
pub fn execute_function(
    registry: &Arc<FunctionRegistry>,
    uid: &str,
    call: &FunctionCall,
    timeout_s: Option<f64>,
    clock: &WallClock,
) -> ExecOutcome {
    let start = clock.now();
    if !registry.contains(&call.function_name) {
        return ExecOutcome::failed(format!("unknown function {:?}", call.function_name), start, clock.now());
    }
    let cancel = Arc::new(AtomicBool::new(false));
    let ctx = TaskContext::new(uid, Arc::clone(&cancel));
    let (tx, rx) = crossbeam_channel::bounded(1);
    let reg = Arc::clone(registry);
    let call = call.clone();
    thread::spawn(move || {
        let _ = tx.send(call_function(&reg, &call, &ctx));
    });
    let outcome = match timeout_s {
        Some(t) => rx.recv_timeout(Duration::from_secs_f64(t)).ok(),
        None => rx.recv().ok(),
    };
    match outcome {
        Some((state, value, error_text)) => ExecOutcome { state, exit_code: None, value, error_text, start, end: clock.now() },
        None => {
            cancel.store(true, Ordering::Relaxed);
            ExecOutcome::failed(TIMEOUT_TEXT, start, clock.now())
        }
    }
}

#[cfg(unix)]
fn kill_tree(child: &mut Child) {
    // the child leads its own process group; take the whole group down
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut Child) {
    let _ = child.kill();
}

fn spawn_child(spec: &ExecSpec) -> std::io::Result<Child> {
    let mut cmd = Command::new(&spec.argv[0]);
    cmd.args(&spec.argv[1..]).envs(&spec.env).stdin(Stdio::null());
    if spec.capture_output {
        cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
    } else {
        cmd.stdout(Stdio::null()).stderr(Stdio::null());
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    cmd.spawn()
}

fn drain_pipe<R: Read + Send + 'static>(pipe: Option<R>) -> Option<thread::JoinHandle<String>> {
    pipe.map(|mut p| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = p.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        })
    })
}

/// Spawns `spec` and supervises it until exit, timeout or cancellation.
/// Blocks the calling thread.
pub fn execute_executable(spec: &ExecSpec, timeout_s: Option<f64>, cancel: &AtomicBool, clock: &WallClock) -> ExecOutcome {
    let start = clock.now();
    if spec.argv.first().is_none_or(|a| a.is_empty()) {
        return ExecOutcome::failed("spawn error: empty argv", start, clock.now());
    }
    let mut child = match spawn_child(spec) {
        Ok(c) => c,
        Err(e) => return ExecOutcome::failed(format!("spawn error: {}: {e}", spec.argv[0]), start, clock.now()),
    };
    let stdout = drain_pipe(child.stdout.take());
    let stderr = drain_pipe(child.stderr.take());
    let began = Instant::now();
    let deadline = timeout_s.map(|t| began + Duration::from_secs_f64(t));
    let mut poll = Duration::from_micros(500);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Ok(status),
            Ok(None) => {}
            Err(e) => break Err(format!("wait error: {e}")),
        }
        if cancel.load(Ordering::Relaxed) {
            kill_tree(&mut child);
            let _ = child.wait();
            return ExecOutcome {
                state: TaskState::Canceled,
                exit_code: None,
                value: None,
                error_text: Some("canceled".into()),
                start,
                end: clock.now(),
            };
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            kill_tree(&mut child);
            let _ = child.wait();
            return ExecOutcome::failed(TIMEOUT_TEXT, start, clock.now());
        }
        thread::sleep(poll);
        poll = (poll * 2).min(Duration::from_millis(4));
    };
    let end = clock.now();
    let status = match status {
        Ok(s) => s,
        Err(e) => return ExecOutcome::failed(e, start, end),
    };
    let value = if spec.capture_output {
        let out = stdout.and_then(|h| h.join().ok()).unwrap_or_default();
        let err = stderr.and_then(|h| h.join().ok()).unwrap_or_default();
        Some(serde_json::json!({ "stdout": out, "stderr": err }))
    } else {
        None
    };
    match status.code() {
        Some(0) => ExecOutcome { state: TaskState::Done, exit_code: Some(0), value, error_text: None, start, end },
        Some(code) => ExecOutcome {
            state: TaskState::Failed,
            exit_code: Some(code),
            value,
            error_text: Some(format!("exit status {code}")),
            start,
            end,
        },
        None => {
            ExecOutcome { state: TaskState::Failed, exit_code: None, value, error_text: Some(format!("terminated: {status}")), start, end }
        }
    }
}
