use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::{Value, DURATION_TAG};

/// Handed to every function call. Long-running functions must poll
/// [`TaskContext::is_canceled`] or sleep through [`TaskContext::sleep`];
/// that is the only way a timeout or shutdown can stop them.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub uid: String,
    cancel: Arc<AtomicBool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupted;

impl TaskContext {
    pub fn new(uid: impl Into<String>, cancel: Arc<AtomicBool>) -> Self {
        TaskContext { uid: uid.into(), cancel }
    }

    pub fn detached(uid: impl Into<String>) -> Self {
        TaskContext::new(uid, Arc::new(AtomicBool::new(false)))
    }

    pub fn is_canceled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }

    /// Sleeps for `secs`, waking early if the task is canceled.
    pub fn sleep(&self, secs: f64) -> Result<(), Interrupted> {
        let until = Instant::now() + Duration::from_secs_f64(secs.max(0.0));
        loop {
            if self.is_canceled() {
                return Err(Interrupted);
            }
            let now = Instant::now();
            if now >= until {
                return Ok(());
            }
            std::thread::sleep((until - now).min(Duration::from_millis(5)));
        }
    }
}

pub type FunctionImpl = dyn Fn(&Value, &TaskContext) -> Result<Value, String> + Send + Sync;

#[derive(Clone)]
pub struct FunctionEntry {
    /// Argument keys that must be present in the call's argument map.
    pub required_args: Vec<String>,
    pub imp: Arc<FunctionImpl>,
}

impl fmt::Debug for FunctionEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionEntry").field("required_args", &self.required_args).finish_non_exhaustive()
    }
}

/// Named functions a worker can run in-process. Read-only once a worker
/// has started.
#[derive(Debug, Clone, Default)]
pub struct FunctionRegistry {
    entries: BTreeMap<String, FunctionEntry>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, required_args: &[&str], f: F) -> &mut Self
    where
        F: Fn(&Value, &TaskContext) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.entries.insert(
            name.to_string(),
            FunctionEntry { required_args: required_args.iter().map(|s| s.to_string()).collect(), imp: Arc::new(f) },
        );
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&FunctionEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Checks an argument tree against the entry's required keys.
    pub fn check_args(&self, name: &str, args: &Value) -> Result<(), String> {
        let entry = self.get(name).ok_or_else(|| format!("unknown function {name:?}"))?;
        for key in &entry.required_args {
            if args.get(key).is_none() {
                return Err(format!("{name}: missing argument {key:?}"));
            }
        }
        Ok(())
    }

    /// Functions every worker ships with, including the docking surrogate
    /// used by generated workloads.
    pub fn builtin() -> Self {
        let mut r = FunctionRegistry::new();
        r.register("noop", &[], |_, _| Ok(Value::Null))
            .register("echo", &[], |args, _| Ok(args.clone()))
            .register("sleep", &["t"], |args, ctx| {
                ctx.sleep(seconds(args, "t")?).map_err(|_| "interrupted".to_string())?;
                Ok(Value::Null)
            })
            .register("sleep_then_ok", &["t"], |args, ctx| {
                ctx.sleep(seconds(args, "t")?).map_err(|_| "interrupted".to_string())?;
                Ok(Value::from("ok"))
            })
            .register("dock", &[DURATION_TAG], |args, ctx| {
                let d = seconds(args, DURATION_TAG)?;
                ctx.sleep(d).map_err(|_| "interrupted".to_string())?;
                Ok(serde_json::json!({ "score": -d }))
            })
            .register("fail", &[], |args, _| Err(args.get("message").and_then(Value::as_str).unwrap_or("failed").to_string()))
            .register("panic", &[], |args, _| panic!("{}", args.get("message").and_then(Value::as_str).unwrap_or("function panicked")));
        r
    }
}

fn seconds(args: &Value, key: &str) -> Result<f64, String> {
    let v = args.get(key).ok_or_else(|| format!("missing argument {key:?}"))?;
    let s = v.as_f64().or_else(|| v.as_str().and_then(|s| s.parse().ok())).ok_or_else(|| format!("argument {key:?} is not a number"))?;
    if s.is_finite() && s >= 0.0 {
        Ok(s)
    } else {
        Err(format!("argument {key:?} must be a non-negative number"))
    }
}
