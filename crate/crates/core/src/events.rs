//! Append-only lifecycle event records and the tab-separated event log.
//!
//! One record per line:
//!
//! ```text
//! t <TAB> entity_kind <TAB> entity_id <TAB> event [<TAB> key=value]*
//! ```
//!
//! `t` is written in shortest round-trip form, so parsing a log reproduces
//! the in-memory timestamps bit for bit. Attribute values escape `\`, tab and
//! newline as `\\`, `\t`, `\n`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Pilot,
    Coordinator,
    Worker,
    Task,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Pilot => "pilot",
            EntityKind::Coordinator => "coordinator",
            EntityKind::Worker => "worker",
            EntityKind::Task => "task",
        }
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pilot" => EntityKind::Pilot,
            "coordinator" => EntityKind::Coordinator,
            "worker" => EntityKind::Worker,
            "task" => EntityKind::Task,
            other => return Err(format!("unknown entity kind {other:?}")),
        })
    }
}

/// Event names. `Other` keeps unknown names from foreign logs intact.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EventName {
    PilotActive,
    BootstrapEnd,
    StagingEnd,
    CoordStart,
    CoordReady,
    PreprocessEnd,
    CoordStop,
    WorkerStart,
    WorkerStop,
    TaskSubmit,
    TaskSchedule,
    TaskDispatch,
    TaskStart,
    TaskEnd,
    Place,
    Release,
    Drain,
    Shutdown,
    Other(String),
}

impl EventName {
    pub fn as_str(&self) -> &str {
        match self {
            EventName::PilotActive => "pilot_active",
            EventName::BootstrapEnd => "bootstrap_end",
            EventName::StagingEnd => "staging_end",
            EventName::CoordStart => "coord_start",
            EventName::CoordReady => "coord_ready",
            EventName::PreprocessEnd => "preprocess_end",
            EventName::CoordStop => "coord_stop",
            EventName::WorkerStart => "worker_start",
            EventName::WorkerStop => "worker_stop",
            EventName::TaskSubmit => "task_submit",
            EventName::TaskSchedule => "task_schedule",
            EventName::TaskDispatch => "task_dispatch",
            EventName::TaskStart => "task_start",
            EventName::TaskEnd => "task_end",
            EventName::Place => "place",
            EventName::Release => "release",
            EventName::Drain => "drain",
            EventName::Shutdown => "shutdown",
            EventName::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> EventName {
        match s {
            "pilot_active" => EventName::PilotActive,
            "bootstrap_end" => EventName::BootstrapEnd,
            "staging_end" => EventName::StagingEnd,
            "coord_start" => EventName::CoordStart,
            "coord_ready" => EventName::CoordReady,
            "preprocess_end" => EventName::PreprocessEnd,
            "coord_stop" => EventName::CoordStop,
            "worker_start" => EventName::WorkerStart,
            "worker_stop" => EventName::WorkerStop,
            "task_submit" => EventName::TaskSubmit,
            "task_schedule" => EventName::TaskSchedule,
            "task_dispatch" => EventName::TaskDispatch,
            "task_start" => EventName::TaskStart,
            "task_end" => EventName::TaskEnd,
            "place" => EventName::Place,
            "release" => EventName::Release,
            "drain" => EventName::Drain,
            "shutdown" => EventName::Shutdown,
            other => EventName::Other(other.to_string()),
        }
    }
}

impl fmt::Display for EventName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timestamped lifecycle event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub entity_kind: EntityKind,
    pub entity_id: String,
    pub event: EventName,
    pub attrs: Vec<(String, String)>,
}

impl EventRecord {
    pub fn new(t: f64, entity_kind: EntityKind, entity_id: impl Into<String>, event: EventName) -> Self {
        EventRecord { t, entity_kind, entity_id: entity_id.into(), event, attrs: Vec::new() }
    }

    pub fn attr(mut self, key: &str, value: impl ToString) -> Self {
        self.attrs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    /// Writes the record as one log line, including the trailing newline.
    pub fn write_line<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "{}\t{}\t{}\t{}", self.t, self.entity_kind.as_str(), self.entity_id, self.event)?;
        for (k, v) in &self.attrs {
            w.write_all(b"\t")?;
            w.write_all(k.as_bytes())?;
            w.write_all(b"=")?;
            write_escaped(w, v)?;
        }
        w.write_all(b"\n")
    }

    pub fn to_line(&self) -> String {
        let mut buf = Vec::with_capacity(64);
        self.write_line(&mut buf).expect("writing to a Vec cannot fail");
        buf.pop();
        String::from_utf8(buf).expect("event fields are UTF-8")
    }

    pub fn parse_line(line: &str) -> Result<EventRecord, LogError> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let mut fields = line.split('\t');
        let bad = |what: &str| LogError::Parse(format!("{what} in line {line:?}"));
        let t: f64 = fields.next().ok_or_else(|| bad("missing t"))?.parse().map_err(|_| bad("bad t"))?;
        let entity_kind = fields.next().ok_or_else(|| bad("missing entity kind"))?.parse().map_err(|e: String| bad(&e))?;
        let entity_id = fields.next().ok_or_else(|| bad("missing entity id"))?.to_string();
        let event = EventName::parse(fields.next().ok_or_else(|| bad("missing event"))?);
        let mut attrs = Vec::new();
        for kv in fields {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("attribute without `=`"))?;
            attrs.push((k.to_string(), unescape(v)));
        }
        Ok(EventRecord { t, entity_kind, entity_id, event, attrs })
    }
}

fn write_escaped<W: Write>(w: &mut W, v: &str) -> io::Result<()> {
    if !v.contains(['\\', '\t', '\n']) {
        return w.write_all(v.as_bytes());
    }
    for c in v.chars() {
        match c {
            '\\' => w.write_all(b"\\\\")?,
            '\t' => w.write_all(b"\\t")?,
            '\n' => w.write_all(b"\\n")?,
            c => write!(w, "{c}")?,
        }
    }
    Ok(())
}

fn unescape(v: &str) -> String {
    if !v.contains('\\') {
        return v.to_string();
    }
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Destination for emitted events.
pub trait EventSink {
    fn record(&mut self, e: EventRecord);
}

impl EventSink for Vec<EventRecord> {
    fn record(&mut self, e: EventRecord) {
        self.push(e);
    }
}

impl<S: EventSink + ?Sized> EventSink for &mut S {
    fn record(&mut self, e: EventRecord) {
        (**self).record(e)
    }
}

impl<S: EventSink + ?Sized> EventSink for Box<S> {
    fn record(&mut self, e: EventRecord) {
        (**self).record(e)
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _e: EventRecord) {}
}

/// Forwards each event to two sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: EventSink, B: EventSink> EventSink for Tee<A, B> {
    fn record(&mut self, e: EventRecord) {
        self.0.record(e.clone());
        self.1.record(e);
    }
}

/// Writes log lines to any writer. I/O errors are remembered and reported by
/// [`LogWriter::finish`].
pub struct LogWriter<W: Write> {
    out: W,
    error: Option<io::Error>,
    lines: u64,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        LogWriter { out, error: None, lines: 0 }
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl LogWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(LogWriter::new(BufWriter::with_capacity(1 << 20, File::create(path)?)))
    }
}

impl<W: Write> EventSink for LogWriter<W> {
    fn record(&mut self, e: EventRecord) {
        if self.error.is_none() {
            match e.write_line(&mut self.out) {
                Ok(()) => self.lines += 1,
                Err(err) => self.error = Some(err),
            }
        }
    }
}

/// Thread-safe handle for a process-wide log shared by several actors.
#[derive(Clone)]
pub struct SharedSink {
    inner: Arc<Mutex<Box<dyn EventSink + Send>>>,
}

impl SharedSink {
    pub fn new(sink: impl EventSink + Send + 'static) -> Self {
        SharedSink { inner: Arc::new(Mutex::new(Box::new(sink))) }
    }

    pub fn emit(&self, e: EventRecord) {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).record(e);
    }
}

impl EventSink for SharedSink {
    fn record(&mut self, e: EventRecord) {
        self.emit(e);
    }
}

impl fmt::Debug for SharedSink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSink")
    }
}

/// Collects records behind a mutex so tests and in-process runs can read
/// them back.
#[derive(Clone, Default)]
pub struct MemoryLog {
    inner: Arc<Mutex<Vec<EventRecord>>>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Vec<EventRecord> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl EventSink for MemoryLog {
    fn record(&mut self, e: EventRecord) {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).push(e);
    }
}

/// Wall clock for the local backend: a monotonic clock anchored to epoch
/// seconds once, at construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
    epoch_at_origin: f64,
}

impl WallClock {
    pub fn new() -> Self {
        let epoch = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        WallClock { origin: Instant::now(), epoch_at_origin: epoch }
    }

    pub fn now(&self) -> f64 {
        self.epoch_at_origin + self.origin.elapsed().as_secs_f64()
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let mut out = Vec::new();
    for_each_record(path, |e| out.push(e))?;
    Ok(out)
}

/// Streams a log file record by record without holding it in memory.
pub fn for_each_record(path: &Path, mut f: impl FnMut(EventRecord)) -> Result<(), LogError> {
    let reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        f(EventRecord::parse_line(&line)?);
    }
    Ok(())
}

pub fn write_log(path: &Path, records: &[EventRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        r.write_line(&mut w)?;
    }
    w.flush()
}

/// Concatenates several logs and orders them by `(t, entity_id)`. The sort
/// is stable, so same-key records keep their input order.
pub fn merge(logs: Vec<Vec<EventRecord>>) -> Vec<EventRecord> {
    let mut all: Vec<EventRecord> = logs.into_iter().flatten().collect();
    all.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.entity_id.cmp(&b.entity_id)));
    all
}

pub fn merge_files(inputs: &[&Path], output: &Path) -> Result<usize, LogError> {
    let logs = inputs.iter().map(|p| read_log(p)).collect::<Result<Vec<_>, _>>()?;
    let merged = merge(logs);
    write_log(output, &merged)?;
    Ok(merged.len())
}

/// Interleaves logs that are each already in time order, streaming them
/// line by line into `output`. Records with equal times keep the order of
/// their inputs. Returns the number of records written.
pub fn merge_sorted_files(inputs: &[PathBuf], output: &Path) -> Result<u64, LogError> {
    struct Head {
        t: f64,
        src: usize,
        line: String,
    }
    impl PartialEq for Head {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Head {}
    impl PartialOrd for Head {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Head {
        fn cmp(&self, other: &Self) -> Ordering {
            self.t.total_cmp(&other.t).then(self.src.cmp(&other.src))
        }
    }

    fn next(lines: &mut io::Lines<BufReader<File>>, src: usize) -> Result<Option<Head>, LogError> {
        for line in lines.by_ref() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let t = line
                .split('\t')
                .next()
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| LogError::Parse(format!("bad timestamp in {line:?}")))?;
            return Ok(Some(Head { t, src, line }));
        }
        Ok(None)
    }

    let mut sources =
        inputs.iter().map(|p| Ok(BufReader::with_capacity(1 << 20, File::open(p)?).lines())).collect::<Result<Vec<_>, io::Error>>()?;
    let mut heap = BinaryHeap::new();
    for (i, s) in sources.iter_mut().enumerate() {
        if let Some(h) = next(s, i)? {
            heap.push(Reverse(h));
        }
    }
    let mut w = BufWriter::with_capacity(1 << 20, File::create(output)?);
    let mut n = 0;
    while let Some(Reverse(h)) = heap.pop() {
        w.write_all(h.line.as_bytes())?;
        w.write_all(b"\n")?;
        n += 1;
        if let Some(h) = next(&mut sources[h.src], h.src)? {
            heap.push(Reverse(h));
        }
    }
    w.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_format() {
        let e = EventRecord::new(1.5, EntityKind::Task, "t1", EventName::TaskStart).attr("cores", 2).attr("kind", "FUNCTION");
        assert_eq!(e.to_line(), "1.5\ttask\tt1\ttask_start\tcores=2\tkind=FUNCTION");
        assert_eq!(EventRecord::parse_line(&e.to_line()).unwrap(), e);
    }

    #[test]
    fn escapes_awkward_values() {
        let e = EventRecord::new(0.1, EntityKind::Task, "t1", EventName::TaskEnd).attr("error", "a\tb\nc\\d=e");
        let line = e.to_line();
        assert!(!line.contains('\n'));
        assert_eq!(EventRecord::parse_line(&line).unwrap(), e);
    }

    #[test]
    fn unknown_event_names_survive() {
        let line = "3\tworker\tw1\tcustom_thing";
        let e = EventRecord::parse_line(line).unwrap();
        assert_eq!(e.event, EventName::Other("custom_thing".into()));
        assert_eq!(e.to_line(), line);
    }

    #[test]
    fn rejects_garbage() {
        assert!(EventRecord::parse_line("abc\ttask\tt\tx").is_err());
        assert!(EventRecord::parse_line("1\tplanet\tt\tx").is_err());
        assert!(EventRecord::parse_line("1\ttask\tt\tx\tnoequals").is_err());
    }

    #[test]
    fn merge_sorts_by_time_then_entity() {
        let a = vec![
            EventRecord::new(1.0, EntityKind::Task, "b", EventName::TaskStart),
            EventRecord::new(3.0, EntityKind::Task, "a", EventName::TaskEnd),
        ];
        let b = vec![EventRecord::new(1.0, EntityKind::Task, "a", EventName::TaskStart)];
        let m = merge(vec![a, b]);
        let order: Vec<_> = m.iter().map(|e| (e.t, e.entity_id.as_str())).collect();
        assert_eq!(order, vec![(1.0, "a"), (1.0, "b"), (3.0, "a")]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let recs = vec![
            EventRecord::new(0.0, EntityKind::Pilot, "p0", EventName::PilotActive).attr("cores", 8),
            EventRecord::new(0.25, EntityKind::Task, "t0", EventName::TaskStart),
        ];
        let mut w = LogWriter::create(&path).unwrap();
        for r in &recs {
            w.record(r.clone());
        }
        w.finish().unwrap();
        assert_eq!(read_log(&path).unwrap(), recs);
    }

    #[test]
    fn streaming_merge_interleaves_sorted_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |t: f64, id: &str| EventRecord::new(t, EntityKind::Task, id, EventName::TaskEnd);
        let a = vec![rec(0.0, "z"), rec(2.0, "a1"), rec(2.0, "a2"), rec(5.0, "a3")];
        let b = vec![rec(1.0, "b1"), rec(2.0, "b2"), rec(9.0, "b3")];
        let (pa, pb, out) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("m"));
        write_log(&pa, &a).unwrap();
        write_log(&pb, &b).unwrap();
        assert_eq!(merge_sorted_files(&[pa, pb], &out).unwrap(), 7);
        let ids: Vec<String> = read_log(&out).unwrap().into_iter().map(|e| e.entity_id).collect();
        assert_eq!(ids, ["z", "b1", "a1", "a2", "b2", "a3", "b3"]);
    }

    proptest! {
        #[test]
        fn timestamps_round_trip_exactly(t in proptest::num::f64::NORMAL | proptest::num::f64::ZERO, v in "[ -~\t\n]{0,20}") {
            let e = EventRecord::new(t, EntityKind::Worker, "w", EventName::WorkerStart).attr("v", &v);
            let back = EventRecord::parse_line(&e.to_line()).unwrap();
            prop_assert_eq!(back.t.to_bits(), t.to_bits());
            prop_assert_eq!(back, e);
        }
    }
}
