use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{scaled_counts, RateCurveTrace};
use crate::request::{OpType, Request};
use crate::stage::{SinkOutcome, Stage};

#[derive(Debug, Clone)]
pub struct ReplayerConfig {
    pub traces: Vec<RateCurveTrace>,
    pub threads: usize,
    /// Input seconds folded into one replay second.
    pub time_compression: f64,
    /// Multiplier applied to every sample.
    pub rate_scale: f64,
    pub job_id: String,
    /// Directory the replayed paths live under.
    pub path_prefix: String,
    /// Bytes per read or write.
    pub io_size: u64,
}

impl ReplayerConfig {
    pub fn new(job_id: impl Into<String>, path_prefix: impl Into<String>, traces: Vec<RateCurveTrace>) -> Self {
        ReplayerConfig {
            traces,
            threads: 1,
            time_compression: 1.0,
            rate_scale: 1.0,
            job_id: job_id.into(),
            path_prefix: path_prefix.into(),
            io_size: 4096,
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn with_scaling(mut self, time_compression: f64, rate_scale: f64) -> Self {
        self.time_compression = time_compression;
        self.rate_scale = rate_scale;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledOp {
    pub second: u32,
    /// Offset within the second.
    pub offset_ns: u64,
    pub op_type: OpType,
}

impl ScheduledOp {
    pub fn due_ns(&self) -> u64 {
        self.second as u64 * 1_000_000_000 + self.offset_ns
    }
}

/// Every op of the replay in submission order. Within a second the op types
/// are interleaved in proportion to their counts and spaced uniformly.
pub fn build_schedule(config: &ReplayerConfig) -> Vec<ScheduledOp> {
    let counts: Vec<(OpType, Vec<u64>)> = config
        .traces
        .iter()
        .map(|t| (t.op_type, scaled_counts(t, config.time_compression, config.rate_scale)))
        .collect();
    let seconds = counts.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut slots: Vec<(f64, usize, OpType)> = Vec::new();
    for s in 0..seconds {
        slots.clear();
        for (k, (op, c)) in counts.iter().enumerate() {
            let n = c.get(s).copied().unwrap_or(0);
            for j in 0..n {
                slots.push(((j as f64 + 0.5) / n as f64, k, *op));
            }
        }
        slots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let total = slots.len() as u64;
        for (i, &(_, _, op_type)) in slots.iter().enumerate() {
            out.push(ScheduledOp { second: s as u32, offset_ns: i as u64 * 1_000_000_000 / total, op_type });
        }
    }
    out
}

/// Descriptors opened by one replay thread, reused by descriptor-based ops.
#[derive(Debug)]
pub struct FdPool {
    fds: Vec<i32>,
    counter: u64,
    dir: String,
    io_size: u64,
}

impl FdPool {
    pub fn new(path_prefix: &str, tag: &str, io_size: u64) -> Self {
        FdPool { fds: Vec::new(), counter: 0, dir: format!("{}/{tag}", path_prefix.trim_end_matches('/')), io_size }
    }

    fn path(&mut self, kind: &str) -> String {
        self.counter += 1;
        format!("{}/{kind}{}", self.dir, self.counter % 256)
    }

    /// An uncounted open is needed before `op` can run.
    pub fn needs_fd(&self, op: OpType) -> bool {
        op.is_fd_based() && (self.fds.is_empty() || (op == OpType::Close && self.fds.len() == 1))
    }

    pub fn open_request(&mut self) -> Request {
        let p = self.path("f");
        Request::path(OpType::Open, p)
    }

    pub fn request(&mut self, op: OpType) -> Request {
        match op {
            OpType::Close => Request::fd(op, self.fds.pop().unwrap_or(-1)),
            OpType::Read | OpType::Write => Request::fd(op, *self.fds.last().unwrap_or(&-1)).with_size(self.io_size),
            OpType::Sync => Request::fd(op, *self.fds.last().unwrap_or(&-1)),
            OpType::Rename => {
                let from = self.path("f");
                let to = self.path("r");
                Request::path(op, from).with_dest(to)
            }
            OpType::Mkdir | OpType::Rmdir => {
                let p = self.path("d");
                Request::path(op, p)
            }
            OpType::Statfs => Request::path(op, self.dir.clone()),
            _ => {
                let p = self.path("f");
                Request::path(op, p)
            }
        }
    }

    pub fn on_complete(&mut self, outcome: &Result<SinkOutcome, crate::stage::SinkError>) {
        if let Ok(SinkOutcome::Opened(fd)) = outcome {
            self.fds.push(*fd);
        }
    }
}

/// Offered and completed ops per replay second and op type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub job_id: String,
    pub submitted: BTreeMap<OpType, Vec<u64>>,
    pub completed: BTreeMap<OpType, Vec<u64>>,
    pub errors: u64,
    pub duration: Duration,
    pub aborted: bool,
}

fn bump(map: &mut BTreeMap<OpType, Vec<u64>>, op: OpType, second: usize) {
    let v = map.entry(op).or_default();
    if v.len() <= second {
        v.resize(second + 1, 0);
    }
    v[second] += 1;
}

fn flatten(map: &BTreeMap<OpType, Vec<u64>>) -> Vec<u64> {
    let len = map.values().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![0; len];
    for v in map.values() {
        for (i, n) in v.iter().enumerate() {
            out[i] += n;
        }
    }
    out
}

impl ReplayReport {
    pub fn new(job_id: impl Into<String>) -> Self {
        ReplayReport { job_id: job_id.into(), ..Default::default() }
    }

    /// Count an op offered in its scheduled second.
    pub fn record_submit(&mut self, op: OpType, second: usize) {
        bump(&mut self.submitted, op, second);
    }

    pub fn record_complete(&mut self, op: OpType, second: usize, ok: bool) {
        bump(&mut self.completed, op, second);
        if !ok {
            self.errors += 1;
        }
    }

    pub fn submitted_per_second(&self) -> Vec<u64> {
        flatten(&self.submitted)
    }

    pub fn completed_per_second(&self) -> Vec<u64> {
        flatten(&self.completed)
    }

    pub fn total_submitted(&self) -> u64 {
        self.submitted.values().flatten().sum()
    }

    pub fn total_completed(&self) -> u64 {
        self.completed.values().flatten().sum()
    }

    /// Seconds until the last completion.
    pub fn completion_time_s(&self) -> usize {
        let c = self.completed_per_second();
        c.iter().rposition(|&n| n > 0).map_or(0, |i| i + 1)
    }

    /// `second, op_type, submitted, completed`.
    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["second", "op_type", "submitted", "completed"])?;
        let ops: std::collections::BTreeSet<OpType> = self.submitted.keys().chain(self.completed.keys()).copied().collect();
        let len = self.submitted.values().chain(self.completed.values()).map(Vec::len).max().unwrap_or(0);
        for s in 0..len {
            for op in &ops {
                let sub = self.submitted.get(op).and_then(|v| v.get(s)).copied().unwrap_or(0);
                let done = self.completed.get(op).and_then(|v| v.get(s)).copied().unwrap_or(0);
                w.write_record([s.to_string(), op.name().to_string(), sub.to_string(), done.to_string()])?;
            }
        }
        w.flush()
    }
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now + Duration::from_micros(50) {
        std::thread::sleep(deadline - now);
    }
}

/// Replay in real time against `stage`, blocking on throttled channels.
/// Setting `stop` aborts and returns what was recorded so far.
pub fn replay(config: &ReplayerConfig, stage: &Stage, stop: Option<&AtomicBool>) -> ReplayReport {
    let schedule = build_schedule(config);
    let threads = config.threads.max(1);
    let report = Mutex::new(ReplayReport::new(config.job_id.clone()));
    let aborted = AtomicBool::new(false);
    let mut start = Instant::now();
    let barrier = std::sync::Barrier::new(threads + 1);
    let start_cell: Mutex<Option<Instant>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for t in 0..threads {
            let (schedule, report, barrier, start_cell, aborted) = (&schedule, &report, &barrier, &start_cell, &aborted);
            scope.spawn(move || {
                let mut pool = FdPool::new(&config.path_prefix, &format!("{}-t{t}", config.job_id), config.io_size);
                let mine: Vec<ScheduledOp> = schedule.iter().skip(t).step_by(threads).copied().collect();
                if let Some(first_fd_op) = mine.iter().find(|op| op.op_type.is_fd_based()) {
                    if pool.needs_fd(first_fd_op.op_type) {
                        let rec = stage.submit(pool.open_request().with_job(config.job_id.clone()));
                        pool.on_complete(&rec.sink_result);
                    }
                }
                barrier.wait();
                let start = start_cell.lock().expect("start set before release");
                for op in mine {
                    if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                        aborted.store(true, Ordering::Relaxed);
                        break;
                    }
                    sleep_until(start + Duration::from_nanos(op.due_ns()));
                    if pool.needs_fd(op.op_type) {
                        let rec = stage.submit(pool.open_request().with_job(config.job_id.clone()));
                        pool.on_complete(&rec.sink_result);
                    }
                    report.lock().record_submit(op.op_type, op.second as usize);
                    let rec = stage.submit(pool.request(op.op_type).with_job(config.job_id.clone()));
                    pool.on_complete(&rec.sink_result);
                    let second = start.elapsed().as_secs() as usize;
                    report.lock().record_complete(op.op_type, second, rec.sink_result.is_ok());
                }
            });
        }
        start = Instant::now();
        *start_cell.lock() = Some(start);
        barrier.wait();
    });

    let mut report = report.into_inner();
    report.duration = start.elapsed();
    report.aborted = aborted.load(Ordering::Relaxed);
    report
}
