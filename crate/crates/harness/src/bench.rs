//! Microbenchmarks: stage throughput, control-cycle latency and stage overhead.

use std::path::Path;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use anyhow::Context;
use serde::Serialize;

use qosplane_core::algorithms::Algorithm;
use qosplane_core::clock::MonotonicClock;
use qosplane_core::controller::net::{GlobalControllerServer, LocalControllerServer, StageClient};
use qosplane_core::controller::{GlobalController, LocalController, Policy};
use qosplane_core::request::{Granularity, OpType, Request};
use qosplane_core::stage::{DirectorySink, HousekeepingRule, NullSink, Sink, Stage, StageInfo};

const BENCH_ROOT: &str = "/bench";
const OVERHEAD_CHUNK: u64 = 3 * 1024;

/// A stage whose whole job goes through one unlimited channel.
pub fn passthrough_stage(job: &str, sink: Arc<dyn Sink>) -> Stage {
    let stage = Stage::new(StageInfo::new(job), sink);
    stage.register_mountpoint(BENCH_ROOT).expect("absolute mountpoint");
    stage
        .apply_housekeeping_rule(&HousekeepingRule::CreateChannel {
            channel_id: 1,
            granularity: Granularity::Job,
            value: job.to_string(),
            rate: f64::INFINITY,
        })
        .expect("fresh stage accepts a channel");
    stage
}

fn bench_paths(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{BENCH_ROOT}/f{i}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub stages: usize,
    pub threads_per_stage: usize,
    pub ops: u64,
    pub elapsed_s: f64,
    pub ops_per_s: f64,
}

/// Closed-loop getattr submissions: `stages` independent stages, each driven
/// by `threads` threads issuing `requests` each.
pub fn stage_throughput(stages: usize, threads: usize, requests: u64) -> ThroughputRow {
    let paths = Arc::new(bench_paths(64));
    let stage_objs: Vec<Arc<Stage>> =
        (0..stages).map(|i| Arc::new(passthrough_stage(&format!("bench{i}"), Arc::new(NullSink::new())))).collect();
    let barrier = Arc::new(Barrier::new(stages * threads + 1));
    let handles: Vec<_> = stage_objs
        .iter()
        .flat_map(|s| (0..threads).map(move |_| Arc::clone(s)))
        .map(|stage| {
            let (barrier, paths) = (Arc::clone(&barrier), Arc::clone(&paths));
            std::thread::spawn(move || {
                let reqs: Vec<Request> = paths.iter().map(|p| Request::path(OpType::Getattr, p.clone())).collect();
                barrier.wait();
                for i in 0..requests {
                    let rec = stage.submit(reqs[(i % 64) as usize].clone());
                    std::hint::black_box(rec);
                }
            })
        })
        .collect();
    barrier.wait();
    let started = Instant::now();
    for h in handles {
        h.join().expect("bench thread");
    }
    let elapsed = started.elapsed().as_secs_f64();
    let ops = requests * (stages * threads) as u64;
    ThroughputRow { stages, threads_per_stage: threads, ops, elapsed_s: elapsed, ops_per_s: ops as f64 / elapsed.max(1e-9) }
}

/// Single-stage multi-thread rows followed by multi-stage single-thread rows.
/// Zero requests yields an empty table.
pub fn bench_stage(thread_counts: &[usize], stage_counts: &[usize], requests: u64) -> Vec<ThroughputRow> {
    if requests == 0 {
        return Vec::new();
    }
    let mut rows: Vec<ThroughputRow> = thread_counts.iter().map(|&t| stage_throughput(1, t.max(1), requests)).collect();
    rows.extend(stage_counts.iter().map(|&s| stage_throughput(s.max(1), 1, requests)));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub local_controllers: usize,
    pub iterations: usize,
    pub p50_us: Option<f64>,
    pub p95_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub max_us: Option<f64>,
}

fn percentile(sorted: &[Duration], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1].as_secs_f64() * 1e6)
}

impl LatencyStats {
    pub fn from_samples(local_controllers: usize, mut samples: Vec<Duration>) -> Self {
        samples.sort();
        LatencyStats {
            local_controllers,
            iterations: samples.len(),
            p50_us: percentile(&samples, 0.50),
            p95_us: percentile(&samples, 0.95),
            p99_us: percentile(&samples, 0.99),
            max_us: samples.last().map(|d| d.as_secs_f64() * 1e6),
        }
    }
}

/// Back-to-back PSFA control cycles against `controllers` local controllers,
/// each with `stages_per` stages, all over loopback.
pub fn bench_control(controllers: usize, stages_per: usize, iterations: usize) -> anyhow::Result<LatencyStats> {
    if iterations == 0 {
        return Ok(LatencyStats::from_samples(controllers, Vec::new()));
    }
    let mut policy = Policy::new(Algorithm::Psfa, 1e6);
    policy.default_demand = Some(1e6 / (controllers * stages_per).max(1) as f64);
    let mut global = GlobalController::new(policy, Arc::new(MonotonicClock::new()))?
        .with_rpc_timeout(Duration::from_secs(5));
    let mut gserver = GlobalControllerServer::start("127.0.0.1:0", global.handle())?;
    let mut locals = Vec::new();
    let mut clients = Vec::new();
    let mut stages = Vec::new();
    for n in 0..controllers {
        let lc = Arc::new(LocalController::new(Duration::from_secs(5)));
        let server = LocalControllerServer::start("127.0.0.1:0", Some(gserver.local_addr()), lc)?;
        for s in 0..stages_per {
            let stage = Arc::new(Stage::new(
                StageInfo { pid: (s + 1) as u32, ..StageInfo::new(format!("job{n}-{s}")) },
                Arc::new(NullSink::new()),
            ));
            clients.push(StageClient::attach(Arc::clone(&stage), server.local_addr(), Duration::from_secs(5))?);
            stages.push(stage);
        }
        locals.push(server);
    }
    // Wait for every registration to reach the controller.
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        global.control_cycle();
        if global.jobs().len() == controllers * stages_per {
            break;
        }
        anyhow::ensure!(Instant::now() < deadline, "local controllers did not register");
        std::thread::sleep(Duration::from_millis(5));
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let report = global.control_cycle();
        anyhow::ensure!(report.failed_nodes.is_empty(), "node failure during benchmark: {:?}", report.failed_nodes);
        samples.push(report.latency);
    }
    drop(clients);
    for l in &mut locals {
        l.shutdown();
    }
    gserver.shutdown();
    Ok(LatencyStats::from_samples(controllers, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    /// No side effects: measures the stage's own cost.
    Null,
    /// Real file-system calls in a temporary directory.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub sink: SinkKind,
    pub ops: u64,
    pub baseline_ops_per_s: Option<f64>,
    pub passthrough_ops_per_s: Option<f64>,
    /// `1 - passthrough / baseline`; `None` when undefined or throttled.
    pub overhead: Option<f64>,
    pub throttled: bool,
}

fn make_sink(kind: SinkKind, dir: &Path) -> anyhow::Result<Arc<dyn Sink>> {
    Ok(match kind {
        SinkKind::Null => Arc::new(NullSink::new()),
        SinkKind::Directory => Arc::new(DirectorySink::new(dir).context("creating bench directory")?),
    })
}

/// The overhead workload: open, getattr and close over a small file set.
fn run_workload(ops: u64, mut exec: impl FnMut(Request) -> Option<i32>, paths: &[String]) -> f64 {
    let started = Instant::now();
    let mut i = 0u64;
    while i < ops {
        let p = &paths[(i / 3) as usize % paths.len()];
        let fd = exec(Request::path(OpType::Open, p.clone()));
        i += 1;
        if i < ops {
            exec(Request::path(OpType::Getattr, p.clone()));
            i += 1;
        }
        if i < ops {
            exec(Request::fd(OpType::Close, fd.unwrap_or(-1)));
            i += 1;
        }
    }
    started.elapsed().as_secs_f64()
}

fn opened(result: &qosplane_core::stage::SinkResult) -> Option<i32> {
    match result {
        Ok(qosplane_core::stage::SinkOutcome::Opened(fd)) => Some(*fd),
        _ => None,
    }
}

/// Same workload straight into a sink and through a passthrough stage in
/// front of an identical sink; rounds alternate and the best of each is kept.
/// A throttled stage (`channel_rate` finite) is run but excluded from the metric.
pub fn bench_overhead(ops: u64, sink: SinkKind, rounds: usize, channel_rate: Option<f64>) -> anyhow::Result<OverheadReport> {
    let throttled = channel_rate.is_some_and(f64::is_finite);
    let mut report =
        OverheadReport { sink, ops, baseline_ops_per_s: None, passthrough_ops_per_s: None, overhead: None, throttled };
    if ops == 0 {
        return Ok(report);
    }
    let tmp = tempfile::tempdir()?;
    let paths = bench_paths(32);
    let direct_sink = make_sink(sink, &tmp.path().join("direct"))?;
    let stage = passthrough_stage("overhead", make_sink(sink, &tmp.path().join("staged"))?);
    if let Some(rate) = channel_rate.filter(|r| r.is_finite()) {
        stage.apply_housekeeping_rule(&HousekeepingRule::SetChannelRate { channel_id: 1, rate })?;
    }
    // Short alternating chunks keep host-load drift from landing on one side.
    let mut best_direct = f64::INFINITY;
    let mut best_staged = f64::INFINITY;
    for _ in 0..rounds.max(1) {
        let (mut direct, mut staged) = (0.0, 0.0);
        let mut left = ops;
        while left > 0 {
            let n = left.min(OVERHEAD_CHUNK);
            direct += run_workload(n, |r| opened(&direct_sink.execute(&r)), &paths);
            staged += run_workload(n, |r| opened(&stage.submit(r).sink_result), &paths);
            left -= n;
        }
        best_direct = best_direct.min(direct);
        best_staged = best_staged.min(staged);
    }
    let base = ops as f64 / best_direct.max(1e-9);
    let staged = ops as f64 / best_staged.max(1e-9);
    report.baseline_ops_per_s = Some(base);
    report.passthrough_ops_per_s = Some(staged);
    if !throttled {
        report.overhead = Some(1.0 - staged / base);
    }
    Ok(report)
}
