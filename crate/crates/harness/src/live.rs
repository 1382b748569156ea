//! Real-time scenario runner. The global controller, one local controller per
//! node and every stage run in this process but talk only over loopback TCP.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};

use qosplane_core::clock::{Clock, MonotonicClock};
use qosplane_core::controller::net::{GlobalControllerServer, LocalControllerServer, StageClient};
use qosplane_core::controller::{CycleReport, GlobalController, LocalController};
use qosplane_core::stage::{NullSink, Stage, StageInfo};
use qosplane_core::workload::{replay, ReplayerConfig};

use crate::outcome::{bump, JobOutcome, RunOutcome};
use crate::scenario::ScenarioSpec;
use crate::sim::MOUNTPOINT;

const RPC_TIMEOUT: Duration = Duration::from_secs(5);

fn run_job(
    spec: &ScenarioSpec,
    index: usize,
    locals: &[SocketAddr],
    clock: &Arc<MonotonicClock>,
    run_start: Instant,
    stop: &AtomicBool,
) -> anyhow::Result<JobOutcome> {
    let js = &spec.jobs[index];
    let traces = spec.traces_for(index)?;
    let mut outcome = JobOutcome::new(js.job_id.clone());
    let start_at = run_start + Duration::from_secs_f64(js.start_offset_s);
    while Instant::now() < start_at {
        if stop.load(Ordering::Relaxed) {
            return Ok(outcome);
        }
        std::thread::sleep((start_at - Instant::now()).min(Duration::from_millis(20)));
    }

    let channel_id = spec.policy().channel.id;
    let mut stages = Vec::new();
    let mut clients = Vec::new();
    for (k, local) in locals.iter().enumerate().take(js.nodes) {
        let info = StageInfo { pid: (index * 1000 + k + 1) as u32, ..StageInfo::new(js.job_id.clone()) };
        let stage = Arc::new(
            Stage::with_clock(info, Arc::new(NullSink::new()), clock.clone() as Arc<dyn Clock>)
                .with_burst_window(Duration::from_millis(spec.burst_window_ms)),
        );
        stage.register_mountpoint(MOUNTPOINT)?;
        clients.push(StageClient::attach(Arc::clone(&stage), *local, RPC_TIMEOUT)?);
        stages.push(stage);
    }

    // Admission: wait for the controller to install the job's channels.
    let deadline = Instant::now() + Duration::from_secs_f64(spec.loop_interval_s * 5.0 + 5.0);
    while !stages.iter().all(|s| s.channel(channel_id).is_some()) {
        if Instant::now() > deadline {
            return Err(anyhow!("job {}: controller never installed its channel", js.job_id));
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let began = Instant::now();
    outcome.start_s = began.duration_since(run_start).as_secs_f64();
    let offset = outcome.start_s.round() as usize;

    // Each node replays an equal slice of the job's load.
    let per_node = js.nodes as f64;
    let reports: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = stages
            .iter()
            .enumerate()
            .map(|(k, stage)| {
                let cfg = ReplayerConfig::new(js.job_id.clone(), format!("{MOUNTPOINT}/{}/n{k}", js.job_id), traces.clone())
                    .with_threads(js.threads)
                    .with_scaling(js.time_compression, js.rate_scale / per_node);
                scope.spawn(move || replay(&cfg, stage, Some(stop)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay thread panicked")).collect()
    });
    let mut longest = Duration::ZERO;
    let mut aborted = false;
    for r in &reports {
        for (s, n) in r.submitted_per_second().iter().enumerate() {
            bump(&mut outcome.submitted, offset + s, *n);
        }
        for (s, n) in r.completed_per_second().iter().enumerate() {
            bump(&mut outcome.completed, offset + s, *n);
        }
        longest = longest.max(r.duration);
        aborted |= r.aborted;
    }
    if !aborted {
        outcome.completion_s = Some(longest.as_secs_f64());
    }
    for c in clients {
        c.detach(RPC_TIMEOUT);
    }
    Ok(outcome)
}

/// Run `spec` in real time over loopback.
pub fn run_live(spec: &ScenarioSpec) -> anyhow::Result<RunOutcome> {
    spec.validate()?;
    let clock = Arc::new(MonotonicClock::new());
    let mut global = GlobalController::new(spec.policy(), clock.clone())?;
    let mut gserver = GlobalControllerServer::start("127.0.0.1:0", global.handle()).context("starting global controller")?;
    let node_count = spec.jobs.iter().map(|j| j.nodes).max().unwrap_or(0);
    let mut locals = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let lc = Arc::new(LocalController::for_loop_interval(Duration::from_secs_f64(spec.loop_interval_s)));
        locals.push(LocalControllerServer::start("127.0.0.1:0", Some(gserver.local_addr()), lc)?);
    }
    let addrs: Vec<SocketAddr> = locals.iter().map(|l| l.local_addr()).collect();

    let stop = AtomicBool::new(false);
    let jobs_done = AtomicBool::new(false);
    let cycles: Mutex<Vec<CycleReport>> = Mutex::new(Vec::new());
    let run_start = Instant::now();
    let last_end = spec
        .jobs
        .iter()
        .enumerate()
        .map(|(i, j)| {
            let len = spec.traces_for(i).map(|t| t.iter().map(|t| t.samples.len()).max().unwrap_or(0)).unwrap_or(0);
            j.start_offset_s + len as f64 / j.time_compression
        })
        .fold(0.0, f64::max);
    let cap = Duration::from_secs_f64(last_end + spec.drain_cap_s);

    let results: Vec<anyhow::Result<JobOutcome>> = std::thread::scope(|scope| {
        let (stop, jobs_done, cycles) = (&stop, &jobs_done, &cycles);
        let global = &mut global;
        scope.spawn(move || {
            let halt = AtomicBool::new(false);
            std::thread::scope(|inner| {
                inner.spawn(|| global.run(&halt, |r| cycles.lock().expect("cycle log").push(r.clone())));
                while !jobs_done.load(Ordering::SeqCst) {
                    if run_start.elapsed() > cap {
                        stop.store(true, Ordering::SeqCst);
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                halt.store(true, Ordering::SeqCst);
            });
        });
        let handles: Vec<_> = (0..spec.jobs.len())
            .map(|i| {
                let (addrs, clock) = (&addrs, &clock);
                scope.spawn(move || run_job(spec, i, addrs, clock, run_start, stop))
            })
            .collect();
        let results = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("job thread panicked"))))
            .collect();
        jobs_done.store(true, Ordering::SeqCst);
        results
    });

    for l in &mut locals {
        l.shutdown();
    }
    gserver.shutdown();

    let mut out = RunOutcome::empty(spec);
    out.cycles = cycles.into_inner().unwrap_or_default();
    let mut errors = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(job) => out.jobs.push(job),
            Err(e) => {
                errors.push(format!("{e:#}"));
                out.jobs.push(JobOutcome::new(spec.jobs[i].job_id.clone()));
            }
        }
    }
    if stop.load(Ordering::SeqCst) {
        errors.push(format!("drain cap of {:.0} s reached", spec.drain_cap_s));
    }
    if !errors.is_empty() {
        out.failed = true;
        out.error = Some(errors.join("; "));
    }
    out.duration_s = out.jobs.iter().map(|j| j.submitted.len().max(j.completed.len())).max().unwrap_or(0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{JobSpec, TraceSpec};
    use qosplane_core::algorithms::Algorithm;
    use qosplane_core::request::OpType;

    #[test]
    fn two_jobs_over_loopback() {
        let mut spec = ScenarioSpec::new(Algorithm::Priority, 400.0);
        spec.loop_interval_s = 0.2;
        let job = |id: &str, demand: f64, offset: f64, nodes: usize| JobSpec {
            job_id: id.into(),
            nodes,
            demand,
            load_share: None,
            start_offset_s: offset,
            threads: 2,
            trace: TraceSpec::Constant { op_type: OpType::Getattr, rate: 200, duration_s: 2 },
            time_compression: 1.0,
            rate_scale: 1.0,
        };
        spec.jobs = vec![job("a", 100.0, 0.0, 1), job("b", 300.0, 0.5, 2)];
        let out = run_live(&spec).unwrap();
        assert!(!out.failed, "{:?}", out.error);
        let a = out.job("a").unwrap();
        let b = out.job("b").unwrap();
        assert_eq!(a.total_submitted(), 400);
        assert_eq!(a.total_completed(), 400);
        assert_eq!(b.total_completed(), b.total_submitted());
        // a is held near 100 ops/s: 400 ops need well over two seconds.
        assert!(a.completion_s.unwrap() > 3.0, "{:?}", a.completion_s);
        assert!(b.completion_s.unwrap() < a.completion_s.unwrap());
        assert!(!out.cycles.is_empty());
    }
}
