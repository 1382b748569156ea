//! Discrete-time scenario runner. Every stage, local controller and the global
//! controller share one virtual clock advanced in fixed ticks; stages take
//! requests through `offer`/`poll`, so throttled requests wait in channel
//! queues instead of blocking threads.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;

use qosplane_core::clock::{secs_to_ns, ManualClock, NANOS_PER_SEC};
use qosplane_core::controller::global::DirectUpstream;
use qosplane_core::controller::{DirectNode, DirectStage, GlobalController, LocalController};
use qosplane_core::request::{OpType, Request, Target};
use qosplane_core::stage::{CompletionRecord, NullSink, Offer, Stage, StageInfo};
use qosplane_core::workload::{build_schedule, FdPool, ReplayerConfig, ScheduledOp};

use crate::outcome::{bump, JobOutcome, RunOutcome};
use crate::scenario::ScenarioSpec;

pub const MOUNTPOINT: &str = "/scratch";
/// Marks opens issued only to obtain a descriptor; they are not counted.
const WARMUP_TAG: &str = "/.fd";

/// One stage's share of a job.
struct Lane {
    stage: Arc<Stage>,
    node: usize,
    stage_id: u64,
    pool: FdPool,
    waiting: VecDeque<OpType>,
    opening: bool,
    in_flight: u64,
}

#[derive(Clone, Copy)]
enum Phase {
    Pending,
    Admitting,
    Running { t0: u64, cursor: usize },
    Done,
}

struct SimJob {
    index: usize,
    schedule: Vec<ScheduledOp>,
    lanes: Vec<Lane>,
    phase: Phase,
    outcome: JobOutcome,
    start_ns: u64,
    last_completion: u64,
}

fn second_of(ns: u64) -> usize {
    (ns / NANOS_PER_SEC) as usize
}

impl SimJob {
    fn record(&mut self, lane: usize, rec: CompletionRecord, now: u64) {
        let l = &mut self.lanes[lane];
        l.pool.on_complete(&rec.sink_result);
        let warmup = rec.request.op_type == OpType::Open
            && matches!(&rec.request.target, Target::Path(p) if p.contains(WARMUP_TAG));
        if warmup {
            l.opening = false;
        } else {
            l.in_flight -= 1;
            bump(&mut self.outcome.completed, second_of(now), 1);
            self.last_completion = self.last_completion.max(now);
        }
    }

    /// Hand waiting ops to the stage. Descriptor ops wait for a descriptor first.
    fn drain(&mut self, lane: usize, now: u64) {
        loop {
            let l = &mut self.lanes[lane];
            let Some(&op) = l.waiting.front() else { return };
            let request = if l.pool.needs_fd(op) {
                if l.opening {
                    return;
                }
                l.opening = true;
                let Target::Path(p) = l.pool.open_request().target else { unreachable!("open is path based") };
                Request::path(OpType::Open, p.replacen(MOUNTPOINT, &format!("{MOUNTPOINT}{WARMUP_TAG}"), 1))
            } else {
                l.waiting.pop_front();
                l.in_flight += 1;
                l.pool.request(op)
            };
            if let Offer::Completed(rec) = self.lanes[lane].stage.offer(request) {
                self.record(lane, rec, now);
            }
        }
    }

    fn idle(&self) -> bool {
        self.lanes.iter().all(|l| l.waiting.is_empty() && l.in_flight == 0 && !l.opening)
    }
}

/// Run `spec` on a virtual clock.
pub fn simulate(spec: &ScenarioSpec) -> anyhow::Result<RunOutcome> {
    spec.validate()?;
    let clock = Arc::new(ManualClock::new(0));
    let policy = spec.policy();
    let channel_id = policy.channel.id;
    let mut global = GlobalController::new(policy, clock.clone())?;
    let handle = global.handle();
    let node_count = spec.jobs.iter().map(|j| j.nodes).max().unwrap_or(0);
    let locals: Vec<Arc<LocalController>> = (0..node_count)
        .map(|i| {
            let lc = Arc::new(LocalController::for_loop_interval(Duration::from_secs_f64(spec.loop_interval_s)));
            let node = format!("node{i}");
            lc.set_upstream(Arc::new(DirectUpstream { node: node.clone(), handle: handle.clone() }));
            handle.node_joined(node, Arc::new(DirectNode(Arc::clone(&lc))));
            lc
        })
        .collect();

    let mut jobs = Vec::with_capacity(spec.jobs.len());
    let mut last_trace_end = 0u64;
    for (index, job) in spec.jobs.iter().enumerate() {
        let traces = spec.traces_for(index)?;
        let cfg = ReplayerConfig::new(job.job_id.clone(), format!("{MOUNTPOINT}/{}", job.job_id), traces)
            .with_scaling(job.time_compression, job.rate_scale);
        let schedule = build_schedule(&cfg);
        let start_ns = secs_to_ns(job.start_offset_s);
        let span = schedule.last().map_or(0, |op| (op.second as u64 + 1) * NANOS_PER_SEC);
        last_trace_end = last_trace_end.max(start_ns + span);
        jobs.push(SimJob {
            index,
            schedule,
            lanes: Vec::new(),
            phase: Phase::Pending,
            outcome: JobOutcome::new(job.job_id.clone()),
            start_ns,
            last_completion: 0,
        });
    }

    let tick = spec.tick_ms * 1_000_000;
    let loop_ns = secs_to_ns(spec.loop_interval_s).max(tick);
    let cap = last_trace_end + secs_to_ns(spec.drain_cap_s);
    let mut out = RunOutcome::empty(spec);
    let mut next_cycle = 0u64;
    let mut now = 0u64;
    let burst_window = Duration::from_millis(spec.burst_window_ms);

    while jobs.iter().any(|j| !matches!(j.phase, Phase::Done)) {
        if now > cap {
            out.failed = true;
            out.error = Some(format!("jobs still running {:.0} s after the last trace ended", spec.drain_cap_s));
            break;
        }
        clock.set(now);

        for job in jobs.iter_mut().filter(|j| matches!(j.phase, Phase::Pending) && j.start_ns <= now) {
            let js = &spec.jobs[job.index];
            for k in 0..js.nodes {
                let info = StageInfo { pid: (job.index * 1000 + k + 1) as u32, ..StageInfo::new(js.job_id.clone()) };
                let stage = Arc::new(
                    Stage::with_clock(info.clone(), Arc::new(NullSink::new()), clock.clone()).with_burst_window(burst_window),
                );
                stage.register_mountpoint(MOUNTPOINT)?;
                let stage_id = locals[k]
                    .register_stage(info, Arc::new(DirectStage(Arc::clone(&stage))))
                    .with_context(|| format!("registering a stage of job {}", js.job_id))?;
                let tag = format!("{}-n{k}", js.job_id);
                job.lanes.push(Lane {
                    stage,
                    node: k,
                    stage_id,
                    pool: FdPool::new(&format!("{MOUNTPOINT}/{}", js.job_id), &tag, 4096),
                    waiting: VecDeque::new(),
                    opening: false,
                    in_flight: 0,
                });
            }
            job.phase = Phase::Admitting;
        }

        if now >= next_cycle {
            out.cycles.push(global.control_cycle());
            next_cycle += loop_ns;
        }

        for job in &mut jobs {
            // A job starts once the controller has given each of its stages a channel.
            if matches!(job.phase, Phase::Admitting) && job.lanes.iter().all(|l| l.stage.channel(channel_id).is_some()) {
                job.outcome.start_s = now as f64 / NANOS_PER_SEC as f64;
                job.phase = Phase::Running { t0: now, cursor: 0 };
            }
            let Phase::Running { t0, mut cursor } = job.phase else { continue };
            let lanes = job.lanes.len();
            while let Some(op) = job.schedule.get(cursor) {
                let due = t0 + op.due_ns();
                if due > now {
                    break;
                }
                bump(&mut job.outcome.submitted, second_of(due), 1);
                job.lanes[cursor % lanes].waiting.push_back(op.op_type);
                cursor += 1;
            }
            job.phase = Phase::Running { t0, cursor };
            let exhausted = cursor == job.schedule.len();
            for lane in 0..lanes {
                job.drain(lane, now);
                for rec in job.lanes[lane].stage.poll() {
                    job.record(lane, rec, now);
                }
                job.drain(lane, now);
            }
            if exhausted && job.idle() {
                let end = if job.outcome.total_completed() > 0 { job.last_completion } else { now };
                job.outcome.completion_s = Some(end.saturating_sub(t0) as f64 / NANOS_PER_SEC as f64);
                for l in &job.lanes {
                    locals[l.node].deregister_stage(l.stage_id);
                }
                job.phase = Phase::Done;
            }
        }
        now += tick;
    }

    out.duration_s = jobs.iter().map(|j| j.outcome.submitted.len().max(j.outcome.completed.len())).max().unwrap_or(0);
    out.jobs = jobs.into_iter().map(|j| j.outcome).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::TraceSpec;
    use qosplane_core::algorithms::Algorithm;

    fn constant_job(id: &str, demand: f64, rate: u64, secs: usize, offset: f64) -> crate::scenario::JobSpec {
        crate::scenario::JobSpec {
            job_id: id.into(),
            nodes: 1,
            demand,
            load_share: None,
            start_offset_s: offset,
            threads: 1,
            trace: TraceSpec::Constant { op_type: OpType::Getattr, rate, duration_s: secs },
            time_compression: 1.0,
            rate_scale: 1.0,
        }
    }

    #[test]
    fn empty_scenario_succeeds_immediately() {
        let out = simulate(&ScenarioSpec::new(Algorithm::Psfa, 100.0)).unwrap();
        assert!(!out.failed);
        assert_eq!(out.duration_s, 0);
        assert!(out.jobs.is_empty());
        assert_eq!(out.summary().makespan_s, Some(0.0));
    }

    #[test]
    fn unthrottled_job_tracks_its_trace() {
        let mut spec = ScenarioSpec::new(Algorithm::None, 100.0);
        spec.jobs.push(constant_job("a", 100.0, 300, 5, 0.0));
        let out = simulate(&spec).unwrap();
        let a = out.job("a").unwrap();
        assert_eq!(a.submitted, vec![300; 5]);
        assert_eq!(a.completed, vec![300; 5]);
        assert!(a.completion_s.unwrap() <= 5.0);
        assert!(out.windows_over(100.0) == 5);
    }

    #[test]
    fn throttled_job_is_held_to_its_rate_and_drains() {
        let mut spec = ScenarioSpec::new(Algorithm::Priority, 1000.0);
        spec.burst_window_ms = 10;
        spec.jobs.push(constant_job("a", 100.0, 200, 5, 0.0));
        let out = simulate(&spec).unwrap();
        let a = out.job("a").unwrap();
        assert_eq!(a.total_completed(), 1000);
        for &n in &a.completed {
            assert!(n <= 101, "{:?}", a.completed);
        }
        let t = a.completion_s.unwrap();
        assert!((9.5..=10.5).contains(&t), "{t}");
        assert!(!out.failed);
    }

    #[test]
    fn staggered_start_and_multi_node_split() {
        let mut spec = ScenarioSpec::new(Algorithm::Psfa, 1000.0);
        let mut b = constant_job("b", 500.0, 100, 3, 2.0);
        b.nodes = 2;
        spec.jobs.push(constant_job("a", 500.0, 100, 3, 0.0));
        spec.jobs.push(b);
        let out = simulate(&spec).unwrap();
        let b = out.job("b").unwrap();
        assert_eq!(b.start_s, 2.0);
        assert_eq!(&b.submitted[2..], &[100, 100, 100]);
        assert_eq!(b.total_completed(), 300);
        // Both of b's stages took part in control.
        assert!(out.cycles.iter().any(|c| c.job("b").is_some_and(|j| j.stages == 2)));
        // Stages deregister when their job ends.
        assert!(out.cycles.last().unwrap().jobs.len() <= 1);
    }

    #[test]
    fn descriptor_ops_get_descriptors() {
        let mut spec = ScenarioSpec::new(Algorithm::Uniform, 1000.0);
        let mut a = constant_job("a", 500.0, 0, 2, 0.0);
        a.trace = TraceSpec::Synthetic {
            duration_s: 2,
            mean_rate: Some(300.0),
            mix: [(OpType::Open, 1.0), (OpType::Sync, 1.0), (OpType::Close, 1.0)].into_iter().collect(),
            profile: qosplane_core::workload::BurstProfile::STEADY,
            seed: Some(1),
        };
        spec.jobs.push(a);
        let out = simulate(&spec).unwrap();
        let a = out.job("a").unwrap();
        assert!(!out.failed, "{:?}", out.error);
        assert_eq!(a.total_completed(), a.total_submitted(), "{:?} {:?}", a.submitted, a.completed);
        assert!(a.finished());
    }

    #[test]
    fn deterministic() {
        let mut spec = ScenarioSpec::new(Algorithm::ProportionalSharing, 500.0);
        spec.jobs.push(constant_job("a", 200.0, 400, 3, 0.0));
        spec.jobs.push(constant_job("b", 300.0, 100, 3, 1.0));
        let x = simulate(&spec).unwrap();
        let y = simulate(&spec).unwrap();
        assert_eq!(x.jobs, y.jobs);
    }
}
