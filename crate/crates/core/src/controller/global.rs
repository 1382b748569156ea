//! The global controller: job registry plus the feedback loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::policy::{Policy, PolicyError, Unit};
use super::{split_job_rate, LinkError, NodeLink, Upstream};
use crate::algorithms::{allocate, Algorithm, JobState};
use crate::clock::{ns_to_secs, Clock};
use crate::protocol::{Rule, RuleAction, StatEntry, Status};
use crate::stage::StageInfo;

pub type NodeId = String;

pub enum Event {
    NodeJoined { node: NodeId, link: Arc<dyn NodeLink> },
    NodeLeft { node: NodeId },
    StageRegistered { node: NodeId, info: StageInfo },
    StageDeregistered { node: NodeId, stage_id: u64 },
    SetPolicy(Box<Policy>),
}

/// Thread-safe entry point for registrations and policy changes. Events are
/// applied at the start of the next control cycle.
#[derive(Clone)]
pub struct GlobalHandle {
    tx: Sender<Event>,
}

impl GlobalHandle {
    pub fn node_joined(&self, node: impl Into<NodeId>, link: Arc<dyn NodeLink>) {
        let _ = self.tx.send(Event::NodeJoined { node: node.into(), link });
    }

    pub fn node_left(&self, node: impl Into<NodeId>) {
        let _ = self.tx.send(Event::NodeLeft { node: node.into() });
    }

    pub fn stage_registered(&self, node: impl Into<NodeId>, info: StageInfo) {
        let _ = self.tx.send(Event::StageRegistered { node: node.into(), info });
    }

    pub fn stage_deregistered(&self, node: impl Into<NodeId>, stage_id: u64) {
        let _ = self.tx.send(Event::StageDeregistered { node: node.into(), stage_id });
    }

    /// Validate and queue a policy; an invalid one leaves the current policy in place.
    pub fn set_policy(&self, policy: Policy) -> Result<(), PolicyError> {
        policy.validate()?;
        let _ = self.tx.send(Event::SetPolicy(Box::new(policy)));
        Ok(())
    }
}

/// Forwards a local controller's registrations into an in-process global controller.
pub struct DirectUpstream {
    pub node: NodeId,
    pub handle: GlobalHandle,
}

impl Upstream for DirectUpstream {
    fn register(&self, info: &StageInfo) -> Result<(), LinkError> {
        self.handle.stage_registered(self.node.clone(), info.clone());
        Ok(())
    }

    fn deregister(&self, stage_id: u64) -> Result<(), LinkError> {
        self.handle.stage_deregistered(self.node.clone(), stage_id);
        Ok(())
    }
}

struct StageMember {
    info: StageInfo,
    channel_ready: bool,
    last_rate: Option<f64>,
}

struct NodeEntry {
    link: Arc<dyn NodeLink>,
    stages: BTreeMap<u64, StageMember>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobCycle {
    pub job_id: String,
    pub demand: f64,
    pub usage: f64,
    /// Rate before leftover redistribution (PSFA only).
    pub base_rate: Option<f64>,
    /// `None` when the job is left unthrottled.
    pub assigned: Option<f64>,
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub index: u64,
    pub timestamp_ns: u64,
    pub algorithm: Algorithm,
    pub max_rate: f64,
    pub jobs: Vec<JobCycle>,
    pub rules: Vec<(NodeId, Rule, Status)>,
    pub failed_nodes: Vec<NodeId>,
    /// Wall-clock time of collect + compute + enforce.
    pub latency: Duration,
    pub error: Option<String>,
}

impl CycleReport {
    pub fn job(&self, job_id: &str) -> Option<&JobCycle> {
        self.jobs.iter().find(|j| j.job_id == job_id)
    }

    pub fn total_assigned(&self) -> f64 {
        self.jobs.iter().filter_map(|j| j.assigned).sum()
    }
}

/// Per-cycle CSV log: `timestamp, job_id, usage, assigned_rate, cycle_latency_ns`.
pub struct CycleLog {
    writer: csv::Writer<File>,
}

impl CycleLog {
    pub fn create(path: &Path) -> csv::Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["timestamp", "job_id", "usage", "assigned_rate", "cycle_latency_ns"])?;
        Ok(CycleLog { writer })
    }

    pub fn append(&mut self, report: &CycleReport) -> csv::Result<()> {
        let ts = format!("{:.6}", ns_to_secs(report.timestamp_ns));
        let latency = report.latency.as_nanos().to_string();
        for job in &report.jobs {
            let assigned = job.assigned.map(|r| format!("{r:.3}")).unwrap_or_else(|| "inf".to_string());
            self.writer.write_record([ts.as_str(), &job.job_id, &format!("{:.3}", job.usage), &assigned, &latency])?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

pub struct GlobalController {
    tx: Sender<Event>,
    rx: Receiver<Event>,
    policy: Policy,
    policy_since_ns: u64,
    nodes: BTreeMap<NodeId, NodeEntry>,
    clock: Arc<dyn Clock>,
    rpc_timeout: Duration,
    cycles: u64,
    log: Option<CycleLog>,
}

impl GlobalController {
    pub fn new(policy: Policy, clock: Arc<dyn Clock>) -> Result<Self, PolicyError> {
        policy.validate()?;
        let (tx, rx) = mpsc::channel();
        let rpc_timeout = Duration::from_secs_f64(policy.loop_interval_s / 2.0);
        Ok(GlobalController {
            tx,
            rx,
            policy,
            policy_since_ns: clock.now_ns(),
            nodes: BTreeMap::new(),
            clock,
            rpc_timeout,
            cycles: 0,
            log: None,
        })
    }

    pub fn handle(&self) -> GlobalHandle {
        GlobalHandle { tx: self.tx.clone() }
    }

    pub fn with_log(mut self, log: CycleLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_rpc_timeout(mut self, timeout: Duration) -> Self {
        self.rpc_timeout = timeout;
        self
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Policy in force now, with elapsed steps applied.
    pub fn active_policy(&self) -> Policy {
        self.policy.at(ns_to_secs(self.clock.now_ns().saturating_sub(self.policy_since_ns)))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Jobs with at least one registered stage, with their stage count.
    pub fn jobs(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for node in self.nodes.values() {
            for m in node.stages.values() {
                *out.entry(m.info.job_id.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    fn apply_events(&mut self) {
        while let Ok(event) = self.rx.try_recv() {
            match event {
                Event::NodeJoined { node, link } => {
                    log::info!("node {node} joined");
                    self.nodes.insert(node, NodeEntry { link, stages: BTreeMap::new() });
                }
                Event::NodeLeft { node } => {
                    log::info!("node {node} left");
                    self.nodes.remove(&node);
                }
                Event::StageRegistered { node, info } => match self.nodes.get_mut(&node) {
                    Some(n) => {
                        n.stages.insert(info.stage_id, StageMember { info, channel_ready: false, last_rate: None });
                    }
                    None => log::warn!("stage {} registered on unknown node {node}", info.stage_id),
                },
                Event::StageDeregistered { node, stage_id } => {
                    if let Some(n) = self.nodes.get_mut(&node) {
                        n.stages.remove(&stage_id);
                    }
                }
                Event::SetPolicy(policy) => {
                    log::info!("policy switched to {}", policy.algorithm);
                    self.policy = *policy;
                    self.policy_since_ns = self.clock.now_ns();
                }
            }
        }
    }

    fn collect(&self) -> BTreeMap<NodeId, Result<Vec<StatEntry>, LinkError>> {
        let timeout = self.rpc_timeout;
        if self.nodes.len() <= 1 {
            return self.nodes.iter().map(|(id, n)| (id.clone(), n.link.collect(timeout))).collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> =
                self.nodes.iter().map(|(id, n)| (id.clone(), s.spawn(move || n.link.collect(timeout)))).collect();
            handles
                .into_iter()
                .map(|(id, h)| (id, h.join().unwrap_or(Err(LinkError::Transport("collector panicked".into())))))
                .collect()
        })
    }

    fn send_rules(&self, batches: BTreeMap<NodeId, Vec<Rule>>) -> Vec<(NodeId, Rule, Status)> {
        let timeout = self.rpc_timeout;
        let nodes = &self.nodes;
        let run = |node: &NodeId, rules: &Vec<Rule>| -> Vec<Status> {
            match nodes.get(node) {
                Some(n) => n.link.apply_rules(rules, timeout),
                None => vec![Status::Failed; rules.len()],
            }
        };
        let statuses: Vec<Vec<Status>> = if batches.len() <= 1 {
            batches.iter().map(|(n, r)| run(n, r)).collect()
        } else {
            std::thread::scope(|s| {
                let hs: Vec<_> = batches.iter().map(|(n, r)| s.spawn(move || run(n, r))).collect();
                hs.into_iter().map(|h| h.join().unwrap_or_default()).collect()
            })
        };
        let mut out = Vec::new();
        for ((node, rules), statuses) in batches.into_iter().zip(statuses) {
            for (i, rule) in rules.into_iter().enumerate() {
                let status = statuses.get(i).copied().unwrap_or(Status::Failed);
                out.push((node.clone(), rule, status));
            }
        }
        out
    }

    /// One collect / compute / enforce pass.
    pub fn control_cycle(&mut self) -> CycleReport {
        self.apply_events();
        let policy = self.active_policy();
        let started = Instant::now();
        let timestamp_ns = self.clock.now_ns();

        // collect
        let collected = self.collect();
        let mut failed_nodes = Vec::new();
        // node -> job -> usage (policy unit per second)
        let mut node_usage: BTreeMap<NodeId, BTreeMap<String, f64>> = BTreeMap::new();
        for (node, result) in collected {
            match result {
                Ok(entries) => {
                    let per_job = node_usage.entry(node).or_default();
                    for e in entries.iter().filter(|e| e.channel_id == policy.channel.id && e.window_ns > 0) {
                        let amount = match policy.unit {
                            Unit::Ops => e.ops,
                            Unit::Bytes => e.bytes,
                        } as f64;
                        *per_job.entry(e.job_id.clone()).or_insert(0.0) += amount / ns_to_secs(e.window_ns);
                    }
                }
                Err(e) => {
                    log::warn!("collect from node {node} failed: {e}");
                    failed_nodes.push(node);
                }
            }
        }
        let mut members: BTreeMap<String, Vec<(NodeId, u64)>> = BTreeMap::new();
        for (node_id, node) in &self.nodes {
            for (sid, m) in &node.stages {
                members.entry(m.info.job_id.clone()).or_default().push((node_id.clone(), *sid));
            }
        }
        let usage_of = |job: &str| -> f64 { node_usage.values().filter_map(|m| m.get(job)).fold(0.0, |a, b| a + b) };

        // compute
        let fallback_demand = policy.max_rate / members.len().max(1) as f64;
        let states: Vec<JobState> = members
            .keys()
            .map(|job| JobState::new(job.clone(), policy.demand_of(job).unwrap_or(fallback_demand), usage_of(job)))
            .collect();
        let mut error = None;
        let allocation = match allocate(policy.algorithm, &policy.control_config(), policy.uniform_rate(), &states) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("allocation failed: {e}");
                error = Some(e.to_string());
                None
            }
        };
        let throttling = policy.algorithm != Algorithm::None;
        let mut jobs: Vec<JobCycle> = states
            .iter()
            .enumerate()
            .map(|(i, s)| JobCycle {
                job_id: s.job_id.clone(),
                demand: s.demand,
                usage: s.usage,
                base_rate: allocation.as_ref().and_then(|a| a.base.as_ref()).map(|b| b[i]),
                assigned: allocation.as_ref().map(|a| a.rates[i]),
                stages: members[&s.job_id].len(),
            })
            .collect();

        // enforce
        let mut batches: BTreeMap<NodeId, Vec<Rule>> = BTreeMap::new();
        let skip_enforce = throttling && allocation.is_none();
        if !skip_enforce {
            for job in &mut jobs {
                let stages = &members[&job.job_id];
                let rate = if throttling { job.assigned.unwrap_or(0.0) } else { f64::INFINITY };
                let usages: Vec<f64> = stages
                    .iter()
                    .map(|(node, _)| {
                        let on_node = stages.iter().filter(|(n, _)| n == node).count() as f64;
                        node_usage.get(node).and_then(|m| m.get(&job.job_id)).copied().unwrap_or(0.0) / on_node
                    })
                    .collect();
                let parts = split_job_rate(rate, &usages);
                for ((node, sid), part) in stages.iter().zip(parts) {
                    let member = &self.nodes[node].stages[sid];
                    let action = if !member.channel_ready {
                        RuleAction::CreateChannel {
                            granularity: policy.channel.granularity,
                            value: policy.channel.value_for(&member.info),
                            rate: part,
                        }
                    } else if throttling || member.last_rate.is_some_and(f64::is_finite) {
                        RuleAction::SetRate { rate: part }
                    } else {
                        continue;
                    };
                    batches.entry(node.clone()).or_default().push(Rule {
                        stage_id: *sid,
                        channel_id: policy.channel.id,
                        action,
                    });
                }
            }
        }
        let rules = self.send_rules(batches);
        for (node, rule, status) in &rules {
            let Some(member) = self.nodes.get_mut(node).and_then(|n| n.stages.get_mut(&rule.stage_id)) else {
                continue;
            };
            match (&rule.action, status) {
                (RuleAction::CreateChannel { .. }, Status::Ok) | (RuleAction::SetRate { .. }, Status::Ok) => {
                    member.channel_ready = true;
                    member.last_rate = Some(rule.rate());
                }
                // The channel already exists; rates follow next cycle.
                (RuleAction::CreateChannel { .. }, Status::InvalidRule) => member.channel_ready = true,
                (RuleAction::SetRate { .. }, Status::UnknownChannel) => member.channel_ready = false,
                _ => log::warn!("rule for stage {} on node {node} failed: {status:?}", rule.stage_id),
            }
        }
        let latency = started.elapsed();

        let report = CycleReport {
            index: self.cycles,
            timestamp_ns,
            algorithm: policy.algorithm,
            max_rate: policy.max_rate,
            jobs,
            rules,
            failed_nodes,
            latency,
            error,
        };
        self.cycles += 1;
        if let Some(log) = self.log.as_mut() {
            if let Err(e) = log.append(&report) {
                log::warn!("cycle log write failed: {e}");
            }
        }
        report
    }

    /// Run cycles every loop interval until `stop` is set.
    pub fn run(&mut self, stop: &AtomicBool, mut on_cycle: impl FnMut(&CycleReport)) {
        while !stop.load(Ordering::SeqCst) {
            let begun = Instant::now();
            let report = self.control_cycle();
            on_cycle(&report);
            let interval = Duration::from_secs_f64(self.active_policy().loop_interval_s);
            let deadline = begun + interval;
            while !stop.load(Ordering::SeqCst) {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                std::thread::sleep((deadline - now).min(Duration::from_millis(20)));
            }
        }
    }

    /// Job ids that currently have stages on `node`.
    pub fn jobs_on(&self, node: &str) -> BTreeSet<String> {
        self.nodes.get(node).map(|n| n.stages.values().map(|m| m.info.job_id.clone()).collect()).unwrap_or_default()
    }
}
