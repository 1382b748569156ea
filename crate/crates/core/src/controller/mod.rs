//! Control plane: per-node local controllers proxying stages, and the global
//! controller running the collect / compute / enforce / sleep loop.
//!
//! Components talk through link traits so the same logic runs in-process
//! (simulation, tests) or over the wire protocol ([`net`]).

pub mod global;
pub mod local;
pub mod net;
pub mod policy;

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::protocol::transport::TransportError;
use crate::protocol::{Rule, RuleAction, StatEntry, Status};
use crate::stage::{HousekeepingRule, Stage, StageError, StageInfo, StageStats};

pub use global::{CycleReport, GlobalController, GlobalHandle, JobCycle};
pub use local::{LocalController, NodeStats};
pub use policy::Policy;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("peer did not answer in time")]
    Timeout,
    #[error("peer disconnected")]
    Closed,
    #[error("peer rejected the request: {0:?}")]
    Rejected(Status),
    #[error("transport: {0}")]
    Transport(String),
}

impl From<TransportError> for LinkError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => LinkError::Timeout,
            TransportError::Closed => LinkError::Closed,
            other => LinkError::Transport(other.to_string()),
        }
    }
}

/// The local controller's view of one stage.
pub trait StageLink: Send + Sync {
    fn collect(&self, timeout: Duration) -> Result<StageStats, LinkError>;
    fn apply(&self, rule: &HousekeepingRule, timeout: Duration) -> Result<(), LinkError>;
}

/// The global controller's view of one node.
pub trait NodeLink: Send + Sync {
    fn collect(&self, timeout: Duration) -> Result<Vec<StatEntry>, LinkError>;
    /// One status per rule, in order.
    fn apply_rules(&self, rules: &[Rule], timeout: Duration) -> Vec<Status>;
}

/// Where a local controller forwards registrations.
pub trait Upstream: Send + Sync {
    fn register(&self, info: &StageInfo) -> Result<(), LinkError>;
    fn deregister(&self, stage_id: u64) -> Result<(), LinkError>;
}

/// A stage in the same address space.
pub struct DirectStage(pub Arc<Stage>);

impl StageLink for DirectStage {
    fn collect(&self, _timeout: Duration) -> Result<StageStats, LinkError> {
        Ok(self.0.collect_stats())
    }

    fn apply(&self, rule: &HousekeepingRule, _timeout: Duration) -> Result<(), LinkError> {
        self.0.apply_housekeeping_rule(rule).map_err(|e| LinkError::Rejected(status_of(&e)))
    }
}

/// A local controller in the same address space.
pub struct DirectNode(pub Arc<LocalController>);

impl NodeLink for DirectNode {
    fn collect(&self, _timeout: Duration) -> Result<Vec<StatEntry>, LinkError> {
        Ok(self.0.aggregate_and_report().entries)
    }

    fn apply_rules(&self, rules: &[Rule], _timeout: Duration) -> Vec<Status> {
        self.0.apply_rules(rules)
    }
}

pub fn status_of(e: &StageError) -> Status {
    match e {
        StageError::UnknownChannel(_) => Status::UnknownChannel,
        StageError::DuplicateChannel(_)
        | StageError::DuplicateMatcher { .. }
        | StageError::Matcher(_)
        | StageError::Bucket(_) => Status::InvalidRule,
        _ => Status::Failed,
    }
}

pub fn rule_to_housekeeping(rule: &Rule) -> HousekeepingRule {
    match &rule.action {
        RuleAction::CreateChannel { granularity, value, rate } => HousekeepingRule::CreateChannel {
            channel_id: rule.channel_id,
            granularity: *granularity,
            value: value.clone(),
            rate: *rate,
        },
        RuleAction::SetRate { rate } => HousekeepingRule::SetChannelRate { channel_id: rule.channel_id, rate: *rate },
    }
}

pub fn stats_to_entries(stats: &StageStats) -> Vec<StatEntry> {
    stats
        .channels
        .iter()
        .map(|c| StatEntry {
            job_id: stats.job_id.clone(),
            channel_id: c.channel_id,
            ops: c.ops,
            bytes: c.bytes,
            window_ns: stats.window_ns,
        })
        .collect()
}

/// Split a job's rate over its stages in proportion to their usage, equally
/// when none has usage. The last stage absorbs rounding so the parts sum to
/// `job_rate`.
pub fn split_job_rate(job_rate: f64, usages: &[f64]) -> Vec<f64> {
    let n = usages.len();
    if n == 0 {
        return Vec::new();
    }
    if job_rate.is_infinite() {
        return vec![job_rate; n];
    }
    let total: f64 = usages.iter().sum();
    let mut out: Vec<f64> = if total > 0.0 {
        usages.iter().map(|u| job_rate * (u / total)).collect()
    } else {
        vec![job_rate / n as f64; n]
    };
    let head: f64 = out[..n - 1].iter().sum();
    out[n - 1] = (job_rate - head).max(0.0);
    out
}
