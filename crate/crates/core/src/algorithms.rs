//! Allocation algorithms mapping job demands and measured usage to rates.
//!
//! All functions are pure and unit-agnostic: `max_rate`, demands and usages
//! only need to share one unit (ops/s or bytes/s). Outputs are aligned with
//! the input slice; the dynamic algorithms visit jobs in increasing-demand
//! order with `job_id` as tiebreak.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgorithmError {
    #[error("max_rate must be positive and finite (got {0})")]
    InvalidMaxRate(f64),
    #[error("epsilon must lie in [0, 1] (got {0})")]
    InvalidEpsilon(f64),
    #[error("loop interval must be positive (got {0})")]
    InvalidLoopInterval(f64),
    #[error("job {job_id}: demand must be positive (got {demand})")]
    InvalidDemand { job_id: String, demand: f64 },
    #[error("job {job_id}: usage must be non-negative (got {usage})")]
    InvalidUsage { job_id: String, usage: f64 },
    #[error("sum of priority limits {sum} exceeds max_rate {max_rate}")]
    LimitsExceedCapacity { sum: f64, max_rate: f64 },
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub max_rate: f64,
    pub epsilon: f64,
    /// Seconds between control cycles.
    pub loop_interval: f64,
}

impl ControlConfig {
    pub fn new(max_rate: f64) -> Self {
        ControlConfig { max_rate, epsilon: DEFAULT_EPSILON, loop_interval: 1.0 }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<(), AlgorithmError> {
        if !(self.max_rate > 0.0 && self.max_rate.is_finite()) {
            return Err(AlgorithmError::InvalidMaxRate(self.max_rate));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(AlgorithmError::InvalidEpsilon(self.epsilon));
        }
        if !(self.loop_interval > 0.0 && self.loop_interval.is_finite()) {
            return Err(AlgorithmError::InvalidLoopInterval(self.loop_interval));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: String,
    /// QoS limit the job is entitled to under contention.
    pub demand: f64,
    /// Throughput measured over the last control window.
    pub usage: f64,
}

impl JobState {
    pub fn new(job_id: impl Into<String>, demand: f64, usage: f64) -> Self {
        JobState { job_id: job_id.into(), demand, usage }
    }
}

fn check_jobs(jobs: &[JobState]) -> Result<(), AlgorithmError> {
    for j in jobs {
        if !(j.demand > 0.0 && j.demand.is_finite()) {
            return Err(AlgorithmError::InvalidDemand { job_id: j.job_id.clone(), demand: j.demand });
        }
        if !(j.usage >= 0.0 && j.usage.is_finite()) {
            return Err(AlgorithmError::InvalidUsage { job_id: j.job_id.clone(), usage: j.usage });
        }
    }
    Ok(())
}

/// Indices of `jobs` in increasing demand, ties broken by job id.
pub fn demand_order(jobs: &[JobState]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| {
        jobs[a]
            .demand
            .partial_cmp(&jobs[b].demand)
            .unwrap_or(Ordering::Equal)
            .then_with(|| jobs[a].job_id.cmp(&jobs[b].job_id))
    });
    order
}

/// Every job gets the same fixed rate, whatever its usage.
pub fn allocate_uniform(per_job_rate: f64, jobs: &[JobState]) -> Vec<f64> {
    vec![per_job_rate.max(0.0); jobs.len()]
}

/// Every job gets exactly its configured limit (its `demand`).
pub fn allocate_priority(config: &ControlConfig, jobs: &[JobState]) -> Result<Vec<f64>, AlgorithmError> {
    config.validate()?;
    check_jobs(jobs)?;
    let sum: f64 = jobs.iter().map(|j| j.demand).sum();
    if sum > config.max_rate * (1.0 + 1e-12) {
        return Err(AlgorithmError::LimitsExceedCapacity { sum, max_rate: config.max_rate });
    }
    Ok(jobs.iter().map(|j| j.demand).collect())
}

/// Max-min fair water-filling over demands; leftover capacity is then shared
/// in proportion to demand.
pub fn allocate_psharing(config: &ControlConfig, jobs: &[JobState]) -> Result<Vec<f64>, AlgorithmError> {
    config.validate()?;
    check_jobs(jobs)?;
    let mut rates = vec![0.0; jobs.len()];
    if jobs.is_empty() {
        return Ok(rates);
    }
    let order = demand_order(jobs);
    let mut left = config.max_rate;
    for (i, &idx) in order.iter().enumerate() {
        let fair_share = left / (order.len() - i) as f64;
        if fair_share < jobs[idx].demand {
            // Demands are sorted, so every remaining job is capped at the same level.
            for &rest in &order[i..] {
                rates[rest] = fair_share;
            }
            return Ok(rates);
        }
        rates[idx] = jobs[idx].demand;
        left -= jobs[idx].demand;
    }
    // Everyone is satisfied: d + d/D * leftover == d * max_rate / D.
    let total_demand: f64 = jobs.iter().map(|j| j.demand).sum();
    for (rate, job) in rates.iter_mut().zip(jobs) {
        *rate = job.demand * config.max_rate / total_demand;
    }
    Ok(rates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsfaOutcome {
    /// Rates after the max-min pass, before leftover redistribution.
    pub base: Vec<f64>,
    /// Capacity left after the max-min pass.
    pub leftover: f64,
    pub rates: Vec<f64>,
}

/// Proportional sharing without false allocation.
///
/// Under-loaded jobs are capped near their usage plus `epsilon` of the gap to
/// their demand; overloaded jobs are capped at their demand. Whatever is left
/// is handed out in proportion to measured usage (equally when every job is idle).
pub fn allocate_psfa(config: &ControlConfig, jobs: &[JobState]) -> Result<PsfaOutcome, AlgorithmError> {
    config.validate()?;
    check_jobs(jobs)?;
    let n = jobs.len();
    let mut base = vec![0.0; n];
    if n == 0 {
        return Ok(PsfaOutcome { base: Vec::new(), leftover: config.max_rate, rates: Vec::new() });
    }
    let order = demand_order(jobs);
    let mut left = config.max_rate;
    for (i, &idx) in order.iter().enumerate() {
        let job = &jobs[idx];
        let fair_share = left / (n - i) as f64;
        let rate = if job.usage <= job.demand {
            let threshold = (job.demand - job.usage) * config.epsilon;
            (job.usage + threshold).min(fair_share)
        } else {
            job.demand.min(fair_share)
        };
        base[idx] = rate;
        left -= rate;
    }

    let total_usage: f64 = jobs.iter().map(|j| j.usage).sum();
    let mut rates = base.clone();
    for &idx in &order {
        let proportion = if total_usage > 0.0 { jobs[idx].usage / total_usage } else { 1.0 / n as f64 };
        rates[idx] += proportion * left;
    }
    Ok(PsfaOutcome { base, leftover: left, rates })
}

/// The algorithm a policy selects. `None` leaves stages unthrottled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    None,
    Uniform,
    Priority,
    #[serde(rename = "psharing")]
    ProportionalSharing,
    Psfa,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::None, Algorithm::Uniform, Algorithm::Priority, Algorithm::ProportionalSharing, Algorithm::Psfa];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::None => "none",
            Algorithm::Uniform => "uniform",
            Algorithm::Priority => "priority",
            Algorithm::ProportionalSharing => "psharing",
            Algorithm::Psfa => "psfa",
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, Algorithm::ProportionalSharing | Algorithm::Psfa)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = AlgorithmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Algorithm::None),
            "uniform" => Ok(Algorithm::Uniform),
            "priority" => Ok(Algorithm::Priority),
            "psharing" | "proportional_sharing" => Ok(Algorithm::ProportionalSharing),
            "psfa" => Ok(Algorithm::Psfa),
            _ => Err(AlgorithmError::UnknownAlgorithm(s.to_string())),
        }
    }
}

/// Result of one compute step.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub rates: Vec<f64>,
    /// PSFA only: pre-redistribution rates.
    pub base: Option<Vec<f64>>,
}

/// Dispatch to the selected algorithm. Returns `None` for [`Algorithm::None`].
pub fn allocate(
    algorithm: Algorithm,
    config: &ControlConfig,
    uniform_rate: f64,
    jobs: &[JobState],
) -> Result<Option<Allocation>, AlgorithmError> {
    Ok(match algorithm {
        Algorithm::None => None,
        Algorithm::Uniform => Some(Allocation { rates: allocate_uniform(uniform_rate, jobs), base: None }),
        Algorithm::Priority => Some(Allocation { rates: allocate_priority(config, jobs)?, base: None }),
        Algorithm::ProportionalSharing => Some(Allocation { rates: allocate_psharing(config, jobs)?, base: None }),
        Algorithm::Psfa => {
            let out = allocate_psfa(config, jobs)?;
            Some(Allocation { rates: out.rates, base: Some(out.base) })
        }
    })
}
