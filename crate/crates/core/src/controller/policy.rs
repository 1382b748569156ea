//! QoS policy files.
//!
//! ```toml
//! algorithm = "psfa"          # none | uniform | priority | psharing | psfa
//! max_rate = 11000.0
//! epsilon = 0.5
//! loop_interval_s = 1.0
//! default_demand = 1000.0
//! unit = "ops"                # or "bytes"
//!
//! [channel]
//! id = 1
//! granularity = "job"         # value defaults to the stage's job (or user) id
//!
//! [[jobs]]
//! job_id = "j1"
//! demand = 1500.0
//!
//! [[steps]]                   # applied once `at_s` seconds have elapsed
//! at_s = 360.0
//! max_rate = 10000.0
//! demands = { j1 = 1000.0 }
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{Algorithm, AlgorithmError, ControlConfig, DEFAULT_EPSILON};
use crate::request::{Granularity, Matcher, RequestError};
use crate::stage::StageInfo;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("policy blob is not utf-8")]
    Encoding,
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Matcher(#[from] RequestError),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Ops,
    Bytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    #[serde(default = "default_channel_id")]
    pub id: u32,
    pub granularity: Granularity,
    /// Fixed match value. Absent means the stage's own job id (job
    /// granularity) or user id (user granularity).
    #[serde(default)]
    pub value: Option<String>,
}

fn default_channel_id() -> u32 {
    1
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec { id: default_channel_id(), granularity: Granularity::Job, value: None }
    }
}

impl ChannelSpec {
    /// The concrete match value for one stage.
    pub fn value_for(&self, info: &StageInfo) -> String {
        match (&self.value, self.granularity) {
            (Some(v), _) => v.clone(),
            (None, Granularity::User) => info.user_id.clone(),
            (None, _) => info.job_id.clone(),
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        match (&self.value, self.granularity) {
            (Some(v), g) => {
                Matcher::parse(g, v)?;
            }
            (None, Granularity::OpType | Granularity::OpClass) => {
                return Err(PolicyError::Invalid(format!("channel granularity {} needs a value", self.granularity.name())))
            }
            (None, _) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPolicy {
    pub job_id: String,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyStep {
    pub at_s: f64,
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub max_rate: Option<f64>,
    #[serde(default)]
    pub demands: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub algorithm: Algorithm,
    pub max_rate: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_loop_interval")]
    pub loop_interval_s: f64,
    /// Demand for jobs not listed under `jobs`.
    #[serde(default)]
    pub default_demand: Option<f64>,
    /// Fixed per-job rate for the uniform algorithm; defaults to `max_rate / max_jobs`.
    #[serde(default)]
    pub uniform_rate: Option<f64>,
    #[serde(default)]
    pub max_jobs: Option<usize>,
    #[serde(default)]
    pub unit: Unit,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub jobs: Vec<JobPolicy>,
    #[serde(default)]
    pub steps: Vec<PolicyStep>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_loop_interval() -> f64 {
    1.0
}

impl Policy {
    pub fn new(algorithm: Algorithm, max_rate: f64) -> Self {
        Policy {
            algorithm,
            max_rate,
            epsilon: DEFAULT_EPSILON,
            loop_interval_s: 1.0,
            default_demand: None,
            uniform_rate: None,
            max_jobs: None,
            unit: Unit::Ops,
            channel: ChannelSpec::default(),
            jobs: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn with_job(mut self, job_id: impl Into<String>, demand: f64) -> Self {
        self.jobs.push(JobPolicy { job_id: job_id.into(), demand });
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let policy: Policy = toml::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self, PolicyError> {
        Policy::from_toml(std::str::from_utf8(blob).map_err(|_| PolicyError::Encoding)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    pub fn control_config(&self) -> ControlConfig {
        ControlConfig { max_rate: self.max_rate, epsilon: self.epsilon, loop_interval: self.loop_interval_s }
    }

    pub fn demand_of(&self, job_id: &str) -> Option<f64> {
        self.jobs.iter().find(|j| j.job_id == job_id).map(|j| j.demand).or(self.default_demand)
    }

    pub fn uniform_rate(&self) -> f64 {
        self.uniform_rate.unwrap_or_else(|| self.max_rate / self.max_jobs.unwrap_or(self.jobs.len()).max(1) as f64)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.control_config().validate()?;
        self.channel.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for j in &self.jobs {
            if j.job_id.is_empty() || !seen.insert(&j.job_id) {
                return Err(PolicyError::Invalid(format!("empty or duplicate job id `{}`", j.job_id)));
            }
            if !(j.demand > 0.0 && j.demand.is_finite()) {
                return Err(PolicyError::Invalid(format!("job {}: demand must be positive", j.job_id)));
            }
        }
        if let Some(d) = self.default_demand {
            if !(d > 0.0 && d.is_finite()) {
                return Err(PolicyError::Invalid("default_demand must be positive".into()));
            }
        }
        if let Some(r) = self.uniform_rate {
            if !(r >= 0.0) {
                return Err(PolicyError::Invalid("uniform_rate must be non-negative".into()));
            }
        }
        if self.algorithm == Algorithm::Priority {
            let sum: f64 = self.jobs.iter().map(|j| j.demand).sum();
            if sum > self.max_rate * (1.0 + 1e-12) {
                return Err(AlgorithmError::LimitsExceedCapacity { sum, max_rate: self.max_rate }.into());
            }
        }
        let mut last = f64::NEG_INFINITY;
        for step in &self.steps {
            if !(step.at_s >= 0.0) || step.at_s < last {
                return Err(PolicyError::Invalid("steps must have non-negative, non-decreasing at_s".into()));
            }
            last = step.at_s;
        }
        for step in &self.steps {
            self.at(step.at_s).validate()?;
        }
        Ok(())
    }

    /// The policy in force `elapsed_s` seconds after it was installed, with
    /// every due step folded in.
    pub fn at(&self, elapsed_s: f64) -> Policy {
        let mut p = self.clone();
        p.steps.clear();
        for step in self.steps.iter().filter(|s| s.at_s <= elapsed_s) {
            if let Some(a) = step.algorithm {
                p.algorithm = a;
            }
            if let Some(m) = step.max_rate {
                p.max_rate = m;
            }
            for (job_id, demand) in &step.demands {
                match p.jobs.iter_mut().find(|j| &j.job_id == job_id) {
                    Some(j) => j.demand = *demand,
                    None => p.jobs.push(JobPolicy { job_id: job_id.clone(), demand: *demand }),
                }
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
algorithm = "priority"
max_rate = 110.0
default_demand = 10.0

[channel]
granularity = "job"

[[jobs]]
job_id = "j1"
demand = 30.0

[[steps]]
at_s = 360.0
demands = { j1 = 10.0 }
"#;

    #[test]
    fn parses_and_steps() {
        let p = Policy::from_toml(SAMPLE).unwrap();
        assert_eq!(p.algorithm, Algorithm::Priority);
        assert_eq!(p.epsilon, 0.5);
        assert_eq!(p.channel.id, 1);
        assert_eq!(p.demand_of("j1"), Some(30.0));
        assert_eq!(p.demand_of("other"), Some(10.0));
        assert_eq!(p.at(359.9).demand_of("j1"), Some(30.0));
        assert_eq!(p.at(360.0).demand_of("j1"), Some(10.0));
        assert_eq!(Policy::from_blob(p.to_toml().as_bytes()).unwrap(), p);
    }

    #[test]
    fn priority_over_capacity_rejected() {
        let p = Policy::new(Algorithm::Priority, 110.0).with_job("a", 60.0).with_job("b", 60.0);
        assert!(matches!(p.validate(), Err(PolicyError::Algorithm(AlgorithmError::LimitsExceedCapacity { .. }))));
        let mut stepped = Policy::new(Algorithm::Priority, 110.0).with_job("a", 60.0);
        stepped.steps.push(PolicyStep { at_s: 5.0, max_rate: Some(50.0), ..Default::default() });
        assert!(stepped.validate().is_err());
    }

    #[test]
    fn channel_values() {
        let info = StageInfo { user_id: "alice".into(), ..StageInfo::new("j7") };
        assert_eq!(ChannelSpec::default().value_for(&info), "j7");
        let user = ChannelSpec { granularity: Granularity::User, ..ChannelSpec::default() };
        assert_eq!(user.value_for(&info), "alice");
        let mut p = Policy::new(Algorithm::Psfa, 1.0);
        p.channel = ChannelSpec { id: 2, granularity: Granularity::OpClass, value: None };
        assert!(p.validate().is_err());
        p.channel.value = Some("metadata".into());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn uniform_rate_defaults() {
        let p = Policy::new(Algorithm::Uniform, 110.0).with_job("a", 1.0).with_job("b", 1.0);
        assert_eq!(p.uniform_rate(), 55.0);
        let p = Policy { max_jobs: Some(4), ..p };
        assert_eq!(p.uniform_rate(), 27.5);
    }
}
