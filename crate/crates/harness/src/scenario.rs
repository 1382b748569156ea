//! Scenario files: which jobs run, when, with what traces and under which policy.
//!
//! ```toml
//! name = "mini"
//! mode = "simulated"          # or "live"
//! algorithm = "psfa"
//! max_rate = 11000.0
//! total_load = 8000.0         # split across jobs by load_share
//! burst_window_ms = 10
//!
//! [[jobs]]
//! job_id = "job1"
//! demand = 1500.0
//! load_share = 0.25
//! start_offset_s = 0.0
//! trace = { kind = "synthetic", duration_s = 240, mix = { getattr = 1.0 } }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use qosplane_core::algorithms::Algorithm;
use qosplane_core::controller::policy::ChannelSpec;
use qosplane_core::controller::Policy;
use qosplane_core::request::OpType;
use qosplane_core::workload::{generate_mix, BurstProfile, RateCurveTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Discrete-time run on a virtual clock.
    #[default]
    Simulated,
    /// Real time, every component talking over loopback TCP.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSpec {
    Synthetic {
        duration_s: usize,
        /// Defaults to the job's share of `total_load`.
        #[serde(default)]
        mean_rate: Option<f64>,
        #[serde(default = "default_mix")]
        mix: BTreeMap<OpType, f64>,
        #[serde(default)]
        profile: BurstProfile,
        /// Per-job seed; defaults to the scenario seed mixed with the job index.
        #[serde(default)]
        seed: Option<u64>,
    },
    Constant {
        op_type: OpType,
        rate: u64,
        duration_s: usize,
    },
    Files {
        dir: PathBuf,
    },
}

fn default_mix() -> BTreeMap<OpType, f64> {
    BTreeMap::from([(OpType::Getattr, 1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    #[serde(default = "one")]
    pub nodes: usize,
    pub demand: f64,
    #[serde(default)]
    pub load_share: Option<f64>,
    #[serde(default)]
    pub start_offset_s: f64,
    #[serde(default = "four")]
    pub threads: usize,
    pub trace: TraceSpec,
    #[serde(default = "unit")]
    pub time_compression: f64,
    #[serde(default = "unit")]
    pub rate_scale: f64,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub max_rate: f64,
    #[serde(default = "half")]
    pub epsilon: f64,
    #[serde(default = "unit")]
    pub loop_interval_s: f64,
    #[serde(default)]
    pub uniform_rate: Option<f64>,
    #[serde(default)]
    pub total_load: Option<f64>,
    #[serde(default = "default_burst_window")]
    pub burst_window_ms: u64,
    /// Simulator step.
    #[serde(default = "one_u64")]
    pub tick_ms: u64,
    #[serde(default)]
    pub seed: u64,
    /// Hard stop after the last job's trace ends, to bound backlog drains.
    #[serde(default = "default_drain_cap")]
    pub drain_cap_s: f64,
    #[serde(default)]
    pub channel: Option<ChannelSpec>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
}

fn default_name() -> String {
    "scenario".to_string()
}

fn half() -> f64 {
    0.5
}

fn default_burst_window() -> u64 {
    100
}

fn one_u64() -> u64 {
    1
}

fn default_drain_cap() -> f64 {
    600.0
}

impl ScenarioSpec {
    pub fn new(algorithm: Algorithm, max_rate: f64) -> Self {
        ScenarioSpec {
            name: default_name(),
            mode: Mode::Simulated,
            algorithm,
            max_rate,
            epsilon: half(),
            loop_interval_s: 1.0,
            uniform_rate: None,
            total_load: None,
            burst_window_ms: default_burst_window(),
            tick_ms: 1,
            seed: 0,
            drain_cap_s: default_drain_cap(),
            channel: None,
            jobs: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).context("parsing scenario")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = Self::from_toml(&text)?;
        // Relative trace directories are resolved against the scenario file.
        if let Some(base) = path.parent() {
            for job in &mut spec.jobs {
                if let TraceSpec::Files { dir } = &mut job.trace {
                    if dir.is_relative() {
                        *dir = base.join(&*dir);
                    }
                }
            }
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.policy().validate()?;
        if self.tick_ms == 0 {
            bail!("tick_ms must be positive");
        }
        let mut ids = std::collections::BTreeSet::new();
        for job in &self.jobs {
            if !ids.insert(&job.job_id) {
                bail!("duplicate job id {}", job.job_id);
            }
            if !(job.start_offset_s >= 0.0 && job.start_offset_s.is_finite()) {
                bail!("job {}: start offset must be non-negative", job.job_id);
            }
            if job.nodes == 0 || job.threads == 0 {
                bail!("job {}: nodes and threads must be at least 1", job.job_id);
            }
            if !(job.time_compression > 0.0 && job.rate_scale > 0.0) {
                bail!("job {}: time_compression and rate_scale must be positive", job.job_id);
            }
            if let Some(s) = job.load_share {
                if !(0.0..=1.0).contains(&s) {
                    bail!("job {}: load_share must be in [0, 1]", job.job_id);
                }
            }
            if let TraceSpec::Synthetic { mean_rate: None, .. } = job.trace {
                if self.total_load.is_none() || job.load_share.is_none() {
                    bail!("job {}: synthetic trace needs mean_rate or total_load with load_share", job.job_id);
                }
            }
        }
        let shares: Vec<f64> = self.jobs.iter().filter_map(|j| j.load_share).collect();
        if !shares.is_empty() {
            let sum: f64 = shares.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                bail!("load shares sum to {sum}, expected 1");
            }
        }
        Ok(())
    }

    /// Policy handed to the global controller.
    pub fn policy(&self) -> Policy {
        let mut p = Policy::new(self.algorithm, self.max_rate);
        p.epsilon = self.epsilon;
        p.loop_interval_s = self.loop_interval_s;
        p.uniform_rate = self.uniform_rate;
        p.max_jobs = Some(self.jobs.len().max(1));
        if let Some(ch) = &self.channel {
            p.channel = ch.clone();
        }
        for job in &self.jobs {
            p = p.with_job(job.job_id.clone(), job.demand);
        }
        p
    }

    /// Same scenario under another algorithm.
    pub fn with_algorithm(&self, algorithm: Algorithm) -> Self {
        ScenarioSpec { algorithm, ..self.clone() }
    }

    /// Traces for job `index`, before per-node splitting.
    pub fn traces_for(&self, index: usize) -> anyhow::Result<Vec<RateCurveTrace>> {
        let job = &self.jobs[index];
        Ok(match &job.trace {
            TraceSpec::Synthetic { duration_s, mean_rate, mix, profile, seed } => {
                let mean = mean_rate.unwrap_or_else(|| self.total_load.unwrap_or(0.0) * job.load_share.unwrap_or(0.0));
                let seed = seed.unwrap_or_else(|| self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1));
                let shares: Vec<(OpType, f64)> = mix.iter().map(|(k, v)| (*k, *v)).collect();
                generate_mix(seed, *duration_s, mean, &shares, *profile)
            }
            TraceSpec::Constant { op_type, rate, duration_s } => {
                vec![RateCurveTrace::constant(*op_type, *rate, *duration_s)]
            }
            TraceSpec::Files { dir } => RateCurveTrace::load_dir(dir)
                .with_context(|| format!("loading traces for job {} from {}", job.job_id, dir.display()))?,
        })
    }
}
