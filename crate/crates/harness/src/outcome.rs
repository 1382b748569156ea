//! Scenario results and the artifacts written from them.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use qosplane_core::algorithms::Algorithm;
use qosplane_core::controller::global::CycleLog;
use qosplane_core::controller::CycleReport;

use crate::scenario::{Mode, ScenarioSpec};

/// Aggregate throughput tolerated above Max_R before a window counts as a breach.
pub const CEILING_TOLERANCE: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub job_id: String,
    /// When the job's replay began, seconds since the run started.
    pub start_s: f64,
    /// Offered ops per run second.
    pub submitted: Vec<u64>,
    /// Completed ops per run second.
    pub completed: Vec<u64>,
    /// Seconds from start to the last completion; `None` if the job never finished.
    pub completion_s: Option<f64>,
}

impl JobOutcome {
    pub fn new(job_id: impl Into<String>) -> Self {
        JobOutcome { job_id: job_id.into(), start_s: 0.0, submitted: Vec::new(), completed: Vec::new(), completion_s: None }
    }

    pub fn total_submitted(&self) -> u64 {
        self.submitted.iter().sum()
    }

    pub fn total_completed(&self) -> u64 {
        self.completed.iter().sum()
    }

    pub fn finished(&self) -> bool {
        self.completion_s.is_some()
    }
}

pub(crate) fn bump(v: &mut Vec<u64>, second: usize, n: u64) {
    if v.len() <= second {
        v.resize(second + 1, 0);
    }
    v[second] += n;
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub max_rate: f64,
    pub duration_s: usize,
    pub jobs: Vec<JobOutcome>,
    pub cycles: Vec<CycleReport>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobSummary {
    pub job_id: String,
    pub start_s: f64,
    pub completion_s: Option<f64>,
    pub submitted: u64,
    pub completed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub max_rate: f64,
    pub duration_s: usize,
    pub failed: bool,
    pub error: Option<String>,
    pub peak_aggregate: u64,
    pub windows_over_max_rate: usize,
    pub windows_over_tolerance: usize,
    pub makespan_s: Option<f64>,
    pub cycles: usize,
    pub jobs: Vec<JobSummary>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest {
    name: String,
    created_unix_s: u64,
    tool_version: &'static str,
    scenario: String,
    files: Vec<String>,
}

impl RunOutcome {
    pub fn empty(spec: &ScenarioSpec) -> Self {
        RunOutcome {
            name: spec.name.clone(),
            mode: spec.mode,
            algorithm: spec.algorithm,
            max_rate: spec.max_rate,
            duration_s: 0,
            jobs: Vec::new(),
            cycles: Vec::new(),
            failed: false,
            error: None,
        }
    }

    pub fn job(&self, job_id: &str) -> Option<&JobOutcome> {
        self.jobs.iter().find(|j| j.job_id == job_id)
    }

    /// Completed ops of all jobs per second.
    pub fn aggregate_completed(&self) -> Vec<u64> {
        let mut out = vec![0; self.duration_s];
        for job in &self.jobs {
            for (s, n) in job.completed.iter().enumerate() {
                bump(&mut out, s, *n);
            }
        }
        out
    }

    pub fn peak_aggregate(&self) -> u64 {
        self.aggregate_completed().into_iter().max().unwrap_or(0)
    }

    pub fn windows_over(&self, limit: f64) -> usize {
        self.aggregate_completed().into_iter().filter(|&n| n as f64 > limit).count()
    }

    /// Time until every job finished, measured from the run start.
    pub fn makespan_s(&self) -> Option<f64> {
        self.jobs.iter().map(|j| j.completion_s.map(|c| j.start_s + c)).try_fold(0.0_f64, |acc, t| t.map(|t| acc.max(t)))
    }

    pub fn summary(&self) -> Summary {
        Summary {
            name: self.name.clone(),
            mode: self.mode,
            algorithm: self.algorithm,
            max_rate: self.max_rate,
            duration_s: self.duration_s,
            failed: self.failed,
            error: self.error.clone(),
            peak_aggregate: self.peak_aggregate(),
            windows_over_max_rate: self.windows_over(self.max_rate),
            windows_over_tolerance: self.windows_over(self.max_rate * CEILING_TOLERANCE),
            makespan_s: if self.jobs.is_empty() { Some(0.0) } else { self.makespan_s() },
            cycles: self.cycles.len(),
            jobs: self
                .jobs
                .iter()
                .map(|j| JobSummary {
                    job_id: j.job_id.clone(),
                    start_s: j.start_s,
                    completion_s: j.completion_s,
                    submitted: j.total_submitted(),
                    completed: j.total_completed(),
                })
                .collect(),
        }
    }

    /// `second, job_id, submitted, completed`: one row per second and job.
    pub fn write_throughput_csv(&self, path: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["second", "job_id", "submitted", "completed"])?;
        for s in 0..self.duration_s {
            for job in &self.jobs {
                let sub = job.submitted.get(s).copied().unwrap_or(0);
                let done = job.completed.get(s).copied().unwrap_or(0);
                w.write_record([s.to_string(), job.job_id.clone(), sub.to_string(), done.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes throughput.csv, cycles.csv, summary.json and manifest.json into `dir`.
    pub fn write_artifacts(&self, dir: &Path, spec: &ScenarioSpec) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let throughput = dir.join("throughput.csv");
        self.write_throughput_csv(&throughput)?;
        let cycles = dir.join("cycles.csv");
        let mut log = CycleLog::create(&cycles)?;
        for c in &self.cycles {
            log.append(c)?;
        }
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(&self.summary())?)?;
        let manifest_path = dir.join("manifest.json");
        let manifest = Manifest {
            name: self.name.clone(),
            created_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION"),
            scenario: spec.to_toml(),
            files: ["throughput.csv", "cycles.csv", "summary.json"].map(String::from).to_vec(),
        };
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(vec![throughput, cycles, summary, manifest_path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome() -> RunOutcome {
        let mut a = JobOutcome::new("a");
        a.submitted = vec![5, 5];
        a.completed = vec![4, 6];
        a.completion_s = Some(2.0);
        let mut b = JobOutcome::new("b");
        b.start_s = 1.0;
        b.submitted = vec![0, 8, 0];
        b.completed = vec![0, 7, 1];
        b.completion_s = Some(1.5);
        RunOutcome {
            name: "t".into(),
            mode: Mode::Simulated,
            algorithm: Algorithm::Psfa,
            max_rate: 10.0,
            duration_s: 3,
            jobs: vec![a, b],
            cycles: Vec::new(),
            failed: false,
            error: None,
        }
    }

    #[test]
    fn aggregates() {
        let o = outcome();
        assert_eq!(o.aggregate_completed(), vec![4, 13, 1]);
        assert_eq!(o.peak_aggregate(), 13);
        assert_eq!(o.windows_over(10.0), 1);
        assert_eq!(o.makespan_s(), Some(2.5));
        let s = o.summary();
        assert_eq!(s.windows_over_tolerance, 1);
        assert_eq!(s.jobs[1].completed, 8);
    }

    #[test]
    fn unfinished_job_has_no_makespan() {
        let mut o = outcome();
        o.jobs[0].completion_s = None;
        assert_eq!(o.makespan_s(), None);
    }

    #[test]
    fn throughput_rows_cover_every_second_and_job() {
        let o = outcome();
        let dir = tempfile::tempdir().unwrap();
        let spec = ScenarioSpec::new(Algorithm::Psfa, 10.0);
        let files = o.write_artifacts(dir.path(), &spec).unwrap();
        assert_eq!(files.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("throughput.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(text.contains("2,a,0,0"));
        assert!(text.contains("1,b,8,7"));
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["peak_aggregate"], 13);
        assert_eq!(summary["algorithm"], "psfa");
    }
}
