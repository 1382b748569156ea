//! Rate-curve traces: files, synthetic generation and replay against a stage.

mod generator;
mod replay;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::request::OpType;

pub use generator::{generate_mix, generate_synthetic_trace, BurstProfile};
pub use replay::{build_schedule, replay, FdPool, ReplayReport, ReplayerConfig, ScheduledOp};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: line {line}: `{text}` is not a non-negative integer")]
    BadSample { path: PathBuf, line: usize, text: String },
    #[error("{0}: trace file name must be <optype>_log.txt")]
    BadName(PathBuf),
    #[error("{0}: empty trace")]
    Empty(PathBuf),
}

/// Ops to submit in each replay second, for one operation type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateCurveTrace {
    pub op_type: OpType,
    pub samples: Vec<u64>,
}

impl RateCurveTrace {
    pub fn new(op_type: OpType, samples: Vec<u64>) -> Self {
        RateCurveTrace { op_type, samples }
    }

    pub fn constant(op_type: OpType, rate: u64, seconds: usize) -> Self {
        RateCurveTrace { op_type, samples: vec![rate; seconds] }
    }

    pub fn total(&self) -> u64 {
        self.samples.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.total() as f64 / self.samples.len() as f64
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}_log.txt", self.op_type.name())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 6);
        for s in &self.samples {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> io::Result<PathBuf> {
        let path = dir.join(self.file_name());
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Read `<optype>_log.txt`. Blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let op_type = name
            .strip_suffix("_log.txt")
            .and_then(|op| op.parse::<OpType>().ok())
            .ok_or_else(|| TraceError::BadName(path.to_path_buf()))?;
        let text = fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            samples.push(line.parse::<u64>().map_err(|_| TraceError::BadSample {
                path: path.to_path_buf(),
                line: i + 1,
                text: line.to_string(),
            })?);
        }
        if samples.is_empty() {
            return Err(TraceError::Empty(path.to_path_buf()));
        }
        Ok(RateCurveTrace { op_type, samples })
    }

    /// Every `*_log.txt` trace in a directory, ordered by op type.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, TraceError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.to_str().is_some_and(|p| p.ends_with("_log.txt")) {
                out.push(RateCurveTrace::load(&path)?);
            }
        }
        out.sort_by_key(|t| t.op_type);
        Ok(out)
    }
}

/// Share of total ops per operation type.
pub fn mix_report(traces: &[RateCurveTrace]) -> BTreeMap<OpType, f64> {
    let mut counts: BTreeMap<OpType, u64> = BTreeMap::new();
    for t in traces {
        *counts.entry(t.op_type).or_insert(0) += t.total();
    }
    let total: u64 = counts.values().sum();
    counts
        .into_iter()
        .map(|(op, n)| (op, if total == 0 { 0.0 } else { n as f64 / total as f64 }))
        .collect()
}

/// Compress a per-second curve by `factor`: each output second carries the
/// mean rate of `factor` input seconds. A factor of 1 is the identity.
pub fn compress(samples: &[u64], factor: f64) -> Vec<f64> {
    if factor <= 1.0 {
        return samples.iter().map(|&s| s as f64).collect();
    }
    let out_len = (samples.len() as f64 / factor).ceil() as usize;
    (0..out_len)
        .map(|i| {
            let lo = (i as f64 * factor).floor() as usize;
            let hi = (((i + 1) as f64 * factor).floor() as usize).min(samples.len()).max(lo + 1);
            samples[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect()
}

/// Round a real-valued curve to integers while preserving its running sum.
pub fn cumulative_round(values: &[f64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    let mut emitted: u64 = 0;
    for v in values {
        acc += v.max(0.0);
        let target = acc.round() as u64;
        out.push(target.saturating_sub(emitted));
        emitted = emitted.max(target);
    }
    out
}

/// Per-second op counts a replayer submits for one trace.
pub fn scaled_counts(trace: &RateCurveTrace, time_compression: f64, rate_scale: f64) -> Vec<u64> {
    let compressed = compress(&trace.samples, time_compression);
    let scaled: Vec<f64> = compressed.iter().map(|v| v * rate_scale).collect();
    cumulative_round(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = RateCurveTrace::new(OpType::Getattr, vec![3, 0, 7]);
        let path = t.save(dir.path()).unwrap();
        assert!(path.ends_with("getattr_log.txt"));
        assert_eq!(RateCurveTrace::load(&path).unwrap(), t);
        RateCurveTrace::constant(OpType::Open, 1, 2).save(dir.path()).unwrap();
        let all = RateCurveTrace::load_dir(dir.path()).unwrap();
        assert_eq!(all.iter().map(|t| t.op_type).collect::<Vec<_>>(), vec![OpType::Open, OpType::Getattr]);
    }

    #[test]
    fn bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("open_log.txt");
        fs::write(&p, "1\n-2\n").unwrap();
        assert!(matches!(RateCurveTrace::load(&p), Err(TraceError::BadSample { line: 2, .. })));
        let q = dir.path().join("nonsense.txt");
        fs::write(&q, "1\n").unwrap();
        assert!(matches!(RateCurveTrace::load(&q), Err(TraceError::BadName(_))));
        fs::write(&p, "\n").unwrap();
        assert!(matches!(RateCurveTrace::load(&p), Err(TraceError::Empty(_))));
    }

    #[test]
    fn mix_shares() {
        let g = RateCurveTrace::constant(OpType::Getattr, 10, 3);
        assert_eq!(mix_report(&[g]), BTreeMap::from([(OpType::Getattr, 1.0)]));
        let o = RateCurveTrace::constant(OpType::Open, 5, 4);
        let c = RateCurveTrace::constant(OpType::Close, 4, 5);
        assert_eq!(mix_report(&[o, c]), BTreeMap::from([(OpType::Open, 0.5), (OpType::Close, 0.5)]));
        assert!(mix_report(&[]).is_empty());
    }

    #[test]
    fn compression_and_rounding() {
        assert_eq!(compress(&[1, 2, 3], 1.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(compress(&[60, 0, 30, 30, 90], 2.0), vec![30.0, 30.0, 90.0]);
        assert_eq!(cumulative_round(&[0.5, 0.5, 0.5, 0.5]).iter().sum::<u64>(), 2);
        let t = RateCurveTrace::new(OpType::Open, vec![3, 3, 3, 3]);
        let c = scaled_counts(&t, 1.0, 0.5);
        assert_eq!(c.iter().sum::<u64>(), 6);
        assert!(c.iter().all(|&x| x == 1 || x == 2));
    }
}
