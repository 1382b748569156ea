use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cumulative_round, RateCurveTrace};
use crate::request::OpType;

/// Per-second probabilities of a burst or a quiet second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstProfile {
    pub burst_prob: f64,
    pub burst_multiplier: f64,
    pub quiet_prob: f64,
}

impl BurstProfile {
    pub const STEADY: BurstProfile = BurstProfile { burst_prob: 0.0, burst_multiplier: 1.0, quiet_prob: 0.0 };

    pub fn volatile(burst_multiplier: f64) -> Self {
        BurstProfile { burst_prob: 0.1, burst_multiplier, quiet_prob: 0.2 }
    }
}

impl Default for BurstProfile {
    fn default() -> Self {
        BurstProfile::volatile(5.0)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Burst,
    Quiet,
    Normal,
}

/// A volatile per-second rate curve with the requested long-run mean.
///
/// Bursts land in `[m, 1.2 m] × mean` with `m = burst_multiplier`, quiet
/// seconds in `[0, 0.25] × mean`; the remaining seconds are rescaled so the
/// realized mean matches `mean_rate` up to integer rounding (provided the
/// bursts alone do not already exceed it).
pub fn generate_synthetic_trace(
    op_type: OpType,
    seed: u64,
    duration_s: usize,
    mean_rate: f64,
    profile: BurstProfile,
) -> RateCurveTrace {
    let n = duration_s.max(1);
    let mean = mean_rate.max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_burst = profile.burst_prob.clamp(0.0, 1.0);
    let p_quiet = profile.quiet_prob.clamp(0.0, 1.0 - p_burst);
    let mult = profile.burst_multiplier.max(1.0);

    let mut states: Vec<State> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < p_burst {
                State::Burst
            } else if u < p_burst + p_quiet {
                State::Quiet
            } else {
                State::Normal
            }
        })
        .collect();
    // Short traces still show both extremes when they are enabled.
    if n >= 3 {
        if p_burst > 0.0 && !states.contains(&State::Burst) {
            let i = rng.gen_range(0..n);
            states[i] = State::Burst;
        }
        if p_quiet > 0.0 && !states.contains(&State::Quiet) {
            let candidates: Vec<usize> = (0..n).filter(|&i| states[i] != State::Burst).collect();
            let i = candidates[rng.gen_range(0..candidates.len())];
            states[i] = State::Quiet;
        }
    }

    let mut values: Vec<f64> = states
        .iter()
        .map(|s| match s {
            State::Burst => mean * mult * rng.gen_range(1.0..1.2),
            State::Quiet => mean * rng.gen_range(0.0..0.25),
            State::Normal => mean * rng.gen_range(0.9..1.1),
        })
        .collect();
    let fixed: f64 = states.iter().zip(&values).filter(|(s, _)| **s != State::Normal).map(|(_, v)| v).sum();
    let normal: f64 = states.iter().zip(&values).filter(|(s, _)| **s == State::Normal).map(|(_, v)| v).sum();
    let target = mean * n as f64;
    if normal > 0.0 {
        let factor = ((target - fixed) / normal).max(0.0);
        for (s, v) in states.iter().zip(values.iter_mut()) {
            if *s == State::Normal {
                *v *= factor;
            }
        }
    }
    RateCurveTrace::new(op_type, cumulative_round(&values))
}

/// One trace per op type whose counts follow `shares` of `total_mean`.
pub fn generate_mix(
    seed: u64,
    duration_s: usize,
    total_mean: f64,
    shares: &[(OpType, f64)],
    profile: BurstProfile,
) -> Vec<RateCurveTrace> {
    let total_share: f64 = shares.iter().map(|(_, s)| s).sum();
    shares
        .iter()
        .enumerate()
        .map(|(i, (op, share))| {
            let mean = if total_share > 0.0 { total_mean * share / total_share } else { 0.0 };
            generate_synthetic_trace(*op, seed.wrapping_add(0x9e37_79b9 * (i as u64 + 1)), duration_s, mean, profile)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::mix_report;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_trace(OpType::Getattr, 7, 300, 1000.0, BurstProfile::default());
        let b = generate_synthetic_trace(OpType::Getattr, 7, 300, 1000.0, BurstProfile::default());
        let c = generate_synthetic_trace(OpType::Getattr, 8, 300, 1000.0, BurstProfile::default());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_targets() {
        let mean = 200_000.0;
        let t = generate_synthetic_trace(OpType::Getattr, 1, 600, mean, BurstProfile::volatile(5.0));
        assert!((t.mean() - mean).abs() / mean < 0.01, "mean {}", t.mean());
        assert!(t.samples.iter().any(|&s| s as f64 >= 1_000_000.0));
        assert!(t.samples.iter().any(|&s| s as f64 <= 0.25 * mean));
    }

    #[test]
    fn steady_profile_is_near_constant() {
        let t = generate_synthetic_trace(OpType::Open, 3, 100, 500.0, BurstProfile::STEADY);
        assert!(t.samples.iter().all(|&s| (440..=560).contains(&s)), "{:?}", t.samples);
        assert_eq!(t.total(), 50_000);
    }

    #[test]
    fn short_traces_keep_extremes() {
        let t = generate_synthetic_trace(OpType::Open, 11, 5, 100.0, BurstProfile::volatile(5.0));
        assert!(t.samples.iter().any(|&s| s >= 500));
        assert!(t.samples.iter().any(|&s| s <= 25));
        assert_eq!(generate_synthetic_trace(OpType::Open, 1, 0, 10.0, BurstProfile::STEADY).samples.len(), 1);
    }

    #[test]
    fn mix_reproduces_shares() {
        let target = [
            (OpType::Getattr, 0.47),
            (OpType::Close, 0.21),
            (OpType::Open, 0.14),
            (OpType::Rename, 0.16),
            (OpType::Mkdir, 0.02),
        ];
        let traces = generate_mix(42, 300, 100_000.0, &target, BurstProfile::default());
        let report = mix_report(&traces);
        for (op, share) in target {
            assert!((report[&op] - share).abs() < 0.02, "{op}: {}", report[&op]);
        }
    }
}
