//! Reference implementations used only by tests.
#![allow(dead_code)]

use num_rational::Ratio;

/// Line-by-line transcription of the PSFA pseudocode over (job_id, demand, usage).
/// Returns (pre-redistribution rates, final rates) in input order.
pub fn psfa_reference(max_r: f64, eps: f64, jobs: &[(String, f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let active = jobs.len();
    let mut idx: Vec<usize> = (0..active).collect();
    idx.sort_by(|&a, &b| jobs[a].1.partial_cmp(&jobs[b].1).unwrap().then(jobs[a].0.cmp(&jobs[b].0)));
    let mut rate = vec![0.0f64; active];
    let mut left_r = max_r;
    let mut i = 0;
    while i < active {
        let j = idx[i];
        let demand = jobs[j].1;
        let usage = jobs[j].2;
        let fair_share = left_r / (active - i) as f64;
        if usage <= demand {
            let threshold = (demand - usage) * eps;
            rate[j] = f64::min(usage + threshold, fair_share);
        } else {
            rate[j] = f64::min(demand, fair_share);
        }
        left_r = left_r - rate[j];
        i += 1;
    }
    let before = rate.clone();
    let mut total_usage = 0.0;
    for &j in &idx {
        total_usage += jobs[j].2;
    }
    for &j in &idx {
        if total_usage > 0.0 {
            rate[j] = rate[j] + (jobs[j].2 / total_usage) * left_r;
        } else {
            rate[j] = rate[j] + left_r / active as f64;
        }
    }
    (before, rate)
}

/// Exact water-filling: repeatedly offer every unsatisfied job an equal share
/// of the remaining capacity, fix the jobs whose demand fits, and repeat.
/// Leftover after everyone is satisfied goes out in proportion to demand.
pub fn water_fill_exact(max_r: i64, demands: &[i64]) -> Vec<Ratio<i64>> {
    let n = demands.len();
    let mut rates = vec![Ratio::from_integer(0); n];
    let mut fixed = vec![false; n];
    let mut remaining = Ratio::from_integer(max_r);
    loop {
        let open: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        if open.is_empty() {
            break;
        }
        let share = remaining / Ratio::from_integer(open.len() as i64);
        let fits: Vec<usize> = open.iter().copied().filter(|&i| Ratio::from_integer(demands[i]) <= share).collect();
        if fits.is_empty() {
            for i in open {
                rates[i] = share;
            }
            return rates;
        }
        for i in fits {
            rates[i] = Ratio::from_integer(demands[i]);
            remaining -= rates[i];
            fixed[i] = true;
        }
    }
    let total: i64 = demands.iter().sum();
    for i in 0..n {
        rates[i] += remaining * Ratio::new(demands[i], total);
    }
    rates
}

/// Correctly rounded conversion of a small rational to f64.
pub fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
