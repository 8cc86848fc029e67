//! Normalized cost metrics and per-cell aggregation.

use serde::{Deserialize, Serialize};

use crate::harness::runner::EpisodeOutcome;

/// Unique-prefix forward passes of an episode divided by the single-
/// sample baseline token count.
pub fn norm_compute(outcome: &EpisodeOutcome, single_sample_baseline: f64) -> f64 {
    outcome.compute_units / single_sample_baseline
}

/// Sequential forward-pass chain (nonempty meta-steps) divided by the
/// single-sample baseline token count.
pub fn norm_latency(outcome: &EpisodeOutcome, single_sample_baseline: f64) -> f64 {
    outcome.latency_steps as f64 / single_sample_baseline
}

/// `alpha * compute + (1 - alpha) * latency`.
pub fn gen_cost(compute: f64, latency: f64, alpha: f64) -> f64 {
    alpha * compute + (1.0 - alpha) * latency
}

/// Mean and standard error of every per-episode metric in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episodes: usize,
    pub mean_reward: f64,
    pub se_reward: f64,
    pub mean_norm_compute: f64,
    pub se_norm_compute: f64,
    pub mean_norm_latency: f64,
    pub se_norm_latency: f64,
    pub mean_gen_cost: f64,
    pub se_gen_cost: f64,
    pub mean_realized_utility: f64,
    pub se_realized_utility: f64,
    pub mean_samples: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl MetricsRecord {
    /// Aggregate (reward, compute, latency, gen_cost, utility, samples)
    /// tuples.
    pub fn aggregate<I>(rows: I) -> Self
    where
        I: Iterator<Item = (f64, f64, f64, f64, f64, f64)>,
    {
        let mut reward = Vec::new();
        let mut compute = Vec::new();
        let mut latency = Vec::new();
        let mut cost = Vec::new();
        let mut utility = Vec::new();
        let mut samples = Vec::new();
        for (r, c, l, g, u, s) in rows {
            reward.push(r);
            compute.push(c);
            latency.push(l);
            cost.push(g);
            utility.push(u);
            samples.push(s);
        }
        let (mean_reward, se_reward) = mean_se(&reward);
        let (mean_norm_compute, se_norm_compute) = mean_se(&compute);
        let (mean_norm_latency, se_norm_latency) = mean_se(&latency);
        let (mean_gen_cost, se_gen_cost) = mean_se(&cost);
        let (mean_realized_utility, se_realized_utility) = mean_se(&utility);
        let (mean_samples, _) = mean_se(&samples);
        Self {
            episodes: reward.len(),
            mean_reward,
            se_reward,
            mean_norm_compute,
            se_norm_compute,
            mean_norm_latency,
            se_norm_latency,
            mean_gen_cost,
            se_gen_cost,
            mean_realized_utility,
            se_realized_utility,
            mean_samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_cost_endpoints() {
        assert_eq!(gen_cost(2.0, 1.5, 0.0), 1.5);
        assert_eq!(gen_cost(2.0, 1.5, 1.0), 2.0);
        let mixed = gen_cost(1.43, 1.2, 0.1);
        assert!((mixed - (0.1 * 1.43 + 0.9 * 1.2)).abs() < 1e-15);
    }

    #[test]
    fn aggregation_identity_holds_per_record() {
        let alpha = 0.1;
        let rows: Vec<(f64, f64, f64, f64, f64, f64)> = (0..50)
            .map(|i| {
                let c = 1.0 + i as f64 * 0.01;
                let l = 2.0 - i as f64 * 0.02;
                (0.5, c, l, gen_cost(c, l, alpha), 0.2, 3.0)
            })
            .collect();
        let record = MetricsRecord::aggregate(rows.into_iter());
        let identity = alpha * record.mean_norm_compute + (1.0 - alpha) * record.mean_norm_latency;
        assert!((record.mean_gen_cost - identity).abs() < 1e-12);
    }

    #[test]
    fn standard_errors_shrink_with_more_samples() {
        let small: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let large: Vec<f64> = (0..1000).map(|i| (i % 10) as f64).collect();
        let (_, se_small) = mean_se(&small);
        let (_, se_large) = mean_se(&large);
        assert!(se_large < se_small);
        assert_eq!(mean_se(&[5.0]), (5.0, 0.0));
    }
}
