//! Cost/reward frontier extraction from batch records.

use serde::{Deserialize, Serialize};

use super::runner::CellResult;

/// One (GenCost, reward) point of a strategy's sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub strategy: String,
    pub alpha: f64,
    pub beta: f64,
    pub gen_cost: f64,
    pub reward: f64,
    /// Another point of the same (strategy, alpha) group is at least as
    /// cheap and at least as good, strictly better in one.
    pub dominated: bool,
}

/// Per (strategy, alpha) group: points sorted by cost with dominated
/// ones flagged. Plot-ready.
pub fn pareto_points(cells: &[CellResult]) -> Vec<ParetoPoint> {
    let mut points: Vec<ParetoPoint> = cells
        .iter()
        .map(|c| ParetoPoint {
            strategy: c.strategy.clone(),
            alpha: c.alpha,
            beta: c.beta,
            gen_cost: c.metrics.mean_gen_cost,
            reward: c.metrics.mean_reward,
            dominated: false,
        })
        .collect();
    points.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.alpha.partial_cmp(&b.alpha).unwrap())
            .then(a.gen_cost.partial_cmp(&b.gen_cost).unwrap())
    });
    let flags: Vec<bool> = points
        .iter()
        .map(|p| {
            points.iter().any(|q| {
                q.strategy == p.strategy
                    && q.alpha == p.alpha
                    && q.gen_cost <= p.gen_cost
                    && q.reward >= p.reward
                    && (q.gen_cost < p.gen_cost || q.reward > p.reward)
            })
        })
        .collect();
    for (point, dominated) in points.iter_mut().zip(flags) {
        point.dominated = dominated;
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::MetricsRecord;

    fn cell(strategy: &str, beta: f64, cost: f64, reward: f64) -> CellResult {
        let mut metrics = MetricsRecord::aggregate(std::iter::empty());
        metrics.mean_gen_cost = cost;
        metrics.mean_reward = reward;
        CellResult {
            strategy: strategy.into(),
            alpha: 0.1,
            beta,
            metrics,
        }
    }

    #[test]
    fn single_point_is_not_dominated() {
        let points = pareto_points(&[cell("zip_rc", 0.01, 1.0, 0.8)]);
        assert_eq!(points.len(), 1);
        assert!(!points[0].dominated);
    }

    #[test]
    fn costlier_and_worse_is_flagged() {
        let points = pareto_points(&[
            cell("zip_rc", 0.01, 1.0, 0.8),
            cell("zip_rc", 0.02, 2.0, 0.7),
        ]);
        assert!(!points[0].dominated);
        assert!(points[1].dominated);
    }

    #[test]
    fn groups_do_not_dominate_each_other() {
        let points = pareto_points(&[cell("zip_rc", 0.01, 1.0, 0.9), cell("mv(3)", 0.0, 2.0, 0.5)]);
        assert!(points.iter().all(|p| !p.dominated));
    }
}
