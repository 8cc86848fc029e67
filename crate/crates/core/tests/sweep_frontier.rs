//! Frontier behavior of the adaptive strategy's beta sweep.

use ziprc_core::harness::{pareto_points, run_batch, ExperimentConfig, PredictorChoice};
use ziprc_core::strategies::StrategySpec;
use ziprc_core::utility::UtilityConfig;

#[test]
fn beta_sweep_traces_a_mostly_non_dominated_chain() {
    // The compute-bound regime with betas inside the trade-off region:
    // below it the reward saturates at the pool's pass rate (the cheaper
    // point then trivially dominates), far above it the strategy
    // degenerates to a single sample and the frontier hooks back.
    let config = ExperimentConfig {
        world: "mixed".into(),
        strategies: vec![StrategySpec::ZipRc],
        alphas: vec![1.0],
        betas: vec![0.5, 0.7, 0.9, 1.1, 1.3, 1.5],
        episodes: 1200,
        seed: 21,
        predictor: PredictorChoice::Oracle,
        utility: UtilityConfig {
            decision_interval: 16,
            ..UtilityConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = run_batch(&config).unwrap();
    let points = pareto_points(&out.cells);
    assert_eq!(points.len(), 6);
    // Points arrive sorted by cost within the group; count adjacent pairs
    // where neither end dominates the other.
    let mut non_dominated_pairs = 0;
    let mut pairs = 0;
    for pair in points.windows(2) {
        pairs += 1;
        let (a, b) = (&pair[0], &pair[1]);
        let a_dominates = a.gen_cost <= b.gen_cost
            && a.reward >= b.reward
            && (a.gen_cost < b.gen_cost || a.reward > b.reward);
        let b_dominates = b.gen_cost <= a.gen_cost
            && b.reward >= a.reward
            && (b.gen_cost < a.gen_cost || b.reward > a.reward);
        if !a_dominates && !b_dominates {
            non_dominated_pairs += 1;
        }
    }
    assert!(
        non_dominated_pairs as f64 >= 0.8 * pairs as f64,
        "{non_dominated_pairs}/{pairs} adjacent pairs non-dominated"
    );
}
