//! Episode driver and the seeded batch engine.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PredictorChoice};
use super::exec::{map_indexed, Execution};
use super::metrics::{gen_cost, MetricsRecord};
use crate::error::{Error, Result};
use crate::meta::{step_cost, CostParams, Decision, EpisodeLog, LoggedStep, MetaPolicy, MetaState};
use crate::strategies::StrategySpec;
use crate::worlds::{
    derive_seed, rollout, BasePolicy, DumpPredictor, NoisyPredictor, OraclePredictor, Predictor,
    SyntheticWorld,
};

// Seed-stream tags keep episode, baseline and auxiliary draws disjoint.
const TAG_EPISODE: u64 = 1;
const TAG_BASELINE: u64 = 2;

/// Everything one episode produced.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub log: EpisodeLog,
    /// Realized terminal reward of the selected answer (0 for the
    /// no-answer sentinel).
    pub reward: f64,
    /// Unique-prefix forward passes, plus any scorer surcharge.
    pub compute_units: f64,
    /// Meta-steps that executed a nonempty action.
    pub latency_steps: u64,
    /// Distinct root children materialized (samples started).
    pub samples_started: u32,
    pub realized_utility: f64,
}

/// Drive one policy over one world until it stops or the step budget
/// runs out, then select and account.
pub fn run_episode(
    world: &Arc<SyntheticWorld>,
    policy: &mut dyn MetaPolicy,
    cost: &CostParams,
    meta_horizon: u64,
    seed: u64,
    prompt_id: u64,
) -> Result<EpisodeOutcome> {
    let mut state = MetaState::new(prompt_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = EpisodeLog::default();
    let mut compute_units = 0.0;
    let mut latency_steps = 0u64;

    for _ in 0..meta_horizon {
        match policy.decide(&state, &mut rng)? {
            Decision::Stop => break,
            Decision::Act(action) => {
                let step = state.step();
                let cost_t = step_cost(&action, cost);
                if action.is_empty() {
                    state.apply_action(&action, world.as_ref(), &mut rng)?;
                } else {
                    let outcome = state.apply_action(&action, world.as_ref(), &mut rng)?;
                    policy.note_outcome(&state, &outcome)?;
                    compute_units += action.support_size() as f64;
                    latency_steps += 1;
                }
                log.steps.push(LoggedStep {
                    step,
                    action,
                    cost: cost_t,
                });
            }
        }
    }

    let selected = policy.select_final(&state, &mut rng)?;
    let reward = match selected {
        Some(node) => {
            if !state.node(node)?.finished {
                return Err(Error::State(format!(
                    "policy selected unfinished node {node}"
                )));
            }
            world.terminal_value(&state.tokens_of(node)?)
        }
        None => 0.0,
    };
    compute_units += policy.extra_compute_units(&state);
    let samples_started = state.node(state.root())?.children().count() as u32;
    log.selected = selected;
    log.terminal_reward = reward;
    log.complete = true;
    let realized_utility = log.realized_utility()?;
    Ok(EpisodeOutcome {
        log,
        reward,
        compute_units,
        latency_steps,
        samples_started,
        realized_utility,
    })
}

/// One episode log plus the identifying header fields, as serialized to
/// an audit file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoggedEpisode {
    pub episode: u64,
    pub world: String,
    pub strategy: String,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub log: EpisodeLog,
}

/// Aggregated metrics of one (strategy, alpha, beta) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: String,
    pub alpha: f64,
    pub beta: f64,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

/// Batch output: one record per cell, plus per-episode logs when the
/// config asked for them.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub cells: Vec<CellResult>,
    pub episode_logs: Vec<LoggedEpisode>,
}

/// One predictor per world, per the configured choice. Dump-backed
/// predictors are shared across worlds (records are keyed by episode).
pub fn build_predictors(
    choice: &PredictorChoice,
    worlds: &[Arc<SyntheticWorld>],
    grid: &Arc<crate::binning::BinGrid>,
    seed: u64,
) -> Result<Vec<Arc<dyn Predictor>>> {
    match choice {
        PredictorChoice::Oracle => worlds
            .iter()
            .map(|w| {
                Ok(
                    Arc::new(OraclePredictor::new(Arc::clone(w), Arc::clone(grid))?)
                        as Arc<dyn Predictor>,
                )
            })
            .collect(),
        PredictorChoice::Noisy { scale } => worlds
            .iter()
            .map(|w| {
                let oracle: Arc<dyn Predictor> =
                    Arc::new(OraclePredictor::new(Arc::clone(w), Arc::clone(grid))?);
                Ok(Arc::new(NoisyPredictor::new(oracle, *scale, seed)?) as Arc<dyn Predictor>)
            })
            .collect(),
        PredictorChoice::Dump { path } => {
            let shared: Arc<dyn Predictor> = Arc::new(DumpPredictor::from_file(path)?);
            Ok(worlds.iter().map(|_| Arc::clone(&shared)).collect())
        }
    }
}

/// Mean single-rollout token count per world: the normalizer behind the
/// compute and latency metrics.
pub fn single_sample_baselines(
    worlds: &[Arc<SyntheticWorld>],
    rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    worlds
        .iter()
        .enumerate()
        .map(|(w, world)| {
            let mut total = 0u64;
            for i in 0..rollouts {
                let record = rollout(
                    world.as_ref(),
                    &[],
                    world.horizon(),
                    derive_seed(seed, &[TAG_BASELINE, w as u64, i as u64]),
                )?;
                total += record.total_len();
            }
            Ok(total as f64 / rollouts as f64)
        })
        .collect()
}

struct EpisodeRow {
    reward: f64,
    norm_compute: f64,
    norm_latency: f64,
    gen_cost: f64,
    realized_utility: f64,
    samples: f64,
    logged: Option<LoggedEpisode>,
}

/// Run the full (strategy x alpha x beta) grid with parallel episodes.
pub fn run_batch(config: &ExperimentConfig) -> Result<BatchOutput> {
    run_batch_with(config, Execution::Parallel)
}

/// [`run_batch`] with an explicit execution mode; sequential runs produce
/// byte-identical results.
pub fn run_batch_with(config: &ExperimentConfig, execution: Execution) -> Result<BatchOutput> {
    config.validate()?;
    let worlds = config.resolve_worlds()?;
    let max_horizon = ExperimentConfig::max_horizon(&worlds);
    let grid = config.grid.build(max_horizon)?;
    let predictors = build_predictors(&config.predictor, &worlds, &grid, config.seed)?;
    let baselines = single_sample_baselines(&worlds, config.baseline_rollouts, config.seed)?;
    let meta_horizon = config.meta_horizon_factor as u64 * max_horizon;

    let mut cells = Vec::new();
    let mut episode_logs = Vec::new();
    for strategy in &config.strategies {
        for &alpha in &config.alphas {
            for &beta in &config.betas {
                let cost = CostParams::new(alpha, beta)?;
                let rows = map_indexed(execution, config.episodes, |e| -> Result<EpisodeRow> {
                    let world_idx = e % worlds.len();
                    let world = &worlds[world_idx];
                    let predictor = &predictors[world_idx];
                    // Episode seeds ignore the arm: common random numbers.
                    let seed = derive_seed(config.seed, &[TAG_EPISODE, e as u64]);
                    let mut policy = strategy.build(world, predictor, &cost, &config.utility)?;
                    let outcome =
                        run_episode(world, policy.as_mut(), &cost, meta_horizon, seed, e as u64)?;
                    let baseline = baselines[world_idx];
                    let norm_compute = outcome.compute_units / baseline;
                    let norm_latency = outcome.latency_steps as f64 / baseline;
                    let logged = config.keep_episode_logs.then(|| LoggedEpisode {
                        episode: e as u64,
                        world: world.name().to_string(),
                        strategy: strategy.to_string(),
                        alpha,
                        beta,
                        seed,
                        log: outcome.log.clone(),
                    });
                    Ok(EpisodeRow {
                        reward: outcome.reward,
                        norm_compute,
                        norm_latency,
                        gen_cost: gen_cost(norm_compute, norm_latency, alpha),
                        realized_utility: outcome.realized_utility,
                        samples: outcome.samples_started as f64,
                        logged,
                    })
                });
                let rows: Vec<EpisodeRow> = rows.into_iter().collect::<Result<_>>()?;
                let metrics = MetricsRecord::aggregate(rows.iter().map(|r| {
                    (
                        r.reward,
                        r.norm_compute,
                        r.norm_latency,
                        r.gen_cost,
                        r.realized_utility,
                        r.samples,
                    )
                }));
                episode_logs.extend(rows.into_iter().filter_map(|r| r.logged));
                cells.push(CellResult {
                    strategy: strategy.to_string(),
                    alpha,
                    beta,
                    metrics,
                });
            }
        }
    }
    Ok(BatchOutput {
        cells,
        episode_logs,
    })
}

/// Convenience accessor used by sweeps and tests.
pub fn cell<'a>(
    cells: &'a [CellResult],
    strategy: &StrategySpec,
    alpha: f64,
    beta: f64,
) -> Option<&'a CellResult> {
    let label = strategy.to_string();
    cells
        .iter()
        .find(|c| c.strategy == label && c.alpha == alpha && c.beta == beta)
}
