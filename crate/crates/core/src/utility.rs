//! The sampling-utility engine and the adaptive meta-policy built on it.
//!
//! The value of "run every selected prefix to completion, then keep the
//! best" is computable in closed form from per-prefix joints: the
//! expected maximum value minus the cost-weighted expected total and
//! maximum remaining lengths. Capping every prefix at a shared length
//! horizon — with the capped mass collapsed to a designated low-value
//! bin — models planned pruning; scanning the cap over all length bins
//! and keeping the best yields the sampling utility, a tractable lower
//! bound on what an unconstrained strategy could achieve. The adaptive
//! policy evaluates that utility over a structured candidate set (all
//! unfinished leaves, value-ranked subsets, root respawns, stop) and
//! executes the argmax at fixed decision intervals.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::{
    expected_max_length, expected_max_value, expected_sum_length, JointDistribution,
    SmoothingWindow,
};
use crate::meta::{CostParams, Decision, MetaAction, MetaPolicy, MetaState, NodeId, StepOutcome};
use crate::worlds::{BasePolicy, Predictor};

/// Length caps applied to the active prefixes when evaluating a capped
/// utility. The shipped optimizer searches shared caps only; per-prefix
/// caps are representable for completeness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HorizonAssignment {
    /// One length-bin cap for every prefix.
    Shared(usize),
    /// One cap per prefix, aligned with the distribution slice.
    PerPrefix(Vec<usize>),
}

/// Knobs of the adaptive strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    /// Value bin that capped (pruned) mass collapses to: the forfeited
    /// reward of a trajectory stopped at its cap. Defaults to the lowest
    /// bin. The cap only shapes utilities — planned caps are never
    /// executed as hard stops (pruning emerges from re-optimization), so
    /// a capped trajectory can never end up as the selected answer and
    /// this bin never leaks into final selection.
    pub clipped_value_bin: usize,
    /// Maximum number of samples materialized per episode.
    pub max_pool: u32,
    /// Steps between re-optimizations of the meta-action.
    pub decision_interval: u64,
    /// How many value-ranked leaf subsets to consider.
    pub candidate_top_k: usize,
    /// Rescale beta by the mean expected total length of the active
    /// prefixes, stabilizing the reward/cost trade-off across prompt
    /// scales.
    pub beta_normalization: bool,
    /// Temporal smoothing window (1 = no smoothing).
    pub smoothing: usize,
    /// Score final selection with the (possibly noisy) predictor instead
    /// of ground truth.
    pub noisy_selection: bool,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            clipped_value_bin: 0,
            max_pool: 8,
            decision_interval: 32,
            candidate_top_k: 4,
            beta_normalization: true,
            smoothing: 1,
            noisy_selection: false,
        }
    }
}

impl UtilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_pool == 0 {
            return Err(Error::Config("max_pool must be at least 1".into()));
        }
        if self.decision_interval == 0 {
            return Err(Error::Config("decision_interval must be at least 1".into()));
        }
        if self.candidate_top_k == 0 {
            return Err(Error::Config("candidate_top_k must be at least 1".into()));
        }
        if self.smoothing == 0 {
            return Err(Error::Config("smoothing window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Value of running every prefix in the set to completion and keeping the
/// best: expected maximum value minus the cost-weighted expected total
/// and maximum remaining length.
pub fn q_rollouts(dists: &[JointDistribution], cost: &CostParams) -> Result<f64> {
    let max_value = expected_max_value(dists)?;
    let sum_length = expected_sum_length(dists)?;
    let max_length = expected_max_length(dists)?;
    Ok(max_value - cost.beta * (cost.alpha * sum_length + (1.0 - cost.alpha) * max_length))
}

/// [`q_rollouts`] over horizon-capped joints.
pub fn q_rollouts_capped(
    dists: &[JointDistribution],
    horizon: &HorizonAssignment,
    clipped_value_bin: usize,
    cost: &CostParams,
) -> Result<f64> {
    let capped: Vec<JointDistribution> = match horizon {
        HorizonAssignment::Shared(cap) => dists
            .iter()
            .map(|d| d.capped(*cap, clipped_value_bin))
            .collect::<Result<_>>()?,
        HorizonAssignment::PerPrefix(caps) => {
            if caps.len() != dists.len() {
                return Err(Error::Input(format!(
                    "{} caps for {} distributions",
                    caps.len(),
                    dists.len()
                )));
            }
            dists
                .iter()
                .zip(caps)
                .map(|(d, cap)| d.capped(*cap, clipped_value_bin))
                .collect::<Result<_>>()?
        }
    };
    q_rollouts(&capped, cost)
}

/// Exhaustive scan over shared caps. Returns the best cap and its
/// utility; ties go to the largest cap (least pruning), so a cost-free
/// configuration keeps everything.
pub fn optimize_horizon(
    dists: &[JointDistribution],
    clipped_value_bin: usize,
    cost: &CostParams,
) -> Result<(usize, f64)> {
    if dists.is_empty() {
        return Err(Error::Input("empty distribution set".into()));
    }
    let bins = dists[0].grid().num_length_bins();
    let mut best: Option<(usize, f64)> = None;
    for cap in 0..bins {
        let utility = q_rollouts_capped(
            dists,
            &HorizonAssignment::Shared(cap),
            clipped_value_bin,
            cost,
        )?;
        best = match best {
            Some((_, bu)) if utility >= bu => Some((cap, utility)),
            None => Some((cap, utility)),
            keep => keep,
        };
    }
    Ok(best.unwrap())
}

/// Per-prompt rescaling of the cost coefficient: divide by the mean
/// expected total token count (current length plus predicted remaining)
/// of the active prefixes.
pub fn normalize_beta(beta: f64, prefixes: &[(u64, f64)]) -> Result<f64> {
    if prefixes.is_empty() {
        return Err(Error::Input("no active prefixes".into()));
    }
    let mean_total: f64 = prefixes
        .iter()
        .map(|(len, remaining)| *len as f64 + remaining)
        .sum::<f64>()
        / prefixes.len() as f64;
    Ok(beta / mean_total)
}

/// Smoothed prediction for one prefix: the mean of the last `window`
/// predictions along its path (terminal prefixes are served raw; their
/// prediction is already exact mass).
pub fn smoothed_joint(
    state: &MetaState,
    node: NodeId,
    predictor: &dyn Predictor,
    window: usize,
) -> Result<JointDistribution> {
    if window <= 1 || state.node(node)?.finished {
        return predictor.joint_for(state, node);
    }
    let mut chain = Vec::with_capacity(window);
    let mut cursor = Some(node);
    while let (Some(id), true) = (cursor, chain.len() < window) {
        chain.push(id);
        cursor = state.node(id)?.parent;
    }
    let mut ring = SmoothingWindow::new(window)?;
    for id in chain.into_iter().rev() {
        ring.push(predictor.joint_for(state, id)?)?;
    }
    ring.smoothed()
}

fn ranked_leaves(
    state: &MetaState,
    predictor: &dyn Predictor,
    config: &UtilityConfig,
) -> Result<Vec<NodeId>> {
    let mut scored = Vec::new();
    for leaf in state.unfinished_leaves() {
        let joint = smoothed_joint(state, leaf, predictor, config.smoothing)?;
        scored.push((leaf, joint.expected_value(), joint.expected_remaining()));
    }
    // Higher predicted value first, then lower predicted remaining
    // length, then lowest id.
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.2.partial_cmp(&b.2).unwrap())
            .then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().map(|(id, _, _)| id).collect())
}

/// The structured candidate set: continue all unfinished leaves; continue
/// the top-k of them (ranked by predicted value, then predicted
/// remaining); each of those with extra root multiplicity up to the pool
/// cap; and the empty (stop) action when a finished candidate exists.
/// Multiplicity is only ever placed on the root.
pub fn candidate_actions(
    state: &MetaState,
    predictor: &dyn Predictor,
    config: &UtilityConfig,
) -> Result<Vec<MetaAction>> {
    let ranked = ranked_leaves(state, predictor, config)?;
    let pool = state.sample_pool() as u32;
    let room = config.max_pool.saturating_sub(pool);

    let mut bases: BTreeSet<Vec<NodeId>> = BTreeSet::new();
    let mut all: Vec<NodeId> = ranked.clone();
    all.sort();
    bases.insert(all);
    for k in 1..=config.candidate_top_k.min(ranked.len()) {
        let mut subset: Vec<NodeId> = ranked[..k].to_vec();
        subset.sort();
        bases.insert(subset);
    }

    let mut candidates: BTreeSet<MetaAction> = BTreeSet::new();
    for base in &bases {
        let action = MetaAction::from_pairs(base.iter().map(|n| (*n, 1)));
        if !action.is_empty() {
            candidates.insert(action.clone());
        }
        for extra in 1..=room {
            let mut with_root = action.clone();
            with_root.add(state.root(), extra);
            candidates.insert(with_root);
        }
    }
    if !state.finished_nodes().is_empty() {
        candidates.insert(MetaAction::empty());
    }
    Ok(candidates.into_iter().collect())
}

/// The sampling utility of one candidate action: gather (smoothed) joints
/// for every prefix occurrence — root occurrences contribute independent
/// copies of the root's prediction — normalize beta if configured, and
/// take the best shared-cap rollout value. The empty action is worth the
/// best predicted value among finished candidates (no future cost), or
/// zero with nothing finished.
pub fn sampling_utility(
    state: &MetaState,
    action: &MetaAction,
    predictor: &dyn Predictor,
    cost: &CostParams,
    config: &UtilityConfig,
) -> Result<f64> {
    if action.is_empty() {
        let mut best = 0.0f64;
        for id in state.finished_nodes() {
            best = best.max(predictor.joint_for(state, id)?.expected_value());
        }
        return Ok(best);
    }
    let mut dists = Vec::with_capacity(action.total_multiplicity() as usize);
    let mut prefixes = Vec::with_capacity(dists.capacity());
    for (node, mult) in action.pairs() {
        let joint = smoothed_joint(state, node, predictor, config.smoothing)?;
        let len = state.node(node)?.depth as u64;
        for _ in 0..mult {
            prefixes.push((len, joint.expected_remaining()));
            dists.push(joint.clone());
        }
    }
    let beta = if config.beta_normalization {
        normalize_beta(cost.beta, &prefixes)?
    } else {
        cost.beta
    };
    let effective = CostParams {
        alpha: cost.alpha,
        beta,
    };
    let (_, utility) = optimize_horizon(&dists, config.clipped_value_bin, &effective)?;
    Ok(utility)
}

fn tie_break_less(a: &MetaAction, b: &MetaAction) -> bool {
    let key_a = (a.support_size(), a.total_multiplicity());
    let key_b = (b.support_size(), b.total_multiplicity());
    key_a.cmp(&key_b).then_with(|| a.cmp(b)).is_lt()
}

/// One re-optimization: the candidate action with the highest sampling
/// utility. Exact ties prefer fewer distinct prefixes, then lower total
/// multiplicity, then lexicographically smaller node ids.
pub fn zip_rc_step(
    state: &MetaState,
    predictor: &dyn Predictor,
    cost: &CostParams,
    config: &UtilityConfig,
) -> Result<MetaAction> {
    let mut best: Option<(f64, MetaAction)> = None;
    for action in candidate_actions(state, predictor, config)? {
        let utility = sampling_utility(state, &action, predictor, cost, config)?;
        best = match best {
            None => Some((utility, action)),
            Some((bu, ba)) => {
                if utility > bu || (utility == bu && tie_break_less(&action, &ba)) {
                    Some((utility, action))
                } else {
                    Some((bu, ba))
                }
            }
        };
    }
    Ok(best.map(|(_, a)| a).unwrap_or_else(MetaAction::empty))
}

/// The adaptive meta-policy: re-optimizes the meta-action at fixed
/// decision intervals (and whenever the active frontier empties) and
/// continues the surviving leaves of the previous action in between.
/// Choosing the empty action stops the episode.
pub struct AdaptiveSampling {
    predictor: Arc<dyn Predictor>,
    cost: CostParams,
    config: UtilityConfig,
    final_score: FinalScore,
    active: Vec<NodeId>,
    next_decision: u64,
}

/// How the adaptive policy scores finished candidates at selection time.
pub enum FinalScore {
    /// Ground-truth verifier values (the default; predictor noise does
    /// not corrupt selection).
    GroundTruth(Arc<crate::worlds::SyntheticWorld>),
    /// The predictor's own expected value.
    Predictor,
}

impl AdaptiveSampling {
    pub fn new(
        predictor: Arc<dyn Predictor>,
        cost: CostParams,
        config: UtilityConfig,
        final_score: FinalScore,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            predictor,
            cost,
            config,
            final_score,
            active: Vec::new(),
            next_decision: 0,
        })
    }

    fn frontier_action(&self, state: &MetaState) -> Result<MetaAction> {
        let mut action = MetaAction::empty();
        for &id in &self.active {
            if !state.node(id)?.finished {
                action.add(id, 1);
            }
        }
        Ok(action)
    }
}

impl MetaPolicy for AdaptiveSampling {
    fn decide(&mut self, state: &MetaState, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        let t = state.step();
        let carried = self.frontier_action(state)?;
        if t < self.next_decision && !carried.is_empty() {
            return Ok(Decision::Act(carried));
        }
        let action = zip_rc_step(state, self.predictor.as_ref(), &self.cost, &self.config)?;
        if action.is_empty() {
            return Ok(Decision::Stop);
        }
        self.next_decision = t + self.config.decision_interval;
        Ok(Decision::Act(action))
    }

    fn note_outcome(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()> {
        let mut survivors: BTreeSet<NodeId> = BTreeSet::new();
        for children in outcome.children.values() {
            for child in children {
                if !state.node(*child)?.finished {
                    survivors.insert(*child);
                }
            }
        }
        self.active = survivors.into_iter().collect();
        Ok(())
    }

    fn select_final(&self, state: &MetaState, _rng: &mut ChaCha8Rng) -> Result<Option<NodeId>> {
        let mut best: Option<(f64, NodeId)> = None;
        for id in state.finished_nodes() {
            let score = match &self.final_score {
                FinalScore::GroundTruth(world) => world.terminal_value(&state.tokens_of(id)?),
                FinalScore::Predictor => self.predictor.joint_for(state, id)?.expected_value(),
            };
            match best {
                Some((bs, _)) if score <= bs => {}
                _ => best = Some((score, id)),
            }
        }
        Ok(best.map(|(_, id)| id))
    }
}
