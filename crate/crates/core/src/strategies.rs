//! Baseline meta-policies over the same search substrate.
//!
//! Every baseline is a predefined strategy: its future behavior is a
//! fixed function of its parameters and the evolving sample bookkeeping,
//! never of the utility engine. Samples are tracked as independent
//! streams; streams whose draws merge in the trie still advance as
//! separate samples, so best-of-N really is N i.i.d. trajectories while
//! compute is charged once per unique prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::CostParams;
use crate::meta::{Decision, MetaAction, MetaPolicy, MetaState, NodeId, StepOutcome, Token};
use crate::utility::{AdaptiveSampling, FinalScore, UtilityConfig};
use crate::worlds::{BasePolicy, Predictor, SyntheticWorld};

/// Where a strategy's selection scores come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Ground-truth verifier values.
    #[default]
    Oracle,
    /// The run's configured predictor (exact, noisy or dump-backed).
    /// With a noisy predictor this doubles as a stand-in for
    /// self-evaluation scoring at a chosen quality level.
    Predictor,
    /// Self-consistency: the frequency of the sample's final answer.
    Votes,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSource::Oracle => write!(f, "oracle"),
            ScoreSource::Predictor => write!(f, "predictor"),
            ScoreSource::Votes => write!(f, "votes"),
        }
    }
}

/// Declarative description of one strategy arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    /// N i.i.d. samples to completion, best scorer wins.
    Bon {
        n: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap_tokens: Option<u64>,
        #[serde(default)]
        score: ScoreSource,
    },
    /// N samples, most frequent final answer wins (ties uniform).
    Mv { n: u32 },
    /// Majority voting with a hard per-sample length cut; cut samples
    /// contribute no vote.
    MvLengthPrune { n: u32, cap_tokens: u64 },
    /// N samples; scores aggregated per answer symbol, best-scoring
    /// sample of the winning answer is returned.
    WeightedBon {
        n: u32,
        #[serde(default)]
        score: ScoreSource,
        /// Charge the scorer an extra full-sequence pass per sample
        /// (external reward model accounting).
        #[serde(default)]
        external_rm: bool,
    },
    /// Fixed pool of N; at every check interval drop unfinished samples
    /// whose predicted expected value falls below the threshold (never
    /// the last survivor).
    RewardPrune {
        n: u32,
        threshold: f64,
        #[serde(default = "default_check_interval")]
        check_interval: u64,
    },
    /// Width-B frontier; every k steps ranks leaves, discards the weakest
    /// p and duplicates the strongest to refill the frontier.
    Beam {
        width: u32,
        interval: u64,
        prune: u32,
        #[serde(default)]
        score: ScoreSource,
    },
    /// The adaptive sampling-utility strategy.
    ZipRc,
}

fn default_check_interval() -> u64 {
    16
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Bon {
                n,
                cap_tokens: None,
                score: ScoreSource::Oracle,
            } => {
                write!(f, "bon({n})")
            }
            StrategySpec::Bon {
                n,
                cap_tokens,
                score,
            } => {
                write!(f, "bon({n}")?;
                if let Some(cap) = cap_tokens {
                    write!(f, ",cap={cap}")?;
                }
                if *score != ScoreSource::Oracle {
                    write!(f, ",score={score}")?;
                }
                write!(f, ")")
            }
            StrategySpec::Mv { n } => write!(f, "mv({n})"),
            StrategySpec::MvLengthPrune { n, cap_tokens } => {
                write!(f, "mv_length_prune({n},cap={cap_tokens})")
            }
            StrategySpec::WeightedBon {
                n,
                score,
                external_rm,
            } => {
                write!(f, "weighted_bon({n},score={score}")?;
                if *external_rm {
                    write!(f, ",external")?;
                }
                write!(f, ")")
            }
            StrategySpec::RewardPrune {
                n,
                threshold,
                check_interval,
            } => {
                write!(
                    f,
                    "reward_prune({n},threshold={threshold},interval={check_interval})"
                )
            }
            StrategySpec::Beam {
                width,
                interval,
                prune,
                score,
            } => {
                write!(f, "beam({width},k={interval},p={prune},score={score})")
            }
            StrategySpec::ZipRc => write!(f, "zip_rc"),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    /// Compact CLI form: `kind[:n][,key=value...]`, e.g. `bon:8`,
    /// `mv:3`, `mv_length_prune:4,cap=800`,
    /// `weighted_bon:3,score=predictor,external`,
    /// `reward_prune:8,threshold=0.4,interval=16`,
    /// `beam:4,k=8,p=2`, `zip_rc`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("strategy '{s}': {msg}"));
        let mut head = s;
        let mut args: Vec<&str> = Vec::new();
        if let Some((h, rest)) = s.split_once([':', ',']) {
            head = h;
            args = rest.split(',').filter(|a| !a.is_empty()).collect();
        }
        let mut n: Option<u32> = None;
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        let mut flags: Vec<&str> = Vec::new();
        for arg in args {
            if let Some((k, v)) = arg.split_once('=') {
                kv.insert(k, v);
            } else if let Ok(count) = arg.parse::<u32>() {
                n = Some(count);
            } else {
                flags.push(arg);
            }
        }
        let score = match kv.get("score") {
            None => ScoreSource::Oracle,
            Some(&"oracle") => ScoreSource::Oracle,
            Some(&"predictor") => ScoreSource::Predictor,
            Some(&"votes") => ScoreSource::Votes,
            Some(other) => return Err(bad(&format!("unknown score source '{other}'"))),
        };
        let parse_u64 = |key: &str| -> Result<Option<u64>> {
            kv.get(key)
                .map(|v| v.parse::<u64>().map_err(|_| bad(&format!("bad {key}"))))
                .transpose()
        };
        let spec = match head {
            "bon" => StrategySpec::Bon {
                n: n.ok_or_else(|| bad("missing sample count"))?,
                cap_tokens: parse_u64("cap")?,
                score,
            },
            "mv" => StrategySpec::Mv {
                n: n.ok_or_else(|| bad("missing sample count"))?,
            },
            "mv_length_prune" => StrategySpec::MvLengthPrune {
                n: n.ok_or_else(|| bad("missing sample count"))?,
                cap_tokens: parse_u64("cap")?.ok_or_else(|| bad("missing cap"))?,
            },
            "weighted_bon" => StrategySpec::WeightedBon {
                n: n.ok_or_else(|| bad("missing sample count"))?,
                score,
                external_rm: flags.contains(&"external"),
            },
            "reward_prune" => StrategySpec::RewardPrune {
                n: n.ok_or_else(|| bad("missing sample count"))?,
                threshold: kv
                    .get("threshold")
                    .ok_or_else(|| bad("missing threshold"))?
                    .parse()
                    .map_err(|_| bad("bad threshold"))?,
                check_interval: parse_u64("interval")?.unwrap_or_else(default_check_interval),
            },
            "beam" => StrategySpec::Beam {
                width: n.ok_or_else(|| bad("missing width"))?,
                interval: parse_u64("k")?.ok_or_else(|| bad("missing interval k"))?,
                prune: parse_u64("p")?.ok_or_else(|| bad("missing prune count p"))? as u32,
                score,
            },
            "zip_rc" => StrategySpec::ZipRc,
            other => return Err(bad(&format!("unknown strategy kind '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |n: u32, what: &str| {
            if n == 0 {
                Err(Error::Config(format!("{what} must be positive in {self}")))
            } else {
                Ok(())
            }
        };
        match self {
            StrategySpec::Bon { n, .. } | StrategySpec::Mv { n } => positive(*n, "n"),
            StrategySpec::MvLengthPrune { n, cap_tokens } => {
                positive(*n, "n")?;
                positive(*cap_tokens as u32, "cap")
            }
            StrategySpec::WeightedBon { n, .. } => positive(*n, "n"),
            StrategySpec::RewardPrune {
                n,
                threshold,
                check_interval,
            } => {
                positive(*n, "n")?;
                positive(*check_interval as u32, "interval")?;
                if !(0.0..=1.0).contains(threshold) {
                    return Err(Error::Config(format!(
                        "threshold {threshold} outside [0, 1]"
                    )));
                }
                Ok(())
            }
            StrategySpec::Beam {
                width,
                interval,
                prune,
                ..
            } => {
                positive(*width, "width")?;
                positive(*interval as u32, "interval")?;
                if prune >= width {
                    return Err(Error::Config(format!(
                        "beam prune count {prune} must be below width {width}"
                    )));
                }
                Ok(())
            }
            StrategySpec::ZipRc => Ok(()),
        }
    }

    /// Instantiate the policy for one episode.
    pub fn build(
        &self,
        world: &Arc<SyntheticWorld>,
        predictor: &Arc<dyn Predictor>,
        cost: &CostParams,
        utility: &UtilityConfig,
    ) -> Result<Box<dyn MetaPolicy>> {
        self.validate()?;
        let scorer = |source: ScoreSource| Scorer {
            source,
            world: Arc::clone(world),
            predictor: Arc::clone(predictor),
        };
        Ok(match self {
            StrategySpec::Bon {
                n,
                cap_tokens,
                score,
            } => Box::new(PoolPolicy::best_of_n(*n, *cap_tokens, scorer(*score))),
            StrategySpec::Mv { n } => Box::new(PoolPolicy::majority_vote(*n, None)),
            StrategySpec::MvLengthPrune { n, cap_tokens } => {
                Box::new(PoolPolicy::majority_vote(*n, Some(*cap_tokens)))
            }
            StrategySpec::WeightedBon {
                n,
                score,
                external_rm,
            } => Box::new(PoolPolicy::weighted(*n, scorer(*score), *external_rm)),
            StrategySpec::RewardPrune {
                n,
                threshold,
                check_interval,
            } => Box::new(RewardPrunePolicy {
                pool: PoolPolicy::best_of_n(*n, None, scorer(ScoreSource::Predictor)),
                threshold: *threshold,
                check_interval: *check_interval,
                predictor: Arc::clone(predictor),
            }),
            StrategySpec::Beam {
                width,
                interval,
                prune,
                score,
            } => Box::new(BeamPolicy {
                pool: PoolPolicy::best_of_n(*width, None, scorer(*score)),
                interval: *interval,
                prune: *prune,
                scorer: scorer(*score),
            }),
            StrategySpec::ZipRc => {
                let final_score = if utility.noisy_selection {
                    FinalScore::Predictor
                } else {
                    FinalScore::GroundTruth(Arc::clone(world))
                };
                Box::new(AdaptiveSampling::new(
                    Arc::clone(predictor),
                    *cost,
                    utility.clone(),
                    final_score,
                )?)
            }
        })
    }
}

/// Scores finished nodes for final selection.
pub struct Scorer {
    source: ScoreSource,
    world: Arc<SyntheticWorld>,
    predictor: Arc<dyn Predictor>,
}

impl Scorer {
    fn score(&self, state: &MetaState, node: NodeId) -> Result<f64> {
        match self.source {
            ScoreSource::Oracle => Ok(self.world.terminal_value(&state.tokens_of(node)?)),
            ScoreSource::Predictor => Ok(self.predictor.joint_for(state, node)?.expected_value()),
            // Vote counting happens at the sample level; per-node score
            // is resolved by the policy that owns the sample list.
            ScoreSource::Votes => Ok(0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Sample streams
// ---------------------------------------------------------------------------

/// One independent sample: its current trie node, plus terminal
/// bookkeeping. Streams sharing a node advance together through one
/// forward pass but draw their next tokens independently.
#[derive(Clone, Debug)]
struct Stream {
    node: NodeId,
    depth: u32,
    alive: bool,
    terminal: Option<NodeId>,
}

#[derive(Clone, Debug, Default)]
struct Streams {
    streams: Vec<Stream>,
}

impl Streams {
    fn spawn_at_root(n: u32, root: NodeId) -> Self {
        Self {
            streams: (0..n)
                .map(|_| Stream {
                    node: root,
                    depth: 0,
                    alive: true,
                    terminal: None,
                })
                .collect(),
        }
    }

    fn action(&self) -> MetaAction {
        let mut action = MetaAction::empty();
        for s in self.streams.iter().filter(|s| s.alive) {
            action.add(s.node, 1);
        }
        action
    }

    /// Move every alive stream to its per-occurrence child. Streams at
    /// the same node consume the outcome's draw list in stream order.
    fn advance(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()> {
        let mut cursors: BTreeMap<NodeId, usize> = BTreeMap::new();
        for stream in self.streams.iter_mut().filter(|s| s.alive) {
            let children = outcome
                .children
                .get(&stream.node)
                .ok_or_else(|| Error::State(format!("no outcome for node {}", stream.node)))?;
            let cursor = cursors.entry(stream.node).or_insert(0);
            let child = *children
                .get(*cursor)
                .ok_or_else(|| Error::State("outcome shorter than stream count".into()))?;
            *cursor += 1;
            stream.node = child;
            stream.depth += 1;
            if state.node(child)?.finished {
                stream.alive = false;
                stream.terminal = Some(child);
            }
        }
        Ok(())
    }

    /// Hard length cut: kill alive streams at or beyond `cap` tokens.
    fn apply_cap(&mut self, cap: u64) {
        for s in &mut self.streams {
            if s.alive && s.depth as u64 >= cap {
                s.alive = false;
            }
        }
    }

    /// Finished samples as (stream index, terminal node).
    fn finished(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.streams
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.terminal.map(|t| (i, t)))
    }

    fn alive(&self) -> impl Iterator<Item = (usize, &Stream)> + '_ {
        self.streams.iter().enumerate().filter(|(_, s)| s.alive)
    }
}

// ---------------------------------------------------------------------------
// Pooled baselines (best-of-N family)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Selection {
    BestScore,
    MajorityVote,
    WeightedByAnswer,
}

/// Shared machinery for the fixed-pool baselines: spawn N root samples,
/// continue every live stream to completion, then select.
struct PoolPolicy {
    n: u32,
    cap_tokens: Option<u64>,
    selection: Selection,
    scorer: Option<Scorer>,
    external_rm: bool,
    streams: Option<Streams>,
}

impl PoolPolicy {
    fn best_of_n(n: u32, cap_tokens: Option<u64>, scorer: Scorer) -> Self {
        Self {
            n,
            cap_tokens,
            selection: Selection::BestScore,
            scorer: Some(scorer),
            external_rm: false,
            streams: None,
        }
    }

    fn majority_vote(n: u32, cap_tokens: Option<u64>) -> Self {
        Self {
            n,
            cap_tokens,
            selection: Selection::MajorityVote,
            scorer: None,
            external_rm: false,
            streams: None,
        }
    }

    fn weighted(n: u32, scorer: Scorer, external_rm: bool) -> Self {
        Self {
            n,
            cap_tokens: None,
            selection: Selection::WeightedByAnswer,
            scorer: Some(scorer),
            external_rm,
            streams: None,
        }
    }

    fn streams(&self) -> &Streams {
        self.streams.as_ref().expect("streams not yet spawned")
    }

    /// Answer symbol of a finished sample: the terminal token.
    fn answer_of(state: &MetaState, node: NodeId) -> Result<Token> {
        state
            .node(node)?
            .token
            .ok_or_else(|| Error::State("finished node without a token".into()))
    }

    fn vote_counts(&self, state: &MetaState) -> Result<BTreeMap<Token, u32>> {
        let mut votes = BTreeMap::new();
        for (_, node) in self.streams().finished() {
            if let Some(info) = state.node(node).ok().filter(|n| n.token.is_some()) {
                // Horizon-cut samples carry no answer and do not vote.
                let token = info.token.unwrap();
                if info.finished && state.tokens_of(node)?.last() == Some(&token) {
                    *votes.entry(token).or_insert(0) += 1;
                }
            }
        }
        Ok(votes)
    }
}

impl MetaPolicy for PoolPolicy {
    fn decide(&mut self, state: &MetaState, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        if self.streams.is_none() {
            self.streams = Some(Streams::spawn_at_root(self.n, state.root()));
        }
        if let Some(cap) = self.cap_tokens {
            self.streams.as_mut().unwrap().apply_cap(cap);
        }
        let action = self.streams().action();
        if action.is_empty() {
            return Ok(Decision::Stop);
        }
        Ok(Decision::Act(action))
    }

    fn note_outcome(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()> {
        self.streams
            .as_mut()
            .ok_or_else(|| Error::State("outcome before first decision".into()))?
            .advance(state, outcome)
    }

    fn select_final(&self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Option<NodeId>> {
        let streams = match &self.streams {
            Some(s) => s,
            None => return Ok(None),
        };
        match self.selection {
            Selection::BestScore => {
                let scorer = self.scorer.as_ref().unwrap();
                let mut best: Option<(f64, NodeId)> = None;
                for (_, node) in streams.finished() {
                    let score = scorer.score(state, node)?;
                    match best {
                        Some((bs, bn)) if score < bs || (score == bs && node >= bn) => {}
                        _ => best = Some((score, node)),
                    }
                }
                Ok(best.map(|(_, n)| n))
            }
            Selection::MajorityVote => {
                let votes = self.vote_counts(state)?;
                let Some(top) = votes.values().copied().max() else {
                    return Ok(None);
                };
                let tied: Vec<Token> = votes
                    .iter()
                    .filter(|(_, c)| **c == top)
                    .map(|(t, _)| *t)
                    .collect();
                let winner = tied[rng.random_range(0..tied.len())];
                // Lowest-id finished sample carrying the winning answer.
                let mut node = None;
                for (_, candidate) in streams.finished() {
                    if Self::answer_of(state, candidate)? == winner
                        && node.is_none_or(|n| candidate < n)
                    {
                        node = Some(candidate);
                    }
                }
                Ok(node)
            }
            Selection::WeightedByAnswer => {
                let scorer = self.scorer.as_ref().unwrap();
                let votes = self.vote_counts(state)?;
                let mut weights: BTreeMap<Token, f64> = BTreeMap::new();
                let mut best_of: BTreeMap<Token, (f64, NodeId)> = BTreeMap::new();
                for (_, node) in streams.finished() {
                    let answer = Self::answer_of(state, node)?;
                    let score = match self.scorer.as_ref().unwrap().source {
                        ScoreSource::Votes => votes.get(&answer).copied().unwrap_or(0) as f64,
                        _ => scorer.score(state, node)?,
                    };
                    *weights.entry(answer).or_insert(0.0) += score;
                    match best_of.get(&answer) {
                        Some((bs, bn)) if score < *bs || (score == *bs && node >= *bn) => {}
                        _ => {
                            best_of.insert(answer, (score, node));
                        }
                    }
                }
                let mut winner: Option<(f64, Token)> = None;
                for (answer, weight) in &weights {
                    match winner {
                        Some((bw, bt)) if *weight < bw || (*weight == bw && *answer >= bt) => {}
                        _ => winner = Some((*weight, *answer)),
                    }
                }
                Ok(winner.and_then(|(_, answer)| best_of.get(&answer).map(|(_, n)| *n)))
            }
        }
    }

    fn extra_compute_units(&self, state: &MetaState) -> f64 {
        if !self.external_rm {
            return 0.0;
        }
        // The external scorer reprocesses each finished sample once.
        self.streams
            .as_ref()
            .map(|s| {
                s.finished()
                    .filter_map(|(_, node)| state.node(node).ok())
                    .map(|n| n.depth as f64)
                    .sum()
            })
            .unwrap_or(0.0)
    }
}

// ---------------------------------------------------------------------------
// Reward-threshold pruning
// ---------------------------------------------------------------------------

struct RewardPrunePolicy {
    pool: PoolPolicy,
    threshold: f64,
    check_interval: u64,
    predictor: Arc<dyn Predictor>,
}

impl RewardPrunePolicy {
    fn prune(&mut self, state: &MetaState) -> Result<()> {
        let streams = self.pool.streams.as_mut().unwrap();
        let mut values: Vec<(usize, f64)> = Vec::new();
        for (idx, stream) in streams.alive() {
            let value = self
                .predictor
                .joint_for(state, stream.node)?
                .expected_value();
            values.push((idx, value));
        }
        let below: Vec<usize> = values
            .iter()
            .filter(|(_, v)| *v < self.threshold)
            .map(|(i, _)| *i)
            .collect();
        let has_finished = streams.finished().next().is_some();
        let mut keep: Option<usize> = None;
        if below.len() == values.len() && !has_finished && !values.is_empty() {
            // Never drop the last survivor: keep the best of the doomed.
            let best = values
                .iter()
                .cloned()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            keep = Some(best.0);
        }
        for idx in below {
            if keep != Some(idx) {
                streams.streams[idx].alive = false;
            }
        }
        Ok(())
    }
}

impl MetaPolicy for RewardPrunePolicy {
    fn decide(&mut self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Decision> {
        if self.pool.streams.is_none() {
            return self.pool.decide(state, rng);
        }
        if state.step() > 0 && state.step().is_multiple_of(self.check_interval) {
            self.prune(state)?;
        }
        self.pool.decide(state, rng)
    }

    fn note_outcome(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()> {
        self.pool.note_outcome(state, outcome)
    }

    fn select_final(&self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Option<NodeId>> {
        self.pool.select_final(state, rng)
    }
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct BeamPolicy {
    pool: PoolPolicy,
    interval: u64,
    prune: u32,
    scorer: Scorer,
}

impl BeamPolicy {
    /// Rank alive streams by leaf score, kill the weakest `prune`, refill
    /// the frontier to its pre-prune size by duplicating the strongest
    /// survivors cyclically. Finished slots are not resurrected, which
    /// keeps `prune = 0` identical to best-of-N.
    fn prune_and_refill(&mut self, state: &MetaState) -> Result<()> {
        let streams = self.pool.streams.as_mut().unwrap();
        let mut ranked: Vec<(usize, f64)> = Vec::new();
        for (idx, stream) in streams.alive() {
            ranked.push((idx, self.scorer.score(state, stream.node)?));
        }
        // Strongest first; ties by lower stream index.
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let alive_before = ranked.len();
        let kill = (self.prune as usize).min(alive_before.saturating_sub(1));
        if kill == 0 {
            return Ok(());
        }
        for (idx, _) in ranked.iter().rev().take(kill) {
            streams.streams[*idx].alive = false;
        }
        let survivors: Vec<usize> = ranked[..alive_before - kill]
            .iter()
            .map(|(i, _)| *i)
            .collect();
        for dup in 0..kill {
            let source = streams.streams[survivors[dup % survivors.len()]].clone();
            streams.streams.push(source);
        }
        Ok(())
    }
}

impl MetaPolicy for BeamPolicy {
    fn decide(&mut self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Decision> {
        if self.pool.streams.is_none() {
            return self.pool.decide(state, rng);
        }
        if state.step() > 0 && state.step().is_multiple_of(self.interval) {
            self.prune_and_refill(state)?;
        }
        self.pool.decide(state, rng)
    }

    fn note_outcome(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()> {
        self.pool.note_outcome(state, outcome)
    }

    fn select_final(&self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Option<NodeId>> {
        self.pool.select_final(state, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::BinGrid;
    use crate::harness::{run_episode, EpisodeOutcome};
    use crate::worlds::{bernoulli_world, OraclePredictor};

    fn oracle(world: &Arc<SyntheticWorld>, grid: &Arc<BinGrid>) -> Arc<dyn Predictor> {
        Arc::new(OraclePredictor::new(Arc::clone(world), Arc::clone(grid)).unwrap())
    }

    fn grid_for(world: &SyntheticWorld) -> Arc<BinGrid> {
        let horizon = world.horizon() as u64;
        let bounds = crate::binning::log_length_boundaries(horizon, 8, 4.min(horizon)).unwrap();
        Arc::new(BinGrid::uniform_values(5, bounds).unwrap())
    }

    fn run(
        spec: &StrategySpec,
        world: &Arc<SyntheticWorld>,
        predictor: &Arc<dyn Predictor>,
        cost: &CostParams,
        seed: u64,
    ) -> EpisodeOutcome {
        let utility = UtilityConfig::default();
        let mut policy = spec.build(world, predictor, cost, &utility).unwrap();
        run_episode(
            world,
            policy.as_mut(),
            cost,
            4 * world.horizon() as u64,
            seed,
            0,
        )
        .unwrap()
    }

    #[test]
    fn spec_strings_parse_and_round_trip() {
        let cases = [
            "bon:8",
            "bon:4,cap=128,score=predictor",
            "mv:3",
            "mv_length_prune:4,cap=800",
            "weighted_bon:3,score=votes",
            "weighted_bon:2,score=predictor,external",
            "reward_prune:8,threshold=0.4,interval=16",
            "beam:4,k=8,p=2",
            "zip_rc",
        ];
        for case in cases {
            let spec: StrategySpec = case.parse().unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            let back: StrategySpec = serde_json::from_str(&json).unwrap();
            assert_eq!(spec, back, "{case}");
        }
        assert!("bon".parse::<StrategySpec>().is_err());
        assert!("beam:4,k=8,p=4".parse::<StrategySpec>().is_err());
        assert!("reward_prune:8,threshold=1.4"
            .parse::<StrategySpec>()
            .is_err());
        assert!("frobnicate:3".parse::<StrategySpec>().is_err());
    }

    #[test]
    fn single_sample_cost_is_its_own_length() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.2, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.5, 0.01).unwrap();
        let spec: StrategySpec = "bon:1".parse().unwrap();
        let outcome = run(&spec, &world, &predictor, &cost, 11);
        // One stream: compute units equal latency steps equal its length.
        assert_eq!(outcome.compute_units, outcome.latency_steps as f64);
        assert_eq!(outcome.samples_started, 1);
    }

    #[test]
    fn deterministic_world_collapses_to_one_path() {
        let world = Arc::new(
            SyntheticWorld::builder("det")
                .horizon(6)
                .branch_tokens(1)
                .answers(&[1.0])
                .phase(0.0, &[1.0], &[1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.5, 0.01).unwrap();
        let spec: StrategySpec = "bon:3".parse().unwrap();
        let outcome = run(&spec, &world, &predictor, &cost, 3);
        // Full trie overlap: one forward pass per step despite 3 samples.
        assert_eq!(outcome.compute_units, 6.0);
        assert_eq!(outcome.latency_steps, 6);
        assert_eq!(outcome.reward, 1.0);
    }

    #[test]
    fn bon_two_step_world_hand_counts() {
        // Every trajectory is exactly 2 tokens: one continue, one answer.
        let world = Arc::new(
            SyntheticWorld::builder("two-step")
                .horizon(2)
                .branch_tokens(4096)
                .answers(&[1.0, 0.0])
                .phase(0.0, &[0.6, 0.4], &[1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.5, 0.01).unwrap();
        let spec: StrategySpec = "bon:2".parse().unwrap();
        let outcome = run(&spec, &world, &predictor, &cost, 5);
        // Step 1: one unique prefix (the root); step 2: two distinct
        // depth-1 nodes with overwhelming probability at 4096 variants.
        assert_eq!(outcome.latency_steps, 2);
        assert_eq!(outcome.compute_units, 3.0);
        assert_eq!(outcome.samples_started, 2);
    }

    #[test]
    fn majority_vote_prefers_the_modal_answer() {
        // Direct unit check of the vote resolution: build a state with
        // three finished samples answering {a, a, b}.
        let world = Arc::new(bernoulli_world("b", 0.99, 0.9, 8));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.5, 0.0).unwrap();
        let spec: StrategySpec = "mv:5".parse().unwrap();
        let utility = UtilityConfig::default();
        // Seeded episodes: replay made deterministic, vote equals the
        // modal answer among finished samples.
        for seed in 0..10 {
            let mut policy = spec.build(&world, &predictor, &cost, &utility).unwrap();
            let outcome = run_episode(&world, policy.as_mut(), &cost, 64, seed, 0).unwrap();
            assert!(outcome.log.selected.is_some());
        }
    }

    #[test]
    fn majority_vote_tie_break_is_uniform() {
        // With two samples over a binary answer alphabet, a split vote is
        // a tie resolved uniformly at random, so the closed-form accuracy
        // is p^2 + 2p(1-p)/2 = p exactly.
        let world = Arc::new(bernoulli_world("b", 0.6, 0.2, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "mv:2".parse().unwrap();
        let n = 1500;
        let mut correct = 0usize;
        for seed in 0..n {
            let outcome = run(&spec, &world, &predictor, &cost, seed as u64);
            if outcome.reward == 1.0 {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / n as f64;
        let se = (0.6f64 * 0.4 / n as f64).sqrt();
        assert!(
            (accuracy - 0.6).abs() <= 3.0 * se,
            "mv(2) accuracy {accuracy} vs tie-rule closed form 0.6 (se {se})"
        );
    }

    #[test]
    fn length_pruned_vote_hears_only_short_mode_samples() {
        // Step 1 routes each sample into a short mode (finishes around 5
        // tokens, always wrong) or a long mode that only answers at the
        // horizon, correctly. A cap at 16 therefore silences every long
        // sample: anything finishing under the cap is short and wrong.
        let world = Arc::new(
            SyntheticWorld::builder("bimodal")
                .horizon(64)
                .branch_tokens(32)
                .answers(&[1.0, 0.0])
                .phase(0.0, &[0.5, 0.5], &[0.0, 0.4, 0.6])
                .phase(0.25, &[0.0, 1.0], &[0.0, 1.0, 0.0])
                .phase(0.0, &[1.0, 0.0], &[0.0, 0.0, 1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let plain: StrategySpec = "mv:4".parse().unwrap();
        let pruned: StrategySpec = "mv_length_prune:4,cap=16".parse().unwrap();
        let mut pruned_wrong = 0usize;
        let mut pruned_answered = 0usize;
        let mut plain_right = 0usize;
        for seed in 0..60 {
            let capped = run(&pruned, &world, &predictor, &cost, seed);
            if capped.log.selected.is_some() {
                pruned_answered += 1;
                if capped.reward == 0.0 {
                    pruned_wrong += 1;
                }
            }
            if run(&plain, &world, &predictor, &cost, seed).reward == 1.0 {
                plain_right += 1;
            }
        }
        // Short-mode voters are always wrong; the uncapped vote usually
        // hears the long (correct) majority.
        assert!(pruned_answered > 0);
        assert_eq!(pruned_wrong, pruned_answered);
        assert!(plain_right > 25, "uncapped vote won only {plain_right}/60");
    }

    #[test]
    fn noisy_weighted_selection_sits_between_vote_and_oracle() {
        // Three-way comparison at a mid predictor quality: majority vote
        // (no scores) <= weighted selection with noisy scores <= oracle
        // selection.
        use crate::worlds::NoisyPredictor;
        let world = Arc::new(bernoulli_world("b", 0.4, 0.15, 64));
        let grid = grid_for(&world);
        let exact = oracle(&world, &grid);
        let noisy: Arc<dyn Predictor> =
            Arc::new(NoisyPredictor::new(Arc::clone(&exact), 1.7, 99).unwrap());
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let mv: StrategySpec = "mv:5".parse().unwrap();
        let weighted: StrategySpec = "weighted_bon:5,score=predictor".parse().unwrap();
        let bon: StrategySpec = "bon:5".parse().unwrap();
        let n = 1200u64;
        let acc = |spec: &StrategySpec, predictor: &Arc<dyn Predictor>| {
            let mut correct = 0usize;
            for seed in 0..n {
                if run(spec, &world, predictor, &cost, seed).reward == 1.0 {
                    correct += 1;
                }
            }
            correct as f64 / n as f64
        };
        let mv_acc = acc(&mv, &exact);
        let weighted_acc = acc(&weighted, &noisy);
        let bon_acc = acc(&bon, &exact);
        // Closed forms: 0.317 for the vote, 0.922 for oracle top-1.
        assert!(
            weighted_acc >= mv_acc + 0.05,
            "weighted {weighted_acc} not above vote {mv_acc}"
        );
        assert!(
            weighted_acc <= bon_acc + 0.02,
            "weighted {weighted_acc} above oracle selection {bon_acc}"
        );
    }

    #[test]
    fn mv_cap_above_horizon_changes_nothing() {
        let world = Arc::new(bernoulli_world("b", 0.6, 0.25, 32));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let plain: StrategySpec = "mv:3".parse().unwrap();
        let capped: StrategySpec = "mv_length_prune:3,cap=100".parse().unwrap();
        for seed in 0..20 {
            let a = run(&plain, &world, &predictor, &cost, seed);
            let b = run(&capped, &world, &predictor, &cost, seed);
            assert_eq!(a.reward, b.reward, "seed {seed}");
            assert_eq!(a.compute_units, b.compute_units, "seed {seed}");
        }
    }

    #[test]
    fn mv_cap_below_every_length_yields_the_sentinel() {
        // Trajectories are 2 tokens minimum; cap of 1 kills everything.
        let world = Arc::new(
            SyntheticWorld::builder("two-step")
                .horizon(8)
                .branch_tokens(8)
                .answers(&[1.0, 0.0])
                .phase(0.0, &[0.5, 0.5], &[1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "mv_length_prune:3,cap=1".parse().unwrap();
        let outcome = run(&spec, &world, &predictor, &cost, 9);
        assert_eq!(outcome.log.selected, None);
        assert_eq!(outcome.reward, 0.0);
    }

    #[test]
    fn weighted_bon_with_oracle_scores_equals_bon_selection() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.15, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let bon: StrategySpec = "bon:4".parse().unwrap();
        let weighted: StrategySpec = "weighted_bon:4,score=oracle".parse().unwrap();
        for seed in 0..30 {
            let a = run(&bon, &world, &predictor, &cost, seed);
            let b = run(&weighted, &world, &predictor, &cost, seed);
            // Same reward: the winning answer's best sample has the same
            // ground-truth value as the global argmax.
            assert_eq!(a.reward, b.reward, "seed {seed}");
        }
    }

    #[test]
    fn weighted_bon_external_rm_doubles_compute() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.2, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let plain: StrategySpec = "weighted_bon:3,score=oracle".parse().unwrap();
        let external: StrategySpec = "weighted_bon:3,score=oracle,external".parse().unwrap();
        let a = run(&plain, &world, &predictor, &cost, 17);
        let b = run(&external, &world, &predictor, &cost, 17);
        // The surcharge is the summed finished-sample lengths: at least
        // the longest sample (= the latency chain), at most 3 of them.
        let extra = b.compute_units - a.compute_units;
        assert!(extra >= a.latency_steps as f64);
        assert!(extra <= 3.0 * a.latency_steps as f64);
        assert_eq!(a.reward, b.reward);
    }

    #[test]
    fn reward_prune_with_zero_threshold_is_bon() {
        let world = Arc::new(bernoulli_world("b", 0.4, 0.2, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let bon: StrategySpec = "bon:4,score=predictor".parse().unwrap();
        let pruned: StrategySpec = "reward_prune:4,threshold=0,interval=8".parse().unwrap();
        for seed in 0..20 {
            let a = run(&bon, &world, &predictor, &cost, seed);
            let b = run(&pruned, &world, &predictor, &cost, seed);
            assert_eq!(a.reward, b.reward, "seed {seed}");
            assert_eq!(a.compute_units, b.compute_units, "seed {seed}");
            assert_eq!(a.latency_steps, b.latency_steps, "seed {seed}");
        }
    }

    #[test]
    fn reward_prune_with_threshold_one_keeps_one_survivor() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.02, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "reward_prune:6,threshold=1,interval=4".parse().unwrap();
        let utility = UtilityConfig::default();
        let mut policy = spec.build(&world, &predictor, &cost, &utility).unwrap();
        let outcome = run_episode(&world, policy.as_mut(), &cost, 256, 3, 0).unwrap();
        // After the first check at step 4, at most one stream survives:
        // every later action touches at most one prefix.
        for step in &outcome.log.steps {
            if step.step > 4 {
                assert!(step.action.support_size() <= 1, "step {}", step.step);
            }
        }
        // The survivor still finishes and answers.
        assert!(outcome.log.selected.is_some());
    }

    #[test]
    fn reward_prune_drops_exactly_the_low_value_phase() {
        // Step 1 routes each stream into a good phase (oracle value near
        // 0.9) or a doomed one (near 0.05). The first check must drop
        // precisely the doomed streams.
        let world = Arc::new(
            SyntheticWorld::builder("split")
                .horizon(64)
                .branch_tokens(32)
                .answers(&[1.0, 0.0])
                .phase(0.0, &[0.5, 0.5], &[0.0, 0.5, 0.5])
                .phase(0.08, &[0.9, 0.1], &[0.0, 1.0, 0.0])
                .phase(0.08, &[0.05, 0.95], &[0.0, 0.0, 1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "reward_prune:8,threshold=0.4,interval=2".parse().unwrap();
        let utility = UtilityConfig::default();
        let mut policy = spec.build(&world, &predictor, &cost, &utility).unwrap();
        let outcome = run_episode(&world, policy.as_mut(), &cost, 256, 12, 0).unwrap();
        assert!(outcome.log.selected.is_some());
        // Past the first check, every continued prefix sits in the good
        // phase: its oracle value stays above the threshold, so the
        // support can only shrink through finishing, never refill.
        let width_at = |t: u64| {
            outcome
                .log
                .steps
                .iter()
                .find(|s| s.step == t)
                .map(|s| s.action.support_size())
        };
        let before = width_at(1).unwrap();
        if let Some(after) = width_at(3) {
            assert!(after <= before);
        }
    }

    #[test]
    fn beam_without_pruning_is_bon() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.1, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let bon: StrategySpec = "bon:4".parse().unwrap();
        let beam: StrategySpec = "beam:4,k=8,p=0".parse().unwrap();
        for seed in 0..20 {
            let a = run(&bon, &world, &predictor, &cost, seed);
            let b = run(&beam, &world, &predictor, &cost, seed);
            assert_eq!(a.reward, b.reward, "seed {seed}");
            assert_eq!(a.compute_units, b.compute_units, "seed {seed}");
        }
    }

    #[test]
    fn beam_width_one_is_a_single_greedy_rollout() {
        let world = Arc::new(bernoulli_world("b", 0.5, 0.1, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let beam: StrategySpec = "beam:1,k=4,p=0".parse().unwrap();
        let outcome = run(&beam, &world, &predictor, &cost, 7);
        assert_eq!(outcome.samples_started, 1);
        for step in &outcome.log.steps {
            assert_eq!(step.action.support_size(), 1);
        }
    }

    #[test]
    fn beam_prunes_the_hand_ranked_weakest() {
        // Nothing stops before the horizon, so all four streams are alive
        // at the prune step, where the two lowest-oracle-value leaves
        // must die.
        let world = Arc::new(
            SyntheticWorld::builder("ranked")
                .horizon(64)
                .branch_tokens(64)
                .answers(&[1.0, 0.0])
                .phase(0.0, &[0.5, 0.5], &[0.2, 0.4, 0.4])
                .phase(0.0, &[0.9, 0.1], &[0.0, 1.0, 0.0])
                .phase(0.0, &[0.1, 0.9], &[0.0, 0.0, 1.0])
                .build()
                .unwrap(),
        );
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "beam:4,k=8,p=2".parse().unwrap();
        let utility = UtilityConfig::default();
        let mut policy = spec.build(&world, &predictor, &cost, &utility).unwrap();
        let outcome = run_episode(&world, policy.as_mut(), &cost, 48, 21, 0).unwrap();
        // After the prune at step 8 the frontier still holds 4 streams
        // (duplicates), but the support shrinks to the survivors.
        let post_prune = outcome.log.steps.iter().find(|s| s.step == 8).unwrap();
        assert!(post_prune.action.support_size() <= 2);
        assert_eq!(post_prune.action.total_multiplicity(), 4);
    }

    #[test]
    fn same_seed_replays_identically() {
        let world = Arc::new(bernoulli_world("b", 0.45, 0.12, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        for spec_str in [
            "bon:4",
            "mv:3",
            "weighted_bon:3,score=predictor",
            "beam:3,k=4,p=1",
            "zip_rc",
        ] {
            let spec: StrategySpec = spec_str.parse().unwrap();
            let a = run(&spec, &world, &predictor, &cost, 31);
            let b = run(&spec, &world, &predictor, &cost, 31);
            assert_eq!(a.reward, b.reward, "{spec_str}");
            assert_eq!(a.compute_units, b.compute_units, "{spec_str}");
            assert_eq!(
                serde_json::to_string(&a.log).unwrap(),
                serde_json::to_string(&b.log).unwrap(),
                "{spec_str}"
            );
        }
    }

    #[test]
    fn reward_prune_never_returns_the_sentinel() {
        let world = Arc::new(bernoulli_world("b", 0.3, 0.15, 64));
        let grid = grid_for(&world);
        let predictor = oracle(&world, &grid);
        let cost = CostParams::new(0.1, 0.005).unwrap();
        let spec: StrategySpec = "reward_prune:4,threshold=0.9,interval=2".parse().unwrap();
        for seed in 0..40 {
            let outcome = run(&spec, &world, &predictor, &cost, seed);
            assert!(outcome.log.selected.is_some(), "seed {seed}");
        }
    }
}
