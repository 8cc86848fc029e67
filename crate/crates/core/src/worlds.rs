//! Synthetic base policies with exactly computable joint laws, plus the
//! predictors that sit on top of them.
//!
//! A [`SyntheticWorld`] is a phase-type token process: at every step the
//! current phase either stops (emitting one terminal answer token whose
//! verifier value is fixed by the world) or continues into a next phase,
//! encoded by one of `branch_tokens` interchangeable continue tokens.
//! Stops are forced at the horizon. Because the conditional law of
//! (final value, remaining length) given a prefix depends only on the
//! prefix's phase and depth, the exact binned joint is computable by
//! backward induction, which is what the oracle predictor serves.
//!
//! Tokens are opaque small integers: indices `0..A` are the answer
//! alphabet, everything above encodes `(next phase, variant)` pairs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binning::BinGrid;
use crate::error::{Error, Result};
use crate::joint::{total_variation, JointDistribution};
use crate::meta::{MetaState, NodeId, Token};

const PROB_TOLERANCE: f64 = 1e-9;

/// Deterministic seed mixing (splitmix64 chain) for per-episode and
/// per-draw seed streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix64(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut state = splitmix64(base);
    for part in parts {
        state = splitmix64(state ^ splitmix64(*part));
    }
    state
}

/// A stochastic token generator: the stand-in for the base model.
pub trait BasePolicy: Send + Sync {
    /// Maximum number of generated tokens per trajectory.
    fn horizon(&self) -> u32;

    /// Whether `token` ends a trajectory (the answer alphabet).
    fn is_terminal_token(&self, token: Token) -> bool;

    /// Exact next-token distribution at a continuing prefix. Entries with
    /// zero probability are omitted.
    fn next_token_probs(&self, prefix: &[Token]) -> Result<Vec<(Token, f64)>>;

    /// Draw one next token.
    fn sample_next(&self, prefix: &[Token], rng: &mut ChaCha8Rng) -> Result<Token>;

    /// Ground-truth verifier value of a finished sequence: the value of
    /// its terminal answer, or 0 when it was cut at the horizon without
    /// answering.
    fn terminal_value(&self, tokens: &[Token]) -> f64;
}

/// One final-answer symbol and its verifier value.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer {
    pub value: f64,
}

/// One latent phase: stop probability, the answer distribution used on
/// stop, and the next-phase distribution used on continue.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Phase {
    pub stop_prob: f64,
    pub answer_probs: Vec<f64>,
    pub transitions: Vec<f64>,
}

/// A phase-type world with an analytically known joint law over
/// (terminal value, total length) for every prefix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticWorld {
    name: String,
    #[serde(default)]
    hard: bool,
    horizon: u32,
    #[serde(default = "default_branch_tokens")]
    branch_tokens: usize,
    answers: Vec<Answer>,
    phases: Vec<Phase>,
}

fn default_branch_tokens() -> usize {
    1
}

impl SyntheticWorld {
    pub fn builder(name: &str) -> WorldBuilder {
        WorldBuilder {
            name: name.to_string(),
            hard: false,
            horizon: 64,
            branch_tokens: 1,
            answers: Vec::new(),
            phases: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn branch_tokens(&self) -> usize {
        self.branch_tokens
    }

    pub fn answer_count(&self) -> usize {
        self.answers.len()
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.answers.len() + self.phases.len() * self.branch_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Config(format!("world {}: no answers", self.name)));
        }
        if self.phases.is_empty() {
            return Err(Error::Config(format!("world {}: no phases", self.name)));
        }
        if self.horizon == 0 {
            return Err(Error::Config(format!("world {}: zero horizon", self.name)));
        }
        if self.branch_tokens == 0 {
            return Err(Error::Config(format!(
                "world {}: zero branch tokens",
                self.name
            )));
        }
        for answer in &self.answers {
            if !(0.0..=1.0).contains(&answer.value) {
                return Err(Error::Config(format!(
                    "world {}: answer value {} outside [0, 1]",
                    self.name, answer.value
                )));
            }
        }
        for (i, phase) in self.phases.iter().enumerate() {
            if !(0.0..=1.0).contains(&phase.stop_prob) {
                return Err(Error::Config(format!(
                    "world {}: phase {i} stop probability {} outside [0, 1]",
                    self.name, phase.stop_prob
                )));
            }
            if phase.answer_probs.len() != self.answers.len() {
                return Err(Error::Config(format!(
                    "world {}: phase {i} has {} answer probabilities for {} answers",
                    self.name,
                    phase.answer_probs.len(),
                    self.answers.len()
                )));
            }
            if phase.transitions.len() != self.phases.len() {
                return Err(Error::Config(format!(
                    "world {}: phase {i} has {} transitions for {} phases",
                    self.name,
                    phase.transitions.len(),
                    self.phases.len()
                )));
            }
            if phase
                .answer_probs
                .iter()
                .chain(&phase.transitions)
                .any(|p| *p < 0.0)
            {
                return Err(Error::Config(format!(
                    "world {}: phase {i} has a negative probability",
                    self.name
                )));
            }
            let answer_sum: f64 = phase.answer_probs.iter().sum();
            if (answer_sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Config(format!(
                    "world {}: phase {i} answer probabilities sum to {answer_sum}",
                    self.name
                )));
            }
            let transition_sum: f64 = phase.transitions.iter().sum();
            if phase.stop_prob < 1.0 && (transition_sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Config(format!(
                    "world {}: phase {i} transitions sum to {transition_sum}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Value of answer token `token`.
    pub fn answer_value(&self, token: Token) -> Option<f64> {
        self.answers.get(token as usize).map(|a| a.value)
    }

    fn continue_token(&self, phase: usize, variant: usize) -> Token {
        (self.answers.len() + phase * self.branch_tokens + variant) as Token
    }

    fn continue_target(&self, token: Token) -> Result<usize> {
        let offset = token as usize - self.answers.len();
        let phase = offset / self.branch_tokens;
        if token as usize >= self.vocab_size() {
            return Err(Error::Input(format!("token {token} outside vocabulary")));
        }
        Ok(phase)
    }

    /// Latent phase after consuming a continuing prefix.
    pub fn phase_of(&self, prefix: &[Token]) -> Result<usize> {
        let mut phase = 0usize;
        for &token in prefix {
            if self.is_terminal_token(token) {
                return Err(Error::Input(
                    "prefix passes through a terminal token; not a continuing prefix".into(),
                ));
            }
            phase = self.continue_target(token)?;
        }
        Ok(phase)
    }

    fn stop_prob_at(&self, phase: usize, depth: u32) -> f64 {
        if depth + 1 >= self.horizon {
            1.0
        } else {
            self.phases[phase].stop_prob
        }
    }

    /// Exact conditional law of (terminal value, remaining length) given a
    /// continuing prefix, binned onto `grid`. For a finished prefix this
    /// is the point mass at its realized value and zero remaining length.
    pub fn oracle_joint(&self, prefix: &[Token], grid: &Arc<BinGrid>) -> Result<JointDistribution> {
        if let Some(&last) = prefix.last() {
            if self.is_terminal_token(last) {
                let value = self.terminal_value(prefix);
                return JointDistribution::point_mass(
                    Arc::clone(grid),
                    grid.value_bin(value)?,
                    grid.length_bin(0)?,
                );
            }
        }
        let depth = prefix.len() as u32;
        if depth >= self.horizon {
            return JointDistribution::point_mass(
                Arc::clone(grid),
                grid.value_bin(0.0)?,
                grid.length_bin(0)?,
            );
        }
        let phase = self.phase_of(prefix)?;
        let levels = self.oracle_sweep(grid, depth)?;
        Ok(levels[0][phase].clone())
    }

    /// Backward induction from the horizon down to `min_depth`. Returns
    /// one joint per `(depth - min_depth, phase)`.
    fn oracle_sweep(
        &self,
        grid: &Arc<BinGrid>,
        min_depth: u32,
    ) -> Result<Vec<Vec<JointDistribution>>> {
        let num_phases = self.phases.len();
        let num_answers = self.answers.len();
        let horizon = self.horizon as usize;
        let min_depth = min_depth as usize;
        if grid.max_length() < self.horizon as u64 {
            return Err(Error::Config(format!(
                "grid covers lengths up to {}, world {} has horizon {}",
                grid.max_length(),
                self.name,
                self.horizon
            )));
        }

        // raw[p][a * span + (r - 1)] = P(answer a, remaining r | phase p, depth d)
        let mut levels: Vec<Vec<JointDistribution>> = Vec::with_capacity(horizon - min_depth);
        let mut next: Vec<Vec<f64>> = Vec::new();
        for d in (min_depth..horizon).rev() {
            let span = horizon - d;
            let mut raw: Vec<Vec<f64>> = vec![vec![0.0; num_answers * span]; num_phases];
            for (p, phase) in self.phases.iter().enumerate() {
                let stop = self.stop_prob_at(p, d as u32);
                for a in 0..num_answers {
                    raw[p][a * span] = stop * phase.answer_probs[a];
                }
                if stop < 1.0 {
                    let prev_span = span - 1;
                    for (q, t) in phase.transitions.iter().enumerate() {
                        if *t == 0.0 {
                            continue;
                        }
                        let weight = (1.0 - stop) * t;
                        for a in 0..num_answers {
                            for r in 1..span {
                                raw[p][a * span + r] += weight * next[q][a * prev_span + (r - 1)];
                            }
                        }
                    }
                }
            }
            let mut binned = Vec::with_capacity(num_phases);
            for probs in &raw {
                let mut cells = vec![0.0; grid.cells()];
                for a in 0..num_answers {
                    let value_bin = grid.value_bin(self.answers[a].value)?;
                    for r in 1..=span {
                        let mass = probs[a * span + (r - 1)];
                        if mass > 0.0 {
                            let length_bin = grid.length_bin(r as u64)?;
                            cells[value_bin * grid.num_length_bins() + length_bin] += mass;
                        }
                    }
                }
                binned.push(JointDistribution::new(Arc::clone(grid), cells)?);
            }
            levels.push(binned);
            next = raw;
        }
        levels.reverse();
        Ok(levels)
    }

    /// The per-prompt law over (value, total length): the oracle joint at
    /// the empty prefix.
    pub fn root_law(&self, grid: &Arc<BinGrid>) -> Result<JointDistribution> {
        self.oracle_joint(&[], grid)
    }

    /// Exact single-rollout success probability: mass of values >= 0.5 in
    /// the root law on a fine value grid.
    pub fn success_probability(&self) -> Result<f64> {
        let grid = Arc::new(BinGrid::uniform_values(
            200,
            vec![0, self.horizon as u64 + 1],
        )?);
        let law = self.root_law(&grid)?;
        let vm = law.value_marginal();
        let cut = grid.value_bin(0.5)?;
        Ok(vm.probs()[cut..].iter().sum())
    }
}

impl BasePolicy for SyntheticWorld {
    fn horizon(&self) -> u32 {
        self.horizon
    }

    fn is_terminal_token(&self, token: Token) -> bool {
        (token as usize) < self.answers.len()
    }

    fn next_token_probs(&self, prefix: &[Token]) -> Result<Vec<(Token, f64)>> {
        let depth = prefix.len() as u32;
        if depth >= self.horizon {
            return Err(Error::State("prefix already at the horizon".into()));
        }
        let phase = self.phase_of(prefix)?;
        let stop = self.stop_prob_at(phase, depth);
        let mut probs = Vec::new();
        for (a, ap) in self.phases[phase].answer_probs.iter().enumerate() {
            let p = stop * ap;
            if p > 0.0 {
                probs.push((a as Token, p));
            }
        }
        if stop < 1.0 {
            let per_variant = 1.0 / self.branch_tokens as f64;
            for (q, t) in self.phases[phase].transitions.iter().enumerate() {
                let p = (1.0 - stop) * t * per_variant;
                if p > 0.0 {
                    for v in 0..self.branch_tokens {
                        probs.push((self.continue_token(q, v), p));
                    }
                }
            }
        }
        Ok(probs)
    }

    fn sample_next(&self, prefix: &[Token], rng: &mut ChaCha8Rng) -> Result<Token> {
        let depth = prefix.len() as u32;
        if depth >= self.horizon {
            return Err(Error::State("prefix already at the horizon".into()));
        }
        let phase = self.phase_of(prefix)?;
        let stop = self.stop_prob_at(phase, depth);
        if rng.random::<f64>() < stop {
            Ok(categorical(&self.phases[phase].answer_probs, rng) as Token)
        } else {
            let target = categorical(&self.phases[phase].transitions, rng);
            let variant = rng.random_range(0..self.branch_tokens);
            Ok(self.continue_token(target, variant))
        }
    }

    fn terminal_value(&self, tokens: &[Token]) -> f64 {
        match tokens.last() {
            Some(&t) if self.is_terminal_token(t) => self.answers[t as usize].value,
            _ => 0.0,
        }
    }
}

fn categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

pub struct WorldBuilder {
    name: String,
    hard: bool,
    horizon: u32,
    branch_tokens: usize,
    answers: Vec<Answer>,
    phases: Vec<Phase>,
}

impl WorldBuilder {
    pub fn horizon(mut self, horizon: u32) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn hard(mut self, hard: bool) -> Self {
        self.hard = hard;
        self
    }

    pub fn branch_tokens(mut self, n: usize) -> Self {
        self.branch_tokens = n;
        self
    }

    pub fn answers(mut self, values: &[f64]) -> Self {
        self.answers = values.iter().map(|v| Answer { value: *v }).collect();
        self
    }

    pub fn phase(mut self, stop_prob: f64, answer_probs: &[f64], transitions: &[f64]) -> Self {
        self.phases.push(Phase {
            stop_prob,
            answer_probs: answer_probs.to_vec(),
            transitions: transitions.to_vec(),
        });
        self
    }

    pub fn build(self) -> Result<SyntheticWorld> {
        let world = SyntheticWorld {
            name: self.name,
            hard: self.hard,
            horizon: self.horizon,
            branch_tokens: self.branch_tokens,
            answers: self.answers,
            phases: self.phases,
        };
        world.validate()?;
        Ok(world)
    }
}

// ---------------------------------------------------------------------------
// Rollouts and Monte Carlo estimation
// ---------------------------------------------------------------------------

/// One completed (or horizon-cut) trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutRecord {
    /// Full token sequence, including any given prefix.
    pub tokens: Vec<Token>,
    /// Ground-truth verifier value of the finished sequence.
    pub value: f64,
}

impl RolloutRecord {
    pub fn total_len(&self) -> u64 {
        self.tokens.len() as u64
    }

    /// Remaining tokens after prefix length `t`.
    pub fn remaining(&self, t: u64) -> u64 {
        self.total_len() - t
    }
}

/// Sample one trajectory from `prefix` to a terminal token or to
/// `max_len` total tokens, deterministically under `seed`.
pub fn rollout(
    policy: &dyn BasePolicy,
    prefix: &[Token],
    max_len: u32,
    seed: u64,
) -> Result<RolloutRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout_with_rng(policy, prefix, max_len, &mut rng)
}

pub fn rollout_with_rng(
    policy: &dyn BasePolicy,
    prefix: &[Token],
    max_len: u32,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutRecord> {
    let cap = max_len.min(policy.horizon()) as usize;
    let mut tokens = prefix.to_vec();
    while tokens.len() < cap {
        let token = policy.sample_next(&tokens, rng)?;
        tokens.push(token);
        if policy.is_terminal_token(token) {
            break;
        }
    }
    let value = policy.terminal_value(&tokens);
    Ok(RolloutRecord { tokens, value })
}

/// Empirical binned joint over (value, remaining length) from `n`
/// independent seeded rollouts started at `prefix`.
pub fn mc_estimate_joint(
    policy: &dyn BasePolicy,
    prefix: &[Token],
    n: usize,
    grid: &Arc<BinGrid>,
    seed: u64,
) -> Result<JointDistribution> {
    if n == 0 {
        return Err(Error::Input("need at least one sample".into()));
    }
    let mut cells = vec![0.0; grid.cells()];
    for i in 0..n {
        let record = rollout(
            policy,
            prefix,
            policy.horizon(),
            derive_seed(seed, &[i as u64]),
        )?;
        let remaining = record.tokens.len() - prefix.len();
        let value_bin = grid.value_bin(record.value)?;
        let length_bin = grid.length_bin(remaining as u64)?;
        cells[value_bin * grid.num_length_bins() + length_bin] += 1.0;
    }
    for c in &mut cells {
        *c /= n as f64;
    }
    JointDistribution::new(Arc::clone(grid), cells)
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Supplies the per-prefix joint prediction the allocation engine runs on.
pub trait Predictor: Send + Sync {
    fn grid(&self) -> &Arc<BinGrid>;

    fn joint_for(&self, state: &MetaState, node: NodeId) -> Result<JointDistribution>;
}

/// Exact predictor: serves the world's true conditional joint for every
/// prefix, precomputed for all (phase, depth) pairs.
pub struct OraclePredictor {
    world: Arc<SyntheticWorld>,
    grid: Arc<BinGrid>,
    /// `by_depth[d][phase]`, for continuing prefixes of depth `d`.
    by_depth: Vec<Vec<JointDistribution>>,
}

impl OraclePredictor {
    pub fn new(world: Arc<SyntheticWorld>, grid: Arc<BinGrid>) -> Result<Self> {
        let by_depth = world.oracle_sweep(&grid, 0)?;
        Ok(Self {
            world,
            grid,
            by_depth,
        })
    }

    pub fn world(&self) -> &Arc<SyntheticWorld> {
        &self.world
    }
}

impl Predictor for OraclePredictor {
    fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    fn joint_for(&self, state: &MetaState, node: NodeId) -> Result<JointDistribution> {
        let info = state.node(node)?;
        let tokens = state.tokens_of(node)?;
        if info.finished {
            let value = self.world.terminal_value(&tokens);
            return JointDistribution::point_mass(
                Arc::clone(&self.grid),
                self.grid.value_bin(value)?,
                self.grid.length_bin(0)?,
            );
        }
        let phase = self.world.phase_of(&tokens)?;
        Ok(self.by_depth[info.depth as usize][phase].clone())
    }
}

/// Wraps a predictor with seeded logit noise: log-probabilities are
/// perturbed by `scale`-sized Gaussian noise and renormalized. The noise
/// is a pure function of (seed, prompt, prefix), so repeated queries are
/// stable and runs replay exactly.
pub struct NoisyPredictor {
    base: Arc<dyn Predictor>,
    scale: f64,
    seed: u64,
}

impl NoisyPredictor {
    pub fn new(base: Arc<dyn Predictor>, scale: f64, seed: u64) -> Result<Self> {
        if scale < 0.0 || !scale.is_finite() {
            return Err(Error::Config(format!(
                "noise scale {scale} must be finite and >= 0"
            )));
        }
        Ok(Self { base, scale, seed })
    }
}

impl Predictor for NoisyPredictor {
    fn grid(&self) -> &Arc<BinGrid> {
        self.base.grid()
    }

    fn joint_for(&self, state: &MetaState, node: NodeId) -> Result<JointDistribution> {
        let base = self.base.joint_for(state, node)?;
        if self.scale == 0.0 {
            return Ok(base);
        }
        let tokens = state.tokens_of(node)?;
        let mut parts: Vec<u64> = Vec::with_capacity(tokens.len() + 1);
        parts.push(state.prompt_id());
        parts.extend(tokens.iter().map(|t| *t as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &parts));
        let logits: Vec<f64> = base
            .probs()
            .iter()
            .map(|p| {
                let noise: f64 = rng.sample(StandardNormal);
                p.max(1e-12).ln() + self.scale * noise
            })
            .collect();
        JointDistribution::from_logits(Arc::clone(self.base.grid()), &logits)
    }
}

/// Serves one fixed joint for every prefix. Useful as a degenerate
/// baseline predictor.
pub struct FixedPredictor {
    joint: JointDistribution,
}

impl FixedPredictor {
    pub fn new(joint: JointDistribution) -> Self {
        Self { joint }
    }
}

impl Predictor for FixedPredictor {
    fn grid(&self) -> &Arc<BinGrid> {
        self.joint.grid()
    }

    fn joint_for(&self, _state: &MetaState, _node: NodeId) -> Result<JointDistribution> {
        Ok(self.joint.clone())
    }
}

/// Serves joints decoded from an external logit-dump file, keyed by
/// (episode id, node id). Queries resolve to the record with the largest
/// step not beyond the state's current step.
pub struct DumpPredictor {
    grid: Arc<BinGrid>,
    by_key: HashMap<(u64, u64), Vec<(u64, JointDistribution)>>,
}

impl DumpPredictor {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let (header, records) = crate::binning::read_dump(path)?;
        let codec = header.codec()?;
        let mut by_key: HashMap<(u64, u64), Vec<(u64, JointDistribution)>> = HashMap::new();
        for record in &records {
            let joint = record.decode(&codec)?;
            by_key
                .entry((record.episode_id, record.node_id))
                .or_default()
                .push((record.step, joint));
        }
        for entries in by_key.values_mut() {
            entries.sort_by_key(|(step, _)| *step);
        }
        Ok(Self {
            grid: Arc::clone(codec.grid()),
            by_key,
        })
    }
}

impl Predictor for DumpPredictor {
    fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    fn joint_for(&self, state: &MetaState, node: NodeId) -> Result<JointDistribution> {
        let entries = self
            .by_key
            .get(&(state.prompt_id(), node.0 as u64))
            .ok_or_else(|| {
                Error::Input(format!(
                    "no dump record for episode {} node {node}",
                    state.prompt_id()
                ))
            })?;
        let at_or_before = entries.iter().rev().find(|(step, _)| *step <= state.step());
        let (_, joint) = at_or_before.unwrap_or(&entries[0]);
        Ok(joint.clone())
    }
}

fn calibration_prefixes(
    worlds: &[Arc<SyntheticWorld>],
    grid: &Arc<BinGrid>,
    prefixes_per_world: usize,
    seed: u64,
) -> Result<Vec<(Arc<OraclePredictor>, MetaState, NodeId)>> {
    // Fixed prefix population: one cut point per seeded rollout.
    let mut samples = Vec::new();
    for (w, world) in worlds.iter().enumerate() {
        let oracle = Arc::new(OraclePredictor::new(Arc::clone(world), Arc::clone(grid))?);
        for r in 0..prefixes_per_world {
            let rollout_seed = derive_seed(seed, &[w as u64, r as u64]);
            let record = rollout(world.as_ref(), &[], world.horizon, rollout_seed)?;
            let cut =
                (derive_seed(seed, &[w as u64, r as u64, 1]) % record.tokens.len() as u64) as usize;
            let (state, tip) = MetaState::from_token_chain(
                derive_seed(seed, &[w as u64, r as u64, 2]),
                &record.tokens[..cut],
                world.as_ref(),
            )?;
            samples.push((Arc::clone(&oracle), state, tip));
        }
    }
    Ok(samples)
}

/// Median total variation between the oracle and its noisy wrapper at
/// `scale`, over seeded mid-rollout prefixes.
pub fn median_tv_from_oracle(
    worlds: &[Arc<SyntheticWorld>],
    grid: &Arc<BinGrid>,
    scale: f64,
    prefixes_per_world: usize,
    seed: u64,
) -> Result<f64> {
    let samples = calibration_prefixes(worlds, grid, prefixes_per_world, seed)?;
    if samples.is_empty() {
        return Err(Error::Input("no calibration prefixes".into()));
    }
    let mut tvs = Vec::with_capacity(samples.len());
    for (oracle, state, tip) in &samples {
        let base: Arc<dyn Predictor> = Arc::clone(oracle) as Arc<dyn Predictor>;
        let noisy = NoisyPredictor::new(base, scale, seed)?;
        let truth = oracle.joint_for(state, *tip)?;
        let predicted = noisy.joint_for(state, *tip)?;
        tvs.push(total_variation(&truth, &predicted)?);
    }
    tvs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(tvs[tvs.len() / 2])
}

/// Find a noise scale whose median total variation from the oracle over
/// seeded prefixes lands at `target_tv`, by bisection.
pub fn calibrate_noise_scale(
    worlds: &[Arc<SyntheticWorld>],
    grid: &Arc<BinGrid>,
    target_tv: f64,
    prefixes_per_world: usize,
    seed: u64,
) -> Result<f64> {
    if worlds.is_empty() {
        return Err(Error::Input("no calibration worlds".into()));
    }
    if !(0.0..1.0).contains(&target_tv) {
        return Err(Error::Input(format!(
            "target TV {target_tv} outside [0, 1)"
        )));
    }
    let median = |scale: f64| median_tv_from_oracle(worlds, grid, scale, prefixes_per_world, seed);
    let (mut lo, mut hi) = (1e-3, 64.0);
    if median(hi)? < target_tv {
        return Ok(hi);
    }
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if median(mid)? < target_tv {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Named worlds
// ---------------------------------------------------------------------------

/// The mixed-difficulty suite: easy/hard x short/long worlds. The hard
/// worlds carry latent phases that progressively reveal correctness and,
/// for the long one, a low-value slow phase worth pruning.
pub fn mixed_bundle() -> Vec<SyntheticWorld> {
    vec![
        SyntheticWorld::builder("easy-short")
            .horizon(96)
            .branch_tokens(64)
            .answers(&[1.0, 0.0])
            .phase(1.0 / 16.0, &[0.9, 0.1], &[1.0])
            .build()
            .unwrap(),
        SyntheticWorld::builder("easy-long")
            .horizon(256)
            .branch_tokens(64)
            .answers(&[1.0, 0.0])
            .phase(1.0 / 72.0, &[0.85, 0.15], &[1.0])
            .build()
            .unwrap(),
        SyntheticWorld::builder("hard-short")
            .hard(true)
            .horizon(96)
            .branch_tokens(64)
            .answers(&[1.0, 0.0])
            .phase(0.04, &[0.40, 0.60], &[0.80, 0.12, 0.08])
            .phase(0.15, &[0.80, 0.20], &[0.0, 1.0, 0.0])
            .phase(0.10, &[0.08, 0.92], &[0.0, 0.0, 1.0])
            .build()
            .unwrap(),
        SyntheticWorld::builder("hard-long")
            .hard(true)
            .horizon(256)
            .branch_tokens(64)
            .answers(&[1.0, 0.0])
            .phase(0.03, &[0.30, 0.70], &[0.90, 0.055, 0.045])
            .phase(0.20, &[0.80, 0.20], &[0.0, 1.0, 0.0])
            .phase(0.01, &[0.05, 0.95], &[0.0, 0.0, 1.0])
            .build()
            .unwrap(),
    ]
}

/// Single-phase geometric world: one correct and one wrong answer, success
/// probability `p_correct` independent of the path.
pub fn bernoulli_world(name: &str, p_correct: f64, stop_prob: f64, horizon: u32) -> SyntheticWorld {
    SyntheticWorld::builder(name)
        .horizon(horizon)
        .branch_tokens(64)
        .answers(&[1.0, 0.0])
        .phase(stop_prob, &[p_correct, 1.0 - p_correct], &[1.0])
        .build()
        .unwrap()
}

/// Resolve a bundle name to its worlds.
pub fn bundle(name: &str) -> Result<Vec<SyntheticWorld>> {
    match name {
        "mixed" => Ok(mixed_bundle()),
        "hard" => Ok(mixed_bundle().into_iter().filter(|w| w.is_hard()).collect()),
        "easy" => Ok(mixed_bundle()
            .into_iter()
            .filter(|w| !w.is_hard())
            .collect()),
        "bernoulli-p30" => Ok(vec![bernoulli_world("bernoulli-p30", 0.3, 0.1, 64)]),
        "bernoulli-p60" => Ok(vec![bernoulli_world("bernoulli-p60", 0.6, 0.1, 64)]),
        other => {
            if let Some(world) = mixed_bundle().into_iter().find(|w| w.name() == other) {
                Ok(vec![world])
            } else {
                Err(Error::Config(format!("unknown world bundle '{other}'")))
            }
        }
    }
}

/// Load worlds from a JSON file holding either one world object or
/// `{"worlds": [...]}`.
pub fn load_worlds_file<P: AsRef<Path>>(path: P) -> Result<Vec<SyntheticWorld>> {
    #[derive(Deserialize)]
    struct WorldsFile {
        worlds: Vec<SyntheticWorld>,
    }
    let text = std::fs::read_to_string(path)?;
    let worlds = match serde_json::from_str::<WorldsFile>(&text) {
        Ok(file) => file.worlds,
        Err(_) => vec![serde_json::from_str::<SyntheticWorld>(&text)?],
    };
    for world in &worlds {
        world.validate()?;
    }
    Ok(worlds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(horizon: u32) -> Arc<BinGrid> {
        // Unit-width length bins make the one-step shift exact.
        let lengths: Vec<u64> = (0..=horizon as u64 + 1).collect();
        Arc::new(BinGrid::new(vec![0.0, 0.35, 0.65, 1.0], lengths).unwrap())
    }

    fn immediate_world() -> SyntheticWorld {
        SyntheticWorld::builder("immediate")
            .horizon(4)
            .answers(&[1.0])
            .phase(1.0, &[1.0], &[1.0])
            .build()
            .unwrap()
    }

    fn geometric_world(stop: f64) -> SyntheticWorld {
        SyntheticWorld::builder("geom")
            .horizon(512)
            .branch_tokens(4)
            .answers(&[1.0, 0.0])
            .phase(stop, &[0.6, 0.4], &[1.0])
            .build()
            .unwrap()
    }

    /// Two phases with hand-computable masses: stop 0.5 in phase 0 with a
    /// high answer, then forced continue into phase 1 which always stops
    /// with a low answer.
    fn two_phase_world() -> SyntheticWorld {
        SyntheticWorld::builder("two-phase")
            .horizon(8)
            .answers(&[0.9, 0.1])
            .phase(0.5, &[1.0, 0.0], &[0.0, 1.0])
            .phase(1.0, &[0.0, 1.0], &[0.0, 1.0])
            .build()
            .unwrap()
    }

    #[test]
    fn immediate_world_rollouts_have_length_one() {
        let world = immediate_world();
        for seed in 0..10 {
            let record = rollout(&world, &[], world.horizon(), seed).unwrap();
            assert_eq!(record.tokens.len(), 1);
            assert_eq!(record.value, 1.0);
        }
    }

    #[test]
    fn seeded_rollouts_replay() {
        let world = geometric_world(0.25);
        let a = rollout(&world, &[], world.horizon(), 99).unwrap();
        let b = rollout(&world, &[], world.horizon(), 99).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn geometric_mean_length() {
        // Stop probability 0.25: mean length 4 (geometric, counting the
        // answer token).
        let world = geometric_world(0.25);
        let n = 10_000;
        let lengths: Vec<f64> = (0..n)
            .map(|i| {
                rollout(&world, &[], world.horizon(), i)
                    .unwrap()
                    .tokens
                    .len() as f64
            })
            .collect();
        let mean: f64 = lengths.iter().sum::<f64>() / n as f64;
        let var: f64 = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 4.0).abs() < 3.0 * se,
            "mean {mean} not within 3 SE ({se}) of 4"
        );
    }

    #[test]
    fn remaining_lengths_telescope() {
        let world = geometric_world(0.3);
        let record = rollout(&world, &[], world.horizon(), 7).unwrap();
        for t in 0..record.total_len() {
            assert_eq!(record.remaining(t), record.remaining(t + 1) + 1);
        }
    }

    #[test]
    fn oracle_point_mass_for_immediate_world() {
        let world = immediate_world();
        let grid = Arc::new(BinGrid::new(vec![0.0, 0.5, 1.0], vec![0, 2, 4, 8]).unwrap());
        let joint = world.oracle_joint(&[], &grid).unwrap();
        // Value 1.0 is in the top bin; remaining length 1 is in [0, 2).
        assert_eq!(joint.prob(1, 0), 1.0);
    }

    #[test]
    fn oracle_matches_hand_derived_two_phase_masses() {
        let world = two_phase_world();
        let grid = unit_grid(8);
        let joint = world.oracle_joint(&[], &grid).unwrap();
        // Stop at once: value 0.9, length 1, probability 0.5.
        // Otherwise one continue token then a forced 0.1 answer: length 2.
        let high_bin = grid.value_bin(0.9).unwrap();
        let low_bin = grid.value_bin(0.1).unwrap();
        assert!((joint.prob(high_bin, grid.length_bin(1).unwrap()) - 0.5).abs() < 1e-12);
        assert!((joint.prob(low_bin, grid.length_bin(2).unwrap()) - 0.5).abs() < 1e-12);
        assert!((joint.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_close_to_monte_carlo() {
        let world = geometric_world(0.2);
        let grid = Arc::new(
            BinGrid::uniform_values(4, crate::binning::log_length_boundaries(512, 8, 4).unwrap())
                .unwrap(),
        );
        let exact = world.oracle_joint(&[], &grid).unwrap();
        let mc = mc_estimate_joint(&world, &[], 100_000, &grid, 3).unwrap();
        let tv = total_variation(&exact, &mc).unwrap();
        assert!(tv <= 0.02, "TV {tv} too large");

        let coarse = mc_estimate_joint(&world, &[], 256, &grid, 3).unwrap();
        let tv_coarse = total_variation(&exact, &coarse).unwrap();
        assert!(
            tv >= 0.0 && tv_coarse >= tv,
            "more samples should not hurt: {tv_coarse} vs {tv}"
        );
    }

    #[test]
    fn mc_estimate_point_masses() {
        let world = immediate_world();
        let grid = Arc::new(BinGrid::new(vec![0.0, 0.5, 1.0], vec![0, 2, 4]).unwrap());
        let single = mc_estimate_joint(&world, &[], 1, &grid, 0).unwrap();
        assert_eq!(single.prob(1, 0), 1.0);
        let many = mc_estimate_joint(&world, &[], 500, &grid, 1).unwrap();
        assert_eq!(many.prob(1, 0), 1.0);
    }

    #[test]
    fn oracle_satisfies_one_step_bellman_mixture() {
        let world = SyntheticWorld::builder("bellman")
            .horizon(24)
            .branch_tokens(3)
            .answers(&[0.9, 0.1])
            .phase(0.3, &[0.7, 0.3], &[0.5, 0.5])
            .phase(0.1, &[0.2, 0.8], &[0.25, 0.75])
            .build()
            .unwrap();
        let grid = unit_grid(24);
        let prefix: Vec<Token> = vec![];
        let joint = world.oracle_joint(&prefix, &grid).unwrap();
        // Independent recomputation: token-probability-weighted mixture of
        // successor joints, shifted by one length unit.
        let mut cells = vec![0.0; grid.cells()];
        for (token, p) in world.next_token_probs(&prefix).unwrap() {
            if world.is_terminal_token(token) {
                let v = world.answer_value(token).unwrap();
                let b = grid.value_bin(v).unwrap();
                let l = grid.length_bin(1).unwrap();
                cells[b * grid.num_length_bins() + l] += p;
            } else {
                let mut next_prefix = prefix.clone();
                next_prefix.push(token);
                let successor = world.oracle_joint(&next_prefix, &grid).unwrap();
                for b in 0..grid.num_value_bins() {
                    for l in 0..grid.num_length_bins() - 1 {
                        // Unit-width bins: remaining r maps to bin r-1, so
                        // shifting by one token moves mass one bin right.
                        cells[b * grid.num_length_bins() + l + 1] += p * successor.prob(b, l);
                    }
                }
            }
        }
        for b in 0..grid.num_value_bins() {
            for l in 0..grid.num_length_bins() {
                assert!(
                    (joint.prob(b, l) - cells[b * grid.num_length_bins() + l]).abs() < 1e-9,
                    "cell ({b}, {l}) mismatch"
                );
            }
        }
    }

    #[test]
    fn oracle_predictor_serves_finished_and_unfinished_nodes() {
        let world = Arc::new(two_phase_world());
        let grid = unit_grid(8);
        let oracle = OraclePredictor::new(Arc::clone(&world), Arc::clone(&grid)).unwrap();
        let record = rollout(world.as_ref(), &[], 8, 12).unwrap();
        let (state, tip) = MetaState::from_token_chain(0, &record.tokens, world.as_ref()).unwrap();
        let terminal = oracle.joint_for(&state, tip).unwrap();
        let value_bin = grid.value_bin(record.value).unwrap();
        assert_eq!(terminal.prob(value_bin, 0), 1.0);

        let root_joint = oracle.joint_for(&state, state.root()).unwrap();
        let direct = world.oracle_joint(&[], &grid).unwrap();
        assert_eq!(root_joint.probs(), direct.probs());
    }

    #[test]
    fn noise_scale_zero_is_exact_and_noise_grows_with_scale() {
        let world = Arc::new(geometric_world(0.15));
        let grid = Arc::new(
            BinGrid::uniform_values(5, crate::binning::log_length_boundaries(512, 8, 4).unwrap())
                .unwrap(),
        );
        let oracle: Arc<dyn Predictor> =
            Arc::new(OraclePredictor::new(Arc::clone(&world), Arc::clone(&grid)).unwrap());
        let state = MetaState::new(0);
        let base = oracle.joint_for(&state, state.root()).unwrap();

        let silent = NoisyPredictor::new(Arc::clone(&oracle), 0.0, 5).unwrap();
        let same = silent.joint_for(&state, state.root()).unwrap();
        assert_eq!(total_variation(&base, &same).unwrap(), 0.0);

        // Median TV over 100 prefixes grows with the scale.
        let mut medians = Vec::new();
        for scale in [0.5, 1.5, 4.0] {
            let noisy = NoisyPredictor::new(Arc::clone(&oracle), scale, 5).unwrap();
            let mut tvs = Vec::new();
            for r in 0..100u64 {
                let record = rollout(world.as_ref(), &[], 512, derive_seed(9, &[r])).unwrap();
                let cut = (derive_seed(11, &[r]) % record.tokens.len() as u64) as usize;
                let (state, tip) =
                    MetaState::from_token_chain(r, &record.tokens[..cut], world.as_ref()).unwrap();
                let truth = oracle.joint_for(&state, tip).unwrap();
                let noised = noisy.joint_for(&state, tip).unwrap();
                tvs.push(total_variation(&truth, &noised).unwrap());
            }
            tvs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(tvs[tvs.len() / 2]);
        }
        assert!(
            medians[0] < medians[1] && medians[1] < medians[2],
            "{medians:?}"
        );
    }

    #[test]
    fn world_files_round_trip() {
        let worlds = mixed_bundle();
        let json = serde_json::to_string(&worlds[2]).unwrap();
        let back: SyntheticWorld = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.name(), "hard-short");

        let dir = std::env::temp_dir().join("ziprc-worlds-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bundle.json");
        std::fs::write(
            &path,
            serde_json::to_string(&serde_json::json!({ "worlds": worlds })).unwrap(),
        )
        .unwrap();
        let loaded = load_worlds_file(&path).unwrap();
        assert_eq!(loaded.len(), worlds.len());
    }

    #[test]
    fn bundles_resolve() {
        assert_eq!(bundle("mixed").unwrap().len(), 4);
        assert_eq!(bundle("hard").unwrap().len(), 2);
        assert!(bundle("nope").is_err());
        let p30 = bundle("bernoulli-p30").unwrap();
        assert!((p30[0].success_probability().unwrap() - 0.3).abs() < 1e-9);
    }
}
