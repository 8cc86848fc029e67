//! The search substrate: a prefix trie over sampled tokens, multiset
//! meta-actions, per-step costs and episode accounting.
//!
//! One step extends every selected prefix by one token drawn from the
//! base policy; draws of the same token from the same parent land in the
//! same trie node, so compute is charged per unique prefix while sample
//! multiplicity is preserved by the per-occurrence outcome report.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worlds::BasePolicy;

pub type Token = u32;

/// Identifier of a trie node; ids are assigned in creation order, so the
/// documented "lowest id" tie rules are insertion-order tie rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Label of the incoming edge; `None` only for the root.
    pub token: Option<Token>,
    /// Generated tokens from the root (the prompt itself has depth 0).
    pub depth: u32,
    pub finished: bool,
    children: BTreeMap<Token, NodeId>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn children(&self) -> impl Iterator<Item = (Token, NodeId)> + '_ {
        self.children.iter().map(|(t, n)| (*t, *n))
    }
}

/// Multiset of node ids with positive multiplicities. Multiplicity
/// encodes branching: a prefix listed `m` times is sampled from `m`
/// times independently in one step.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct MetaAction {
    counts: BTreeMap<NodeId, u32>,
}

impl MetaAction {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(node: NodeId) -> Self {
        let mut action = Self::default();
        action.add(node, 1);
        action
    }

    pub fn from_pairs<I: IntoIterator<Item = (NodeId, u32)>>(pairs: I) -> Self {
        let mut action = Self::default();
        for (node, mult) in pairs {
            action.add(node, mult);
        }
        action
    }

    /// Add `mult` occurrences of `node` (no-op for `mult == 0`).
    pub fn add(&mut self, node: NodeId, mult: u32) {
        if mult > 0 {
            *self.counts.entry(node).or_insert(0) += mult;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Number of distinct prefixes (`|supp|`): one forward pass each.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total_multiplicity(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn multiplicity(&self, node: NodeId) -> u32 {
        self.counts.get(&node).copied().unwrap_or(0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (NodeId, u32)> + '_ {
        self.counts.iter().map(|(n, m)| (*n, *m))
    }

    pub fn support(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.counts.keys().copied()
    }
}

impl Serialize for MetaAction {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<(u32, u32)> = self.counts.iter().map(|(n, m)| (n.0, *m)).collect();
        pairs.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MetaAction {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<(u32, u32)>::deserialize(deserializer)?;
        Ok(Self::from_pairs(
            pairs.into_iter().map(|(n, m)| (NodeId(n), m)),
        ))
    }
}

/// Weights of the per-step cost `beta * (alpha * |supp| + (1 - alpha))`:
/// `alpha` trades compute against latency, `beta` trades reward against
/// cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: f64,
    pub beta: f64,
}

impl CostParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::Config(format!(
                "beta {beta} must be finite and >= 0"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Cost of executing `action` for one step. An empty action still incurs
/// the latency term `beta * (1 - alpha)` if the step elapses; a
/// terminated episode incurs nothing (the driver simply stops charging).
pub fn step_cost(action: &MetaAction, params: &CostParams) -> f64 {
    params.beta * (params.alpha * action.support_size() as f64 + (1.0 - params.alpha))
}

/// Per-occurrence transition report: for every node in the action, the
/// child reached by each occurrence, in draw order. Occurrences that drew
/// the same token report the same child id.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub children: BTreeMap<NodeId, Vec<NodeId>>,
}

/// Prefix trie over generated tokens, rooted at the prompt.
#[derive(Clone, Debug)]
pub struct MetaState {
    nodes: Vec<Node>,
    prompt_id: u64,
    step: u64,
}

impl MetaState {
    /// Fresh state: a single unfinished root carrying the prompt, t = 0.
    pub fn new(prompt_id: u64) -> Self {
        let root = Node {
            id: NodeId(0),
            parent: None,
            token: None,
            depth: 0,
            finished: false,
            children: BTreeMap::new(),
        };
        Self {
            nodes: vec![root],
            prompt_id,
            step: 0,
        }
    }

    /// A linear chain state for a known token sequence: useful for
    /// auditing predictors against recorded rollouts. Returns the state
    /// and the final node of the chain.
    pub fn from_token_chain(
        prompt_id: u64,
        tokens: &[Token],
        policy: &dyn BasePolicy,
    ) -> Result<(Self, NodeId)> {
        let mut state = Self::new(prompt_id);
        let mut tip = state.root();
        for &token in tokens {
            tip = state.append_child(tip, token, policy)?;
            state.step += 1;
        }
        Ok((state, tip))
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn prompt_id(&self) -> u64 {
        self.prompt_id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0 as usize)
            .ok_or_else(|| Error::State(format!("unknown node {id}")))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    /// Token labels along the path from the root to `id`.
    pub fn tokens_of(&self, id: NodeId) -> Result<Vec<Token>> {
        let mut tokens = Vec::new();
        let mut cursor = self.node(id)?;
        while let (Some(parent), Some(token)) = (cursor.parent, cursor.token) {
            tokens.push(token);
            cursor = self.node(parent)?;
        }
        tokens.reverse();
        Ok(tokens)
    }

    /// Unfinished leaves other than the root, in id order. These are the
    /// active sample frontiers.
    pub fn unfinished_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_some() && !n.finished && n.is_leaf())
            .map(|n| n.id)
            .collect()
    }

    /// Finished nodes, in id order. Finished nodes never have children,
    /// so these are always leaves.
    pub fn finished_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.finished)
            .map(|n| n.id)
            .collect()
    }

    /// Samples materialized so far: leaves other than the root, finished
    /// or not.
    pub fn sample_pool(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_some() && n.is_leaf())
            .count()
    }

    fn append_child(
        &mut self,
        parent: NodeId,
        token: Token,
        policy: &dyn BasePolicy,
    ) -> Result<NodeId> {
        if let Some(existing) = self.node(parent)?.children.get(&token) {
            return Ok(*existing);
        }
        let id = NodeId(self.nodes.len() as u32);
        let depth = self.node(parent)?.depth + 1;
        let finished = policy.is_terminal_token(token) || depth >= policy.horizon();
        self.nodes.push(Node {
            id,
            parent: Some(parent),
            token: Some(token),
            depth,
            finished,
            children: BTreeMap::new(),
        });
        self.nodes[parent.0 as usize].children.insert(token, id);
        Ok(id)
    }

    /// Execute one meta-step: draw one token per occurrence in the
    /// multiset, merge same-token children (trie property), advance the
    /// step counter. An empty action only advances the counter.
    pub fn apply_action(
        &mut self,
        action: &MetaAction,
        policy: &dyn BasePolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        for node in action.support() {
            let n = self
                .node(node)
                .map_err(|_| Error::Action(format!("action references missing node {node}")))?;
            if n.finished {
                return Err(Error::Action(format!(
                    "action references finished node {node}"
                )));
            }
        }
        let mut outcome = StepOutcome::default();
        for (node, mult) in action.pairs() {
            let prefix = self.tokens_of(node)?;
            let mut drawn = Vec::with_capacity(mult as usize);
            for _ in 0..mult {
                let token = policy.sample_next(&prefix, rng)?;
                drawn.push(self.append_child(node, token, policy)?);
            }
            outcome.children.insert(node, drawn);
        }
        self.step += 1;
        Ok(outcome)
    }

    /// Structural invariants, for tests and audits: parent/depth
    /// consistency, finished nodes childless, root at id 0.
    pub fn validate(&self) -> Result<()> {
        for node in &self.nodes {
            match node.parent {
                None => {
                    if node.id != NodeId(0) || node.depth != 0 || node.token.is_some() {
                        return Err(Error::State("malformed root".into()));
                    }
                }
                Some(parent) => {
                    let p = self.node(parent)?;
                    if p.depth + 1 != node.depth {
                        return Err(Error::State(format!("depth mismatch at {}", node.id)));
                    }
                    let token = node
                        .token
                        .ok_or_else(|| Error::State(format!("missing token at {}", node.id)))?;
                    if p.children.get(&token) != Some(&node.id) {
                        return Err(Error::State(format!("broken edge into {}", node.id)));
                    }
                    if p.finished {
                        return Err(Error::State(format!("finished node {parent} has a child")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Highest-scoring finished node, ties broken by lowest id. `None` when
/// nothing finished: the no-answer sentinel, worth zero reward.
pub fn select_final(state: &MetaState, mut score: impl FnMut(NodeId) -> f64) -> Option<NodeId> {
    let mut best: Option<(f64, NodeId)> = None;
    for id in state.finished_nodes() {
        let s = score(id);
        match best {
            Some((bs, _)) if s <= bs => {}
            _ => best = Some((s, id)),
        }
    }
    best.map(|(_, id)| id)
}

// ---------------------------------------------------------------------------
// Episode accounting
// ---------------------------------------------------------------------------

/// One logged meta-step: the action taken and the cost it incurred.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoggedStep {
    pub step: u64,
    pub action: MetaAction,
    pub cost: f64,
}

/// Complete record of one episode, sufficient to re-derive the realized
/// utility.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<LoggedStep>,
    pub selected: Option<NodeId>,
    pub terminal_reward: f64,
    pub complete: bool,
}

impl EpisodeLog {
    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    /// Terminal reward minus summed step costs.
    pub fn realized_utility(&self) -> Result<f64> {
        if !self.complete {
            return Err(Error::State("episode log is incomplete".into()));
        }
        Ok(self.terminal_reward - self.total_cost())
    }
}

// ---------------------------------------------------------------------------
// Meta-policies
// ---------------------------------------------------------------------------

/// What a meta-policy wants to do at the current step.
#[derive(Clone, Debug)]
pub enum Decision {
    /// Execute this action (an empty action pauses but still costs the
    /// latency term).
    Act(MetaAction),
    /// Declare the episode done; nothing further is charged.
    Stop,
}

/// A search strategy over the meta-MDP: chooses actions, observes the
/// per-occurrence outcomes, and picks the final answer.
pub trait MetaPolicy {
    fn decide(&mut self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Decision>;

    fn note_outcome(&mut self, state: &MetaState, outcome: &StepOutcome) -> Result<()>;

    fn select_final(&self, state: &MetaState, rng: &mut ChaCha8Rng) -> Result<Option<NodeId>>;

    /// Extra compute charged outside the per-step rule (for example an
    /// external scorer reprocessing finished sequences), in token units.
    fn extra_compute_units(&self, _state: &MetaState) -> f64 {
        0.0
    }
}
