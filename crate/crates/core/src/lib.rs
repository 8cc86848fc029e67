//! Adaptive test-time compute allocation over a prefix trie.
//!
//! The crate models generation-time search as a decision process whose
//! states are prefix tries of sampled token sequences and whose actions
//! are multisets of prefixes to extend by one token. A predictor attached
//! to every prefix supplies a joint distribution over the final verifier
//! value and the remaining generation length, discretized on a
//! value-by-length bin grid. From those joints the sampling utility of any
//! candidate action is computed in closed form (order statistics of the
//! set maximum, expected total and maximum remaining length, horizon
//! capping), and the adaptive strategy picks the argmax action at fixed
//! decision intervals.
//!
//! Fixed-budget baselines (best-of-N, majority voting, length pruning,
//! weighted selection, reward-threshold pruning, beam search) are
//! expressed over the same substrate so that realized reward, compute and
//! latency are directly comparable. Synthetic worlds with exactly
//! computable joint laws stand in for a live generator, which makes every
//! prediction testable against closed forms.
//!
//! Modules:
//! - [`binning`]: bin grids, the reserved-logit codec, training targets.
//! - [`joint`]: joint distributions, marginals, order statistics, capping.
//! - [`meta`]: the prefix-trie state, multiset actions, step costs, logs.
//! - [`worlds`]: synthetic base policies, oracle and noisy predictors.
//! - [`utility`]: the sampling utility and the adaptive meta-policy.
//! - [`strategies`]: baseline meta-policies over the same substrate.
//! - [`harness`]: episode driver, metrics, sweeps, calibration, emission.

pub mod binning;
pub mod error;
pub mod harness;
pub mod joint;
pub mod meta;
pub mod strategies;
pub mod utility;
pub mod worlds;

pub use error::{Error, Result};
