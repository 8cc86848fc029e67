//! Joint value/remaining-length distributions and derived quantities.
//!
//! A [`JointDistribution`] is a normalized probability grid over
//! `(value_bin, length_bin)` cells. Everything the allocation engine
//! consumes is derived here: marginals, midpoint expectations, CDFs,
//! order statistics of the maximum over a set of prefixes, horizon-capped
//! joints, temporal smoothing, and total variation.
//!
//! Order statistics over a set of prefixes treat the per-prefix outcomes
//! as independent (the product-of-CDFs construction), including prefixes
//! that share ancestry in the trie. That is a modeling assumption, not a
//! theorem about the underlying process.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::binning::BinGrid;
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A normalized `B_V x B_T` probability grid tied to a [`BinGrid`].
#[derive(Clone, Debug)]
pub struct JointDistribution {
    grid: Arc<BinGrid>,
    /// Row-major: `probs[value_bin * B_T + length_bin]`.
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(grid: Arc<BinGrid>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.cells() {
            return Err(Error::Input(format!(
                "expected {} cells, got {}",
                grid.cells(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(
                "joint cells must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Input(format!("joint sums to {sum}, not 1")));
        }
        Ok(Self { grid, probs })
    }

    /// Softmax of a reserved-logit slice (numerically stabilized by
    /// subtracting the slice maximum).
    pub fn from_logits(grid: Arc<BinGrid>, logits: &[f64]) -> Result<Self> {
        if logits.len() != grid.cells() {
            return Err(Error::Input(format!(
                "expected {} logits, got {}",
                grid.cells(),
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Input("non-finite logit".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Ok(Self { grid, probs })
    }

    /// All mass on one cell.
    pub fn point_mass(grid: Arc<BinGrid>, value_bin: usize, length_bin: usize) -> Result<Self> {
        if value_bin >= grid.num_value_bins() || length_bin >= grid.num_length_bins() {
            return Err(Error::Bounds(format!(
                "cell ({value_bin}, {length_bin}) outside {}x{} grid",
                grid.num_value_bins(),
                grid.num_length_bins()
            )));
        }
        let mut probs = vec![0.0; grid.cells()];
        probs[value_bin * grid.num_length_bins() + length_bin] = 1.0;
        Ok(Self { grid, probs })
    }

    pub fn uniform(grid: Arc<BinGrid>) -> Self {
        let cells = grid.cells();
        Self {
            grid,
            probs: vec![1.0 / cells as f64; cells],
        }
    }

    pub fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, value_bin: usize, length_bin: usize) -> f64 {
        self.probs[value_bin * self.grid.num_length_bins() + length_bin]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid
    }

    pub fn value_marginal(&self) -> ValueMarginal {
        let bt = self.grid.num_length_bins();
        let probs = (0..self.grid.num_value_bins())
            .map(|b| self.probs[b * bt..(b + 1) * bt].iter().sum())
            .collect();
        ValueMarginal {
            grid: Arc::clone(&self.grid),
            probs,
        }
    }

    pub fn length_marginal(&self) -> LengthMarginal {
        let bt = self.grid.num_length_bins();
        let mut probs = vec![0.0; bt];
        for b in 0..self.grid.num_value_bins() {
            for (l, p) in probs.iter_mut().enumerate() {
                *p += self.probs[b * bt + l];
            }
        }
        LengthMarginal {
            grid: Arc::clone(&self.grid),
            probs,
        }
    }

    /// Midpoint-weighted expected verifier value.
    pub fn expected_value(&self) -> f64 {
        self.value_marginal().expected()
    }

    /// Midpoint-weighted expected remaining length, in tokens.
    pub fn expected_remaining(&self) -> f64 {
        self.length_marginal().expected()
    }

    /// Horizon-capped joint: cells at length bins `<= cap_bin` are kept;
    /// all mass beyond the cap collapses onto the clipped cell
    /// `(clipped_value_bin, cap_bin)`. With `cap_bin == B_T - 1` the
    /// output equals the input exactly.
    pub fn capped(&self, cap_bin: usize, clipped_value_bin: usize) -> Result<Self> {
        let bv = self.grid.num_value_bins();
        let bt = self.grid.num_length_bins();
        if cap_bin >= bt {
            return Err(Error::Bounds(format!("cap bin {cap_bin} outside 0..{bt}")));
        }
        if clipped_value_bin >= bv {
            return Err(Error::Bounds(format!(
                "clipped value bin {clipped_value_bin} outside 0..{bv}"
            )));
        }
        if cap_bin == bt - 1 {
            return Ok(self.clone());
        }
        let mut probs = self.probs.clone();
        let mut clipped = 0.0;
        for b in 0..bv {
            for l in (cap_bin + 1)..bt {
                clipped += probs[b * bt + l];
                probs[b * bt + l] = 0.0;
            }
        }
        probs[clipped_value_bin * bt + cap_bin] += clipped;
        Ok(Self {
            grid: Arc::clone(&self.grid),
            probs,
        })
    }

    /// Marginals of the capped joint.
    pub fn capped_marginals(
        &self,
        cap_bin: usize,
        clipped_value_bin: usize,
    ) -> Result<(ValueMarginal, LengthMarginal)> {
        let capped = self.capped(cap_bin, clipped_value_bin)?;
        Ok((capped.value_marginal(), capped.length_marginal()))
    }
}

/// Marginal distribution over value bins.
#[derive(Clone, Debug)]
pub struct ValueMarginal {
    grid: Arc<BinGrid>,
    probs: Vec<f64>,
}

/// Marginal distribution over length bins.
#[derive(Clone, Debug)]
pub struct LengthMarginal {
    grid: Arc<BinGrid>,
    probs: Vec<f64>,
}

macro_rules! marginal_impl {
    ($ty:ident, $bins:ident, $midpoint:ident) => {
        impl $ty {
            pub fn probs(&self) -> &[f64] {
                &self.probs
            }

            pub fn grid(&self) -> &Arc<BinGrid> {
                &self.grid
            }

            /// Cumulative mass of the first `bins` bins; `cdf(0) == 0`
            /// and `cdf(B) == 1` up to accumulated rounding.
            pub fn cdf(&self, bins: usize) -> Result<f64> {
                if bins > self.probs.len() {
                    return Err(Error::Bounds(format!(
                        "cdf argument {bins} outside 0..={}",
                        self.probs.len()
                    )));
                }
                Ok(self.probs[..bins].iter().sum())
            }

            /// Inclusive prefix sums, one entry per `cdf(1)..=cdf(B)`.
            pub fn prefix_sums(&self) -> Vec<f64> {
                let mut acc = 0.0;
                self.probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            }

            /// Midpoint-weighted expectation.
            pub fn expected(&self) -> f64 {
                self.probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| self.grid.$midpoint(i) * p)
                    .sum()
            }
        }
    };
}

marginal_impl!(ValueMarginal, num_value_bins, value_midpoint);
marginal_impl!(LengthMarginal, num_length_bins, length_midpoint);

fn check_set(dists: &[JointDistribution]) -> Result<()> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Input("empty distribution set".into()))?;
    if dists.iter().any(|d| !d.same_grid(first)) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `E[max over the set of the value midpoint]`, treating set members as
/// independent: the CDF of the maximum is the product of per-member CDFs.
pub fn expected_max_value(dists: &[JointDistribution]) -> Result<f64> {
    check_set(dists)?;
    let grid = dists[0].grid();
    let cdfs: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| d.value_marginal().prefix_sums())
        .collect();
    Ok(expected_max_from_cdfs(&cdfs, |i| grid.value_midpoint(i)))
}

/// Sum over set members of the expected remaining length.
pub fn expected_sum_length(dists: &[JointDistribution]) -> Result<f64> {
    check_set(dists)?;
    Ok(dists.iter().map(|d| d.expected_remaining()).sum())
}

/// `E[max over the set of the remaining-length midpoint]` under the same
/// independence assumption as [`expected_max_value`].
pub fn expected_max_length(dists: &[JointDistribution]) -> Result<f64> {
    check_set(dists)?;
    let grid = dists[0].grid();
    let cdfs: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| d.length_marginal().prefix_sums())
        .collect();
    Ok(expected_max_from_cdfs(&cdfs, |i| grid.length_midpoint(i)))
}

fn expected_max_from_cdfs(cdfs: &[Vec<f64>], midpoint: impl Fn(usize) -> f64) -> f64 {
    let bins = cdfs[0].len();
    let mut expectation = 0.0;
    let mut prev_product = 0.0;
    for i in 0..bins {
        let product: f64 = cdfs.iter().map(|c| c[i]).product();
        expectation += midpoint(i) * (product - prev_product);
        prev_product = product;
    }
    expectation
}

/// Half the L1 distance between two joints on the same grid.
pub fn total_variation(p: &JointDistribution, q: &JointDistribution) -> Result<f64> {
    if !p.same_grid(q) {
        return Err(Error::GridMismatch);
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 2.0)
}

/// Ring of the most recent per-step joints along one trajectory path,
/// used to smooth noisy per-token predictions. The caller is responsible
/// for feeding predictions from a single path, oldest to newest, and for
/// excluding terminal prefixes.
#[derive(Clone, Debug)]
pub struct SmoothingWindow {
    cap: usize,
    ring: VecDeque<JointDistribution>,
}

impl SmoothingWindow {
    pub fn new(cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Config(
                "smoothing window must hold at least one entry".into(),
            ));
        }
        Ok(Self {
            cap,
            ring: VecDeque::with_capacity(cap),
        })
    }

    pub fn push(&mut self, joint: JointDistribution) -> Result<()> {
        if let Some(first) = self.ring.front() {
            if !first.same_grid(&joint) {
                return Err(Error::GridMismatch);
            }
        }
        if self.ring.len() == self.cap {
            self.ring.pop_front();
        }
        self.ring.push_back(joint);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Cellwise arithmetic mean of the stored joints.
    pub fn smoothed(&self) -> Result<JointDistribution> {
        let first = self
            .ring
            .front()
            .ok_or_else(|| Error::Input("empty smoothing window".into()))?;
        let mut probs = vec![0.0; first.probs.len()];
        for joint in &self.ring {
            for (acc, p) in probs.iter_mut().zip(&joint.probs) {
                *acc += p;
            }
        }
        let n = self.ring.len() as f64;
        for p in &mut probs {
            *p /= n;
        }
        Ok(JointDistribution {
            grid: Arc::clone(&first.grid),
            probs,
        })
    }
}
