//! Discretization grids and the reserved-logit codec.
//!
//! A [`BinGrid`] partitions the verifier-value range `[0, 1]` into `B_V`
//! bins and remaining-length counts into `B_T` bins. A [`GridCodec`] maps
//! each `(value_bin, length_bin)` cell onto one reserved index of a
//! vocabulary-sized logit vector, so a single forward pass can carry both
//! the next-token distribution (over the non-reserved complement) and a
//! joint value/length prediction (over the reserved block).
//!
//! Bin indices are 0-based throughout: value bins live in `0..B_V` and
//! length bins in `0..B_T`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::JointDistribution;
use crate::worlds::RolloutRecord;

/// Value/length bin boundaries.
///
/// Value boundaries span exactly `[0, 1]`; length boundaries start at 0.
/// Bin `i` covers the half-open interval `[boundary[i], boundary[i+1])`,
/// except that the topmost boundary is inclusive so that a perfect score
/// of 1.0 (or a length equal to the final boundary) still has a bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    value_boundaries: Vec<f64>,
    length_boundaries: Vec<u64>,
}

impl BinGrid {
    pub fn new(value_boundaries: Vec<f64>, length_boundaries: Vec<u64>) -> Result<Self> {
        if value_boundaries.len() < 2 || length_boundaries.len() < 2 {
            return Err(Error::Config(
                "a grid needs at least one value bin and one length bin".into(),
            ));
        }
        if !value_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "value boundaries must be strictly increasing".into(),
            ));
        }
        if !length_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "length boundaries must be strictly increasing".into(),
            ));
        }
        if value_boundaries[0] != 0.0 || *value_boundaries.last().unwrap() != 1.0 {
            return Err(Error::Config(
                "value boundaries must span exactly [0, 1]".into(),
            ));
        }
        if length_boundaries[0] != 0 {
            return Err(Error::Config("length boundaries must start at 0".into()));
        }
        Ok(Self {
            value_boundaries,
            length_boundaries,
        })
    }

    /// Uniform value bins over `[0, 1]` plus the given length boundaries.
    pub fn uniform_values(num_value_bins: usize, length_boundaries: Vec<u64>) -> Result<Self> {
        if num_value_bins == 0 {
            return Err(Error::Config("need at least one value bin".into()));
        }
        let value_boundaries = (0..=num_value_bins)
            .map(|i| i as f64 / num_value_bins as f64)
            .collect();
        Self::new(value_boundaries, length_boundaries)
    }

    pub fn num_value_bins(&self) -> usize {
        self.value_boundaries.len() - 1
    }

    pub fn num_length_bins(&self) -> usize {
        self.length_boundaries.len() - 1
    }

    /// Number of grid cells, `B_V * B_T`.
    pub fn cells(&self) -> usize {
        self.num_value_bins() * self.num_length_bins()
    }

    pub fn value_boundaries(&self) -> &[f64] {
        &self.value_boundaries
    }

    pub fn length_boundaries(&self) -> &[u64] {
        &self.length_boundaries
    }

    /// Largest representable length (the final boundary, inclusive).
    pub fn max_length(&self) -> u64 {
        *self.length_boundaries.last().unwrap()
    }

    /// Representative value of a value bin: the interval midpoint.
    pub fn value_midpoint(&self, bin: usize) -> f64 {
        (self.value_boundaries[bin] + self.value_boundaries[bin + 1]) / 2.0
    }

    /// Representative length of a length bin: the interval midpoint.
    pub fn length_midpoint(&self, bin: usize) -> f64 {
        (self.length_boundaries[bin] as f64 + self.length_boundaries[bin + 1] as f64) / 2.0
    }

    /// Bin containing `value`; the top boundary is inclusive.
    pub fn value_bin(&self, value: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Input(format!("value {value} outside [0, 1]")));
        }
        let idx = self.value_boundaries.partition_point(|b| *b <= value);
        Ok(idx.saturating_sub(1).min(self.num_value_bins() - 1))
    }

    /// Bin containing `length`; the top boundary is inclusive.
    pub fn length_bin(&self, length: u64) -> Result<usize> {
        if length > self.max_length() {
            return Err(Error::Input(format!(
                "length {length} beyond final boundary {}",
                self.max_length()
            )));
        }
        let idx = self.length_boundaries.partition_point(|b| *b <= length);
        Ok(idx.saturating_sub(1).min(self.num_length_bins() - 1))
    }
}

/// Logarithmic length-bin boundaries.
///
/// The first bin `[0, startup_len)` absorbs all very short remaining
/// lengths; every later boundary doubles the previous one. Exactly
/// `num_bins` bins are produced and the final boundary is guaranteed to
/// reach at least `max_len`.
pub fn log_length_boundaries(max_len: u64, num_bins: usize, startup_len: u64) -> Result<Vec<u64>> {
    if startup_len < 1 || max_len < startup_len {
        return Err(Error::Config(format!(
            "need max_len >= startup_len >= 1, got max_len={max_len} startup_len={startup_len}"
        )));
    }
    if num_bins < 2 {
        return Err(Error::Config("need at least 2 length bins".into()));
    }
    let mut boundaries = Vec::with_capacity(num_bins + 1);
    boundaries.push(0u64);
    boundaries.push(startup_len);
    while boundaries.len() < num_bins + 1 {
        let next = boundaries
            .last()
            .unwrap()
            .checked_mul(2)
            .ok_or_else(|| Error::Config("length boundary overflow".into()))?;
        boundaries.push(next);
    }
    if boundaries[num_bins] < max_len {
        // Smallest bin count whose doubling chain reaches max_len.
        let mut needed = 2usize;
        let mut reach = startup_len;
        while reach < max_len {
            reach = reach.saturating_mul(2);
            needed += 1;
        }
        return Err(Error::Config(format!(
            "doubling from startup_len={startup_len} cannot reach max_len={max_len} \
             in {num_bins} bins; need at least {} bins",
            needed - 1
        )));
    }
    Ok(boundaries)
}

/// Maps grid cells onto a contiguous reserved block of vocabulary indices.
#[derive(Clone, Debug)]
pub struct GridCodec {
    grid: Arc<BinGrid>,
    vocab_size: usize,
    reserved_start: usize,
}

impl GridCodec {
    pub fn new(grid: Arc<BinGrid>, vocab_size: usize, reserved_start: usize) -> Result<Self> {
        if reserved_start + grid.cells() > vocab_size {
            return Err(Error::Config(format!(
                "reserved block [{reserved_start}, {}) exceeds vocab_size {vocab_size}",
                reserved_start + grid.cells()
            )));
        }
        Ok(Self {
            grid,
            vocab_size,
            reserved_start,
        })
    }

    pub fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn reserved_start(&self) -> usize {
        self.reserved_start
    }

    pub fn reserved_len(&self) -> usize {
        self.grid.cells()
    }

    fn is_reserved(&self, index: usize) -> bool {
        (self.reserved_start..self.reserved_start + self.reserved_len()).contains(&index)
    }

    /// Flat vocabulary index of cell `(value_bin, length_bin)`.
    pub fn reserved_index(&self, value_bin: usize, length_bin: usize) -> Result<usize> {
        if value_bin >= self.grid.num_value_bins() || length_bin >= self.grid.num_length_bins() {
            return Err(Error::Bounds(format!(
                "cell ({value_bin}, {length_bin}) outside {}x{} grid",
                self.grid.num_value_bins(),
                self.grid.num_length_bins()
            )));
        }
        Ok(self.reserved_start + value_bin * self.grid.num_length_bins() + length_bin)
    }

    /// Inverse of [`reserved_index`](Self::reserved_index).
    pub fn grid_coords(&self, index: usize) -> Result<(usize, usize)> {
        if !self.is_reserved(index) {
            return Err(Error::Bounds(format!(
                "index {index} not in the reserved block"
            )));
        }
        let offset = index - self.reserved_start;
        Ok((
            offset / self.grid.num_length_bins(),
            offset % self.grid.num_length_bins(),
        ))
    }

    /// Joint distribution encoded by the reserved slice of a full logit
    /// vector (softmax over the reserved block only).
    pub fn decode_joint(&self, logits: &[f64]) -> Result<JointDistribution> {
        if logits.len() != self.vocab_size {
            return Err(Error::Input(format!(
                "expected {} logits, got {}",
                self.vocab_size,
                logits.len()
            )));
        }
        let reserved = &logits[self.reserved_start..self.reserved_start + self.reserved_len()];
        self.decode_joint_slice(reserved)
    }

    /// Same as [`decode_joint`](Self::decode_joint) for a record that
    /// carries only the reserved slice.
    pub fn decode_joint_slice(&self, reserved: &[f64]) -> Result<JointDistribution> {
        if reserved.len() != self.reserved_len() {
            return Err(Error::Input(format!(
                "expected {} reserved logits, got {}",
                self.reserved_len(),
                reserved.len()
            )));
        }
        if reserved.iter().any(|z| !z.is_finite()) {
            return Err(Error::Input("non-finite logit in reserved slice".into()));
        }
        JointDistribution::from_logits(Arc::clone(&self.grid), reserved)
    }

    /// Decoding distribution with the reserved block masked out: zero on
    /// every reserved index, renormalized softmax over the complement.
    pub fn masked_policy(&self, logits: &[f64]) -> Result<Vec<f64>> {
        if logits.len() != self.vocab_size {
            return Err(Error::Input(format!(
                "expected {} logits, got {}",
                self.vocab_size,
                logits.len()
            )));
        }
        if logits.iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
            return Err(Error::Input("NaN or +inf logit".into()));
        }
        let max = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_reserved(*i))
            .map(|(_, z)| *z)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Input("all non-reserved logits are -inf".into()));
        }
        let mut probs = vec![0.0; self.vocab_size];
        let mut total = 0.0;
        for (i, z) in logits.iter().enumerate() {
            if !self.is_reserved(i) {
                let e = (z - max).exp();
                probs[i] = e;
                total += e;
            }
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }
}

/// One per-prefix training target: the bin pair of the trajectory's final
/// verifier value and of the length still remaining at that prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixTarget {
    pub value_bin: usize,
    pub length_bin: usize,
}

/// Targets for every prefix of a completed rollout, from the empty prefix
/// (full length remaining) through the final one (zero remaining).
pub fn prefix_targets(rollout: &RolloutRecord, grid: &BinGrid) -> Result<Vec<PrefixTarget>> {
    if !(0.0..=1.0).contains(&rollout.value) {
        return Err(Error::Input(format!(
            "verifier value {} outside [0, 1]",
            rollout.value
        )));
    }
    let total = rollout.total_len();
    if total > grid.max_length() {
        return Err(Error::Input(format!(
            "trajectory length {total} beyond grid maximum {}",
            grid.max_length()
        )));
    }
    let value_bin = grid.value_bin(rollout.value)?;
    (0..=total)
        .map(|t| {
            Ok(PrefixTarget {
                value_bin,
                length_bin: grid.length_bin(total - t)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Logit-dump file format
// ---------------------------------------------------------------------------

/// First record of a logit-dump file: the codec parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpHeader {
    pub vocab_size: usize,
    pub reserved_start: usize,
    pub value_boundaries: Vec<f64>,
    pub length_boundaries: Vec<u64>,
}

impl DumpHeader {
    pub fn from_codec(codec: &GridCodec) -> Self {
        Self {
            vocab_size: codec.vocab_size(),
            reserved_start: codec.reserved_start(),
            value_boundaries: codec.grid().value_boundaries().to_vec(),
            length_boundaries: codec.grid().length_boundaries().to_vec(),
        }
    }

    pub fn codec(&self) -> Result<GridCodec> {
        let grid = BinGrid::new(
            self.value_boundaries.clone(),
            self.length_boundaries.clone(),
        )?;
        GridCodec::new(Arc::new(grid), self.vocab_size, self.reserved_start)
    }
}

/// One per-step record. Either the reserved slice alone (the compact
/// form) or the full logit vector must be present.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub episode_id: u64,
    pub node_id: u64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserved_logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl DumpRecord {
    pub fn decode(&self, codec: &GridCodec) -> Result<JointDistribution> {
        match (&self.reserved_logits, &self.logits) {
            (Some(reserved), _) => codec.decode_joint_slice(reserved),
            (None, Some(full)) => codec.decode_joint(full),
            (None, None) => Err(Error::Input(format!(
                "dump record (episode {}, node {}) carries no logits",
                self.episode_id, self.node_id
            ))),
        }
    }
}

/// Write a logit dump: one header line, then one record per line.
pub fn write_dump<P: AsRef<Path>>(
    path: P,
    header: &DumpHeader,
    records: &[DumpRecord],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a logit dump written by [`write_dump`] (or any producer of the
/// same newline-delimited format).
pub fn read_dump<P: AsRef<Path>>(path: P) -> Result<(DumpHeader, Vec<DumpRecord>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Input("empty dump file".into()))??;
    let header: DumpHeader = serde_json::from_str(&header_line)?;
    let codec = header.codec()?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DumpRecord = serde_json::from_str(&line)?;
        if let Some(reserved) = &record.reserved_logits {
            if reserved.len() != codec.reserved_len() {
                return Err(Error::Input(format!(
                    "record (episode {}, node {}): reserved slice length {} != {}",
                    record.episode_id,
                    record.node_id,
                    reserved.len(),
                    codec.reserved_len()
                )));
            }
        } else if let Some(full) = &record.logits {
            if full.len() != codec.vocab_size() {
                return Err(Error::Input(format!(
                    "record (episode {}, node {}): logit vector length {} != vocab {}",
                    record.episode_id,
                    record.node_id,
                    full.len(),
                    codec.vocab_size()
                )));
            }
        } else {
            return Err(Error::Input(format!(
                "record (episode {}, node {}) carries no logits",
                record.episode_id, record.node_id
            )));
        }
        records.push(record);
    }
    Ok((header, records))
}
