//! Experiment description: worlds, strategies, cost grids, predictor
//! choice and discretization.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binning::{log_length_boundaries, BinGrid};
use crate::error::{Error, Result};
use crate::strategies::StrategySpec;
use crate::utility::UtilityConfig;
use crate::worlds::{bundle, load_worlds_file, SyntheticWorld};

/// Which predictor backs planning and predictor-scored selection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorChoice {
    /// The world's exact conditional law.
    #[default]
    Oracle,
    /// Oracle perturbed by seeded logit noise of the given scale.
    Noisy { scale: f64 },
    /// Joints decoded from an external logit-dump file.
    Dump { path: PathBuf },
}

impl FromStr for PredictorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle" {
            return Ok(PredictorChoice::Oracle);
        }
        if let Some(scale) = s.strip_prefix("noisy:") {
            let scale: f64 = scale
                .parse()
                .map_err(|_| Error::Config(format!("bad noise scale in '{s}'")))?;
            return Ok(PredictorChoice::Noisy { scale });
        }
        if let Some(path) = s.strip_prefix("dump:") {
            return Ok(PredictorChoice::Dump {
                path: PathBuf::from(path),
            });
        }
        Err(Error::Config(format!(
            "unknown predictor '{s}' (expected oracle, noisy:<scale> or dump:<path>)"
        )))
    }
}

impl fmt::Display for PredictorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorChoice::Oracle => write!(f, "oracle"),
            PredictorChoice::Noisy { scale } => write!(f, "noisy:{scale}"),
            PredictorChoice::Dump { path } => write!(f, "dump:{}", path.display()),
        }
    }
}

/// Discretization parameters; explicit boundaries win over the derived
/// uniform/logarithmic defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub value_bins: usize,
    pub length_bins: usize,
    pub startup_len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_boundaries: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_boundaries: Option<Vec<u64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            value_bins: 5,
            length_bins: 6,
            startup_len: 16,
            value_boundaries: None,
            length_boundaries: None,
        }
    }
}

impl GridConfig {
    /// Materialize the grid for worlds whose longest horizon is
    /// `max_len` tokens.
    pub fn build(&self, max_len: u64) -> Result<Arc<BinGrid>> {
        let lengths = match &self.length_boundaries {
            Some(explicit) => explicit.clone(),
            None => {
                let startup = self.startup_len.min(max_len).max(1);
                log_length_boundaries(max_len, self.length_bins, startup)?
            }
        };
        let grid = match &self.value_boundaries {
            Some(values) => BinGrid::new(values.clone(), lengths)?,
            None => BinGrid::uniform_values(self.value_bins, lengths)?,
        };
        if grid.max_length() < max_len {
            return Err(Error::Config(format!(
                "grid covers lengths up to {}, worlds need {max_len}",
                grid.max_length()
            )));
        }
        Ok(Arc::new(grid))
    }
}

/// Everything a batch run needs, loadable from JSON and echoed into the
/// results header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Bundle name or path to a worlds file.
    pub world: String,
    pub strategies: Vec<StrategySpec>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub predictor: PredictorChoice,
    pub grid: GridConfig,
    pub utility: UtilityConfig,
    /// Episode step budget as a multiple of the world horizon.
    pub meta_horizon_factor: u32,
    /// Rollouts behind each per-world single-sample baseline.
    pub baseline_rollouts: usize,
    /// Retain per-episode logs in the batch output (for audit dumps).
    pub keep_episode_logs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: "mixed".into(),
            strategies: vec![StrategySpec::ZipRc, StrategySpec::Mv { n: 3 }],
            alphas: vec![0.1],
            betas: vec![0.005],
            episodes: 200,
            seed: 0,
            predictor: PredictorChoice::Oracle,
            grid: GridConfig::default(),
            utility: UtilityConfig::default(),
            meta_horizon_factor: 4,
            baseline_rollouts: 1000,
            keep_episode_logs: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies configured".into()));
        }
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(Error::Config(
                "alpha and beta grids must be nonempty".into(),
            ));
        }
        if self.episodes == 0 {
            return Err(Error::Config("need at least one episode".into()));
        }
        if self.baseline_rollouts == 0 {
            return Err(Error::Config("need at least one baseline rollout".into()));
        }
        for strategy in &self.strategies {
            strategy.validate()?;
        }
        for alpha in &self.alphas {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        for beta in &self.betas {
            if *beta < 0.0 || !beta.is_finite() {
                return Err(Error::Config(format!(
                    "beta {beta} must be finite and >= 0"
                )));
            }
        }
        self.utility.validate()
    }

    /// Resolve the world field: an existing file path is loaded, anything
    /// else is treated as a bundle name.
    pub fn resolve_worlds(&self) -> Result<Vec<Arc<SyntheticWorld>>> {
        let worlds = if Path::new(&self.world).is_file() {
            load_worlds_file(&self.world)?
        } else {
            bundle(&self.world)?
        };
        if worlds.is_empty() {
            return Err(Error::Config(format!(
                "world source '{}' is empty",
                self.world
            )));
        }
        Ok(worlds.into_iter().map(Arc::new).collect())
    }

    pub fn max_horizon(worlds: &[Arc<SyntheticWorld>]) -> u64 {
        worlds
            .iter()
            .map(|w| crate::worlds::BasePolicy::horizon(w.as_ref()) as u64)
            .max()
            .unwrap_or(1)
    }
}
