//! Predictor calibration: start-of-generation total variation against
//! Monte Carlo ground truth, end-of-generation reward classification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::joint::total_variation;
use crate::meta::MetaState;
use crate::worlds::{
    derive_seed, mc_estimate_joint, rollout, BasePolicy, Predictor, SyntheticWorld,
};

const TAG_MC: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Per-world calibration numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub world: String,
    /// Total variation between the predictor's root joint and a Monte
    /// Carlo estimate of the true one.
    pub tv_start: f64,
    /// Binary reward classification of finished rollouts at the given
    /// threshold (ties predict correct).
    pub f1: f64,
    pub accuracy: f64,
    /// Among truly incorrect rollouts, the fraction predicted incorrect.
    pub incorrect_recall: f64,
    pub evaluated: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub mean_tv_start: f64,
    pub threshold: f64,
    pub mc_samples: usize,
}

/// Evaluate one predictor per world. The start-of-generation comparison
/// uses `mc_samples` rollouts; the end-of-generation classification uses
/// `eval_rollouts` finished trajectories per world.
pub fn calibration_report(
    predictors: &[Arc<dyn Predictor>],
    worlds: &[Arc<SyntheticWorld>],
    mc_samples: usize,
    eval_rollouts: usize,
    threshold: f64,
    seed: u64,
) -> Result<CalibrationReport> {
    let mut rows = Vec::with_capacity(worlds.len());
    for (w, (world, predictor)) in worlds.iter().zip(predictors).enumerate() {
        let grid = predictor.grid();
        let root_state = MetaState::new(w as u64);
        let predicted = predictor.joint_for(&root_state, root_state.root())?;
        let truth = mc_estimate_joint(
            world.as_ref(),
            &[],
            mc_samples,
            grid,
            derive_seed(seed, &[TAG_MC, w as u64]),
        )?;
        let tv_start = total_variation(&predicted, &truth)?;

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut tn = 0usize;
        let mut fn_ = 0usize;
        for r in 0..eval_rollouts {
            let record = rollout(
                world.as_ref(),
                &[],
                world.horizon(),
                derive_seed(seed, &[TAG_EVAL, w as u64, r as u64]),
            )?;
            let (state, tip) =
                MetaState::from_token_chain(w as u64, &record.tokens, world.as_ref())?;
            let predicted_value = predictor.joint_for(&state, tip)?.expected_value();
            let predicted_correct = predicted_value >= threshold;
            let actually_correct = record.value >= 0.5;
            match (predicted_correct, actually_correct) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let precision = safe_div(tp as f64, (tp + fp) as f64);
        let recall = safe_div(tp as f64, (tp + fn_) as f64);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let accuracy = safe_div((tp + tn) as f64, eval_rollouts as f64);
        let incorrect_recall = safe_div(tn as f64, (tn + fp) as f64);
        rows.push(CalibrationRow {
            world: world.name().to_string(),
            tv_start,
            f1,
            accuracy,
            incorrect_recall,
            evaluated: eval_rollouts,
        });
    }
    let mean_tv_start = rows.iter().map(|r| r.tv_start).sum::<f64>() / rows.len().max(1) as f64;
    Ok(CalibrationReport {
        rows,
        mean_tv_start,
        threshold,
        mc_samples,
    })
}

/// `0/0` counts as perfect (the class is absent).
fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}
