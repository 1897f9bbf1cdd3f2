//! Per-step selection of the tilt strength and the full batchwise step.
//!
//! For every grid point the batch's initial values are re-evaluated and the
//! active set and refined baselines recomputed. Every grid point is then
//! scored on the same prompts, the union of the active sets over the grid,
//! by the mean squared residual `(r_i - b_i)^2` with `b_i` the baseline the
//! step would actually use (0 for prompts inactive at that tilt). Grid points
//! with fewer than two active prompts are excluded; ties go to the smallest
//! tilt.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{
    basis_advantages, baseline_zero, check_basis_batch, refine_baselines, AdvantageBatch, EstimatorError, Refined,
    RewardBatch, Variant,
};
use crate::offline_values::{soft_value, ValueTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `None` when no grid point had two or more active prompts.
    pub beta: Option<f64>,
    pub beta_index: Option<usize>,
    /// Mean squared residual per grid point; `None` where excluded.
    pub objective_curve: Vec<Option<f64>>,
    pub active_counts: Vec<usize>,
    /// Number of prompts active at some grid point; the residuals are
    /// averaged over these.
    pub scored_prompts: usize,
}

impl CalibrationResult {
    pub fn is_calibrated(&self) -> bool {
        self.beta_index.is_some()
    }

    pub fn min_objective(&self) -> Option<f64> {
        self.beta_index.and_then(|i| self.objective_curve[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("calibration result serializes")
    }
}

/// Refined baselines at one tilt.
pub fn refine_at(p_hats: &[f64], rewards: &[f64], prompt_ids: &[usize], beta: f64, variant: Variant, epsilon: f64) -> Refined {
    let values: Vec<f64> = p_hats.iter().map(|&p| soft_value(p, beta)).collect();
    refine_baselines(&values, rewards, prompt_ids, variant, epsilon)
}

/// Mean squared residual of `refined` over the prompts flagged in `scored`,
/// summed in `order`; `None` if fewer than two prompts are active.
pub fn residual_objective(refined: &Refined, rewards: &[f64], scored: &[bool], order: &[usize]) -> Option<f64> {
    if refined.active_count() < 2 {
        return None;
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for &i in order.iter().filter(|&&i| scored[i]) {
        sse += (rewards[i] - refined.baselines[i]).powi(2);
        count += 1;
    }
    Some(sse / count as f64)
}

/// Grid search for the tilt whose refined baselines best fit this batch's
/// rewards.
pub fn select_beta(
    batch: &RewardBatch,
    table: &ValueTable,
    variant: Variant,
    epsilon: f64,
) -> Result<CalibrationResult, EstimatorError> {
    check_basis_batch(batch)?;
    let ids = batch.prompt_ids();
    let p_hats = ids.iter().map(|&id| table.p_hat(id)).collect::<Result<Vec<_>, _>>()?;
    let rewards = batch.first_column();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (ids[i], i));

    let grid = table.grid.values();
    let refined: Vec<Refined> = grid
        .par_iter()
        .map(|&beta| refine_at(&p_hats, &rewards, ids, beta, variant, epsilon))
        .collect();
    let mut scored = vec![false; ids.len()];
    for r in &refined {
        scored.iter_mut().zip(&r.active).for_each(|(s, &a)| *s |= a);
    }
    let objective_curve: Vec<Option<f64>> =
        refined.par_iter().map(|r| residual_objective(r, &rewards, &scored, &order)).collect();
    let active_counts = refined.iter().map(Refined::active_count).collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, obj) in objective_curve.iter().enumerate() {
        if let Some(o) = *obj {
            if best.is_none_or(|(_, b)| o < b) {
                best = Some((i, o));
            }
        }
    }
    Ok(CalibrationResult {
        beta: best.map(|(i, _)| grid[i]),
        beta_index: best.map(|(i, _)| i),
        objective_curve,
        active_counts,
        scored_prompts: scored.iter().filter(|&&s| s).count(),
    })
}

/// One full batchwise step: calibrate, then compute advantages at the
/// selected tilt. Falls back to zero baselines when calibration fails.
pub fn basis_step_detailed(
    batch: &RewardBatch,
    table: &ValueTable,
    variant: Variant,
    epsilon: f64,
) -> Result<(AdvantageBatch, CalibrationResult), EstimatorError> {
    let calibration = select_beta(batch, table, variant, epsilon)?;
    let advantages = match calibration.beta {
        Some(beta) => {
            let mut adv = basis_advantages(batch, table, beta, variant, epsilon)?;
            adv.selected_beta = Some(beta);
            adv
        }
        None => {
            let mut adv = baseline_zero(batch);
            adv.active = vec![false; batch.batch_size()];
            adv
        }
    };
    Ok((advantages, calibration))
}

pub fn basis_step(
    batch: &RewardBatch,
    table: &ValueTable,
    variant: Variant,
    epsilon: f64,
) -> Result<AdvantageBatch, EstimatorError> {
    basis_step_detailed(batch, table, variant, epsilon).map(|(a, _)| a)
}
