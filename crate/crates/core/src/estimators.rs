//! Baseline and advantage estimators.
//!
//! Group baselines (GRPO, RLOO), the batch-mean baseline (REINFORCE++), the
//! zero baseline, and the batchwise cross-prompt baselines (UNB, VOP, RVG)
//! that borrow single rollouts from other prompts in the batch, weighted by
//! offline value estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::offline_values::{soft_value, TableError, ValueTable};

/// Default active-set threshold.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("reward batch must be a nonempty rectangular matrix of finite rewards")]
    MalformedBatch,
    #[error("prompt_ids has {ids} entries but rewards has {rows} rows")]
    LengthMismatch { ids: usize, rows: usize },
    #[error("{family} requires group size {required}, got {got}")]
    GroupSize { family: Family, required: &'static str, got: usize },
    #[error("batchwise baselines need binary rewards")]
    NonBinaryRewards,
    #[error("need at least 2 active prompts, got {0}")]
    TooFewActive(usize),
    #[error("value {0} lies outside the open interval (0, 1)")]
    ValueOutOfRange(f64),
    #[error("target index {target} out of range for {len} values")]
    BadTarget { target: usize, len: usize },
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("variant is only meaningful for the basis family")]
    UnexpectedVariant,
    #[error("basis family requires a value table")]
    MissingTable,
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Zero,
    Grpo,
    Rloo,
    #[serde(rename = "reinforcepp")]
    ReinforcePp,
    Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unb,
    Vop,
    Rvg,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Grpo => "grpo",
            Self::Rloo => "rloo",
            Self::ReinforcePp => "reinforcepp",
            Self::Basis => "basis",
        }
    }
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Unb => "unb",
            Self::Vop => "vop",
            Self::Rvg => "rvg",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "vanilla" => Ok(Self::Zero),
            "grpo" => Ok(Self::Grpo),
            "rloo" => Ok(Self::Rloo),
            "reinforcepp" | "reinforce++" => Ok(Self::ReinforcePp),
            "basis" => Ok(Self::Basis),
            _ => Err(format!("unknown estimator family '{s}'")),
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unb" => Ok(Self::Unb),
            "vop" => Ok(Self::Vop),
            "rvg" => Ok(Self::Rvg),
            _ => Err(format!("unknown basis variant '{s}'")),
        }
    }
}

/// Which baseline to use, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub family: Family,
    pub variant: Option<Variant>,
    pub group_size: usize,
    pub epsilon: f64,
}

impl EstimatorSpec {
    pub fn new(family: Family, variant: Option<Variant>, group_size: usize, epsilon: f64) -> Result<Self, EstimatorError> {
        let variant = match (family, variant) {
            (Family::Basis, None) => Some(Variant::Unb),
            (Family::Basis, v) => v,
            (_, Some(_)) => return Err(EstimatorError::UnexpectedVariant),
            (_, None) => None,
        };
        let spec = Self { family, variant, group_size, epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zero() -> Self {
        Self { family: Family::Zero, variant: None, group_size: 1, epsilon: DEFAULT_EPSILON }
    }

    pub fn grpo(group_size: usize) -> Self {
        Self { family: Family::Grpo, variant: None, group_size, epsilon: DEFAULT_EPSILON }
    }

    pub fn rloo(group_size: usize) -> Self {
        Self { family: Family::Rloo, variant: None, group_size, epsilon: DEFAULT_EPSILON }
    }

    pub fn reinforcepp(group_size: usize) -> Self {
        Self { family: Family::ReinforcePp, variant: None, group_size, epsilon: DEFAULT_EPSILON }
    }

    pub fn basis(variant: Variant) -> Self {
        Self { family: Family::Basis, variant: Some(variant), group_size: 1, epsilon: DEFAULT_EPSILON }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let g = self.group_size;
        match self.family {
            Family::Rloo if g < 2 => {
                return Err(EstimatorError::GroupSize { family: self.family, required: ">= 2", got: g })
            }
            Family::Basis if g != 1 => {
                return Err(EstimatorError::GroupSize { family: self.family, required: "= 1", got: g })
            }
            _ if g < 1 => return Err(EstimatorError::GroupSize { family: self.family, required: ">= 1", got: g }),
            _ => {}
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(EstimatorError::InvalidEpsilon(self.epsilon));
        }
        if self.family != Family::Basis && self.variant.is_some() {
            return Err(EstimatorError::UnexpectedVariant);
        }
        Ok(())
    }

    pub fn variant_str(&self) -> &'static str {
        self.variant.map_or("", |v| v.as_str())
    }

    /// Short label, e.g. `grpo` or `basis-unb`.
    pub fn name(&self) -> String {
        match self.variant {
            Some(v) => format!("{}-{}", self.family, v),
            None => self.family.to_string(),
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} G={}", self.name(), self.group_size)
    }
}

/// Rewards for a batch of `B` prompts with `G` rollouts each, stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    prompt_ids: Vec<usize>,
    rewards: Vec<Vec<f64>>,
}

impl RewardBatch {
    pub fn new(prompt_ids: Vec<usize>, rewards: Vec<Vec<f64>>) -> Result<Self, EstimatorError> {
        if prompt_ids.len() != rewards.len() {
            return Err(EstimatorError::LengthMismatch { ids: prompt_ids.len(), rows: rewards.len() });
        }
        let g = rewards.first().map_or(0, Vec::len);
        let rectangular = rewards.iter().all(|row| row.len() == g);
        let finite = rewards.iter().flatten().all(|r| r.is_finite());
        if rewards.is_empty() || g == 0 || !rectangular || !finite {
            return Err(EstimatorError::MalformedBatch);
        }
        Ok(Self { prompt_ids, rewards })
    }

    /// Single-rollout batch.
    pub fn single(prompt_ids: Vec<usize>, rewards: Vec<f64>) -> Result<Self, EstimatorError> {
        Self::new(prompt_ids, rewards.into_iter().map(|r| vec![r]).collect())
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.prompt_ids
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn batch_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn group_size(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn is_binary(&self) -> bool {
        self.rewards.iter().flatten().all(|&r| r == 0.0 || r == 1.0)
    }

    /// Keeps only the first `g` rollouts of every prompt.
    pub fn truncated(&self, g: usize) -> Result<Self, EstimatorError> {
        if g == 0 || g > self.group_size() {
            return Err(EstimatorError::MalformedBatch);
        }
        Ok(Self {
            prompt_ids: self.prompt_ids.clone(),
            rewards: self.rewards.iter().map(|row| row[..g].to_vec()).collect(),
        })
    }

    pub(crate) fn first_column(&self) -> Vec<f64> {
        self.rewards.iter().map(|row| row[0]).collect()
    }
}

/// Baselines and advantages for a reward batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageBatch {
    pub baselines: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    /// Whether the prompt received its family's baseline; false marks the
    /// zero fallback of the batchwise estimators.
    pub active: Vec<bool>,
    pub selected_beta: Option<f64>,
    /// Sum of borrowing weights per prompt (batchwise estimators only).
    pub weight_row_sums: Option<Vec<f64>>,
}

impl AdvantageBatch {
    fn from_baselines(batch: &RewardBatch, baselines: Vec<Vec<f64>>, active: Vec<bool>) -> Self {
        let advantages = batch
            .rewards
            .iter()
            .zip(&baselines)
            .map(|(r, b)| r.iter().zip(b).map(|(r, b)| r - b).collect())
            .collect();
        Self { baselines, advantages, active, selected_beta: None, weight_row_sums: None }
    }
}

/// Baseline 0 everywhere; advantages equal rewards.
pub fn baseline_zero(batch: &RewardBatch) -> AdvantageBatch {
    let baselines = vec![vec![0.0; batch.group_size()]; batch.batch_size()];
    AdvantageBatch::from_baselines(batch, baselines, vec![true; batch.batch_size()])
}

/// Within-prompt group mean.
pub fn baseline_grpo(batch: &RewardBatch) -> AdvantageBatch {
    let g = batch.group_size();
    let baselines = batch
        .rewards
        .iter()
        .map(|row| vec![row.iter().sum::<f64>() / g as f64; g])
        .collect();
    AdvantageBatch::from_baselines(batch, baselines, vec![true; batch.batch_size()])
}

/// Leave-one-out group mean.
pub fn baseline_rloo(batch: &RewardBatch) -> Result<AdvantageBatch, EstimatorError> {
    let g = batch.group_size();
    if g < 2 {
        return Err(EstimatorError::GroupSize { family: Family::Rloo, required: ">= 2", got: g });
    }
    let baselines = batch
        .rewards
        .iter()
        .map(|row| {
            (0..g)
                .map(|k| {
                    let others: f64 = row.iter().enumerate().filter(|&(l, _)| l != k).map(|(_, r)| r).sum();
                    others / (g - 1) as f64
                })
                .collect()
        })
        .collect();
    Ok(AdvantageBatch::from_baselines(batch, baselines, vec![true; batch.batch_size()]))
}

/// One scalar baseline: the mean of all `B * G` rewards.
pub fn baseline_reinforcepp(batch: &RewardBatch) -> AdvantageBatch {
    let total: f64 = batch.rewards.iter().flatten().sum();
    let mean = total / (batch.batch_size() * batch.group_size()) as f64;
    let baselines = vec![vec![mean; batch.group_size()]; batch.batch_size()];
    AdvantageBatch::from_baselines(batch, baselines, vec![true; batch.batch_size()])
}

/// Flags prompts whose value lies strictly inside `(epsilon, 1 - epsilon)`.
pub fn active_set(values: &[f64], epsilon: f64) -> Vec<bool> {
    values.iter().map(|&v| epsilon < v && v < 1.0 - epsilon).collect()
}

fn check_values(values: &[f64], target: usize) -> Result<(), EstimatorError> {
    if values.len() < 2 {
        return Err(EstimatorError::TooFewActive(values.len()));
    }
    if target >= values.len() {
        return Err(EstimatorError::BadTarget { target, len: values.len() });
    }
    match values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(&v) => Err(EstimatorError::ValueOutOfRange(v)),
        None => Ok(()),
    }
}

// With the Bernoulli plug-in sigma^2 = V (1 - V):
//   V_j / sigma_j^2   = 1 / (1 - V_j)
//   V_j^2 / sigma_j^2 = V_j / (1 - V_j)
fn blue_weights(values: &[f64], target: usize, extra: f64) -> Result<Vec<f64>, EstimatorError> {
    check_values(values, target)?;
    let denom: f64 = extra
        + values
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != target)
            .map(|(_, &v)| v / (1.0 - v))
            .sum::<f64>();
    let vi = values[target];
    Ok(values
        .iter()
        .enumerate()
        .map(|(j, &vj)| if j == target { 0.0 } else { vi / (1.0 - vj) / denom })
        .collect())
}

/// Unbiasedness-constrained minimum-variance weights for estimating
/// `values[target]` from the other prompts' single rewards. The returned
/// vector has the same length as `values`; the target's own entry is 0.
pub fn basis_weights_unb(values: &[f64], target: usize) -> Result<Vec<f64>, EstimatorError> {
    blue_weights(values, target, 0.0)
}

/// Unconstrained MSE-optimal weights: the UNB weights shrunk by `D / (1 + D)`.
pub fn basis_weights_vop(values: &[f64], target: usize) -> Result<Vec<f64>, EstimatorError> {
    blue_weights(values, target, 1.0)
}

/// Ratio-average baseline `V_i / (m - 1) * sum_{j != i} r_j / V_j`.
pub fn basis_baseline_rvg(values: &[f64], rewards: &[f64], target: usize) -> Result<f64, EstimatorError> {
    check_values(values, target)?;
    if rewards.len() != values.len() {
        return Err(EstimatorError::LengthMismatch { ids: values.len(), rows: rewards.len() });
    }
    let ratio_sum: f64 = values
        .iter()
        .zip(rewards)
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, (&v, &r))| r / v)
        .sum();
    Ok(values[target] / (values.len() - 1) as f64 * ratio_sum)
}

/// Refined batchwise baselines for one batch of single rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub baselines: Vec<f64>,
    pub active: Vec<bool>,
    pub weight_row_sums: Vec<f64>,
}

impl Refined {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Sums of `terms` excluding each position in turn, via prefix and suffix
/// sums so no subtraction is involved.
fn leave_one_out_sums(terms: &[f64]) -> Vec<f64> {
    let m = terms.len();
    let mut prefix = vec![0.0; m + 1];
    for k in 0..m {
        prefix[k + 1] = prefix[k] + terms[k];
    }
    let mut suffix = vec![0.0; m + 1];
    for k in (0..m).rev() {
        suffix[k] = suffix[k + 1] + terms[k];
    }
    (0..m).map(|k| prefix[k] + suffix[k + 1]).collect()
}

/// Computes batchwise baselines from initial value estimates `values` and
/// single rewards. Only active prompts act as sources or targets; inactive
/// prompts, and every prompt when fewer than two are active, get baseline 0.
///
/// Active prompts are processed in prompt-id order so results do not depend
/// on the batch order.
pub fn refine_baselines(
    values: &[f64],
    rewards: &[f64],
    prompt_ids: &[usize],
    variant: Variant,
    epsilon: f64,
) -> Refined {
    let b = values.len();
    debug_assert_eq!(rewards.len(), b);
    debug_assert_eq!(prompt_ids.len(), b);
    let mut active = active_set(values, epsilon);
    let mut order: Vec<usize> = (0..b).filter(|&i| active[i]).collect();
    let mut baselines = vec![0.0; b];
    let mut weight_row_sums = vec![0.0; b];
    let m = order.len();
    if m < 2 {
        active.iter_mut().for_each(|a| *a = false);
        return Refined { baselines, active, weight_row_sums };
    }
    order.sort_by_key(|&i| (prompt_ids[i], i));

    match variant {
        Variant::Unb | Variant::Vop => {
            let extra = if variant == Variant::Vop { 1.0 } else { 0.0 };
            let den_terms: Vec<f64> = order.iter().map(|&j| values[j] / (1.0 - values[j])).collect();
            let num_terms: Vec<f64> = order.iter().map(|&j| rewards[j] / (1.0 - values[j])).collect();
            let sum_terms: Vec<f64> = order.iter().map(|&j| 1.0 / (1.0 - values[j])).collect();
            let den = leave_one_out_sums(&den_terms);
            let num = leave_one_out_sums(&num_terms);
            let wsum = leave_one_out_sums(&sum_terms);
            for (k, &i) in order.iter().enumerate() {
                let d = extra + den[k];
                baselines[i] = values[i] * num[k] / d;
                weight_row_sums[i] = values[i] * wsum[k] / d;
            }
        }
        Variant::Rvg => {
            let num_terms: Vec<f64> = order.iter().map(|&j| rewards[j] / values[j]).collect();
            let sum_terms: Vec<f64> = order.iter().map(|&j| 1.0 / values[j]).collect();
            let num = leave_one_out_sums(&num_terms);
            let wsum = leave_one_out_sums(&sum_terms);
            let scale = (m - 1) as f64;
            for (k, &i) in order.iter().enumerate() {
                baselines[i] = values[i] / scale * num[k];
                weight_row_sums[i] = values[i] / scale * wsum[k];
            }
        }
    }
    Refined { baselines, active, weight_row_sums }
}

/// Initial value estimates of the batch prompts at tilt `beta`.
pub fn table_values(table: &ValueTable, prompt_ids: &[usize], beta: f64) -> Result<Vec<f64>, EstimatorError> {
    prompt_ids
        .iter()
        .map(|&id| Ok(soft_value(table.p_hat(id)?, beta)))
        .collect()
}

pub(crate) fn check_basis_batch(batch: &RewardBatch) -> Result<(), EstimatorError> {
    if batch.group_size() != 1 {
        return Err(EstimatorError::GroupSize { family: Family::Basis, required: "= 1", got: batch.group_size() });
    }
    if !batch.is_binary() {
        return Err(EstimatorError::NonBinaryRewards);
    }
    Ok(())
}

/// Batchwise advantages at a fixed tilt `beta`.
pub fn basis_advantages(
    batch: &RewardBatch,
    table: &ValueTable,
    beta: f64,
    variant: Variant,
    epsilon: f64,
) -> Result<AdvantageBatch, EstimatorError> {
    check_basis_batch(batch)?;
    let values = table_values(table, batch.prompt_ids(), beta)?;
    Ok(basis_advantages_from_values(batch, &values, variant, epsilon))
}

/// Batchwise advantages given initial value estimates directly.
pub fn basis_advantages_from_values(
    batch: &RewardBatch,
    values: &[f64],
    variant: Variant,
    epsilon: f64,
) -> AdvantageBatch {
    let refined = refine_baselines(values, &batch.first_column(), batch.prompt_ids(), variant, epsilon);
    let baselines = refined.baselines.iter().map(|&b| vec![b]).collect();
    let mut out = AdvantageBatch::from_baselines(batch, baselines, refined.active);
    out.weight_row_sums = Some(refined.weight_row_sums);
    out
}

/// Dispatches on the estimator family. Batchwise estimators calibrate the
/// tilt on the batch before computing baselines.
pub fn compute_advantages(
    spec: &EstimatorSpec,
    batch: &RewardBatch,
    table: Option<&ValueTable>,
) -> Result<AdvantageBatch, EstimatorError> {
    spec.validate()?;
    if batch.group_size() != spec.group_size {
        return Err(EstimatorError::GroupSize {
            family: spec.family,
            required: "matching the spec",
            got: batch.group_size(),
        });
    }
    match spec.family {
        Family::Zero => Ok(baseline_zero(batch)),
        Family::Grpo => Ok(baseline_grpo(batch)),
        Family::Rloo => baseline_rloo(batch),
        Family::ReinforcePp => Ok(baseline_reinforcepp(batch)),
        Family::Basis => {
            let table = table.ok_or(EstimatorError::MissingTable)?;
            let variant = spec.variant.unwrap_or(Variant::Unb);
            crate::calibration::basis_step(batch, table, variant, spec.epsilon)
        }
    }
}
