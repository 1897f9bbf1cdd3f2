//! Cached reference-policy statistics and closed-form KL-tilted values.
//!
//! The table stores only `(n, p_hat)` per prompt; tilted values are
//! evaluated on demand for any grid point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{count_successes, PromptPopulation};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("beta grid must be nonempty, positive and strictly increasing")]
    InvalidGrid,
    #[error("n_per_prompt must be at least 1")]
    ZeroSamples,
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),
    #[error("beta index {index} out of range for grid of {len}")]
    BadBetaIndex { index: usize, len: usize },
    #[error("invalid entry for prompt {0}: need n >= 1 and p_hat in [0, 1]")]
    InvalidEntry(usize),
    #[error("table json: {0}")]
    Json(String),
}

/// Strictly increasing positive tilt strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BetaGrid {
    values: Vec<f64>,
}

impl BetaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, TableError> {
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        if values.is_empty() || !increasing || values.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(TableError::InvalidGrid);
        }
        Ok(Self { values })
    }

    /// 200 points 0.01..=2.00 at step 0.01, then 30 points 2.1..=5.0 at
    /// step 0.1.
    pub fn default_grid() -> Self {
        let fine = (1..=200).map(|i| i as f64 / 100.0);
        let coarse = (21..=50).map(|i| i as f64 / 10.0);
        Self { values: fine.chain(coarse).collect() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<f64, TableError> {
        self.values
            .get(index)
            .copied()
            .ok_or(TableError::BadBetaIndex { index, len: self.values.len() })
    }

    /// Index of the grid point closest to `beta`.
    pub fn nearest_index(&self, beta: f64) -> usize {
        let mut best = 0;
        for (i, &b) in self.values.iter().enumerate() {
            if (b - beta).abs() < (self.values[best] - beta).abs() {
                best = i;
            }
        }
        best
    }
}

impl Default for BetaGrid {
    fn default() -> Self {
        Self::default_grid()
    }
}

/// Largest `1/beta` for which `exp(1/beta)` is finite in double precision.
pub const MAX_SAFE_EXPONENT: f64 = 709.0;

/// Which algebraic form evaluated a tilted value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiltPath {
    /// `p` was 0 or 1, a fixed point of the tilt.
    FixedPoint,
    /// Direct `p e^{1/b} / (1 - p + p e^{1/b})`.
    Direct,
    /// `1 / (1 + ((1-p)/p) e^{-1/b})`, used when `e^{1/b}` would overflow.
    Reciprocal,
}

/// Tilted value together with the form used to compute it.
pub fn soft_value_traced(p_hat: f64, beta: f64) -> (f64, TiltPath) {
    debug_assert!((0.0..=1.0).contains(&p_hat) && beta > 0.0);
    if p_hat <= 0.0 {
        return (0.0, TiltPath::FixedPoint);
    }
    if p_hat >= 1.0 {
        return (1.0, TiltPath::FixedPoint);
    }
    let inv = 1.0 / beta;
    if inv <= MAX_SAFE_EXPONENT {
        // p e / (1 - p + p e), arranged so every operation is monotone in
        // both p and beta.
        let e = inv.exp();
        let v = 1.0 / (1.0 + (1.0 - p_hat) / (p_hat * e));
        (v.clamp(0.0, 1.0), TiltPath::Direct)
    } else {
        let v = 1.0 / (1.0 + ((1.0 - p_hat) / p_hat) * (-inv).exp());
        (v.clamp(0.0, 1.0), TiltPath::Reciprocal)
    }
}

/// Expected 0/1 reward under the reference policy tilted by `exp(r/beta)`,
/// given the reference success rate `p_hat`.
pub fn soft_value(p_hat: f64, beta: f64) -> f64 {
    soft_value_traced(p_hat, beta).0
}

/// Inverse of [`soft_value`] in `p_hat` for fixed `beta`, for values in (0, 1).
pub fn untilt(value: f64, beta: f64) -> f64 {
    if value <= 0.0 || value >= 1.0 {
        return value.clamp(0.0, 1.0);
    }
    1.0 / (1.0 + (1.0 / value - 1.0) * (1.0 / beta).exp())
}

/// Self-normalized plug-in `sum r e^{r/b} / sum e^{r/b}` over an empirical
/// reference sample, for arbitrary real rewards.
pub fn soft_value_general(rewards: &[f64], beta: f64) -> f64 {
    assert!(!rewards.is_empty(), "soft_value_general needs at least one reward");
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (num, den) = rewards.iter().fold((0.0, 0.0), |(num, den), &r| {
        let w = ((r - max) / beta).exp();
        (num + r * w, den + w)
    });
    num / den
}

/// Cached reference statistics for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub prompt_id: usize,
    pub n: usize,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub reference_seed: u64,
    /// Reference rollouts per prompt used at build time.
    pub n: usize,
    pub grid: BetaGrid,
    pub entries: Vec<TableEntry>,
}

impl ValueTable {
    /// Assembles a table from precomputed entries; entries must be indexed
    /// by prompt id.
    pub fn from_entries(entries: Vec<TableEntry>, grid: BetaGrid, reference_seed: u64) -> Result<Self, TableError> {
        for (i, e) in entries.iter().enumerate() {
            if e.prompt_id != i || e.n == 0 || !(0.0..=1.0).contains(&e.p_hat) {
                return Err(TableError::InvalidEntry(e.prompt_id));
            }
        }
        let n = entries.first().map_or(0, |e| e.n);
        Ok(Self { reference_seed, n, grid, entries })
    }

    pub fn entry(&self, prompt_id: usize) -> Result<&TableEntry, TableError> {
        self.entries
            .get(prompt_id)
            .filter(|e| e.prompt_id == prompt_id)
            .ok_or(TableError::UnknownPrompt(prompt_id))
    }

    pub fn p_hat(&self, prompt_id: usize) -> Result<f64, TableError> {
        Ok(self.entry(prompt_id)?.p_hat)
    }

    pub fn covers(&self, pop: &PromptPopulation) -> bool {
        pop.prompts.iter().all(|p| self.entry(p.prompt_id).is_ok())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TableError> {
        let raw: ValueTable = serde_json::from_str(s).map_err(|e| TableError::Json(e.to_string()))?;
        let grid = BetaGrid::new(raw.grid.values)?;
        let mut table = Self::from_entries(raw.entries, grid, raw.reference_seed)?;
        table.n = raw.n;
        Ok(table)
    }
}

/// Samples `n_per_prompt` rollouts per prompt from the reference policy and
/// records the empirical success rate.
pub fn build_table(
    pop: &PromptPopulation,
    n_per_prompt: usize,
    grid: BetaGrid,
    seed: u64,
) -> Result<ValueTable, TableError> {
    if n_per_prompt == 0 {
        return Err(TableError::ZeroSamples);
    }
    let entries = pop
        .prompts
        .par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, &[rng::tag::TABLE, p.prompt_id as u64]);
            let hits = count_successes(p, n_per_prompt, &mut rng);
            TableEntry {
                prompt_id: p.prompt_id,
                n: n_per_prompt,
                p_hat: hits as f64 / n_per_prompt as f64,
            }
        })
        .collect();
    Ok(ValueTable { reference_seed: seed, n: n_per_prompt, grid, entries })
}

/// Tilted value of `prompt_id` at grid point `beta_index`.
pub fn eval_table(table: &ValueTable, prompt_id: usize, beta_index: usize) -> Result<f64, TableError> {
    let beta = table.grid.get(beta_index)?;
    Ok(soft_value(table.p_hat(prompt_id)?, beta))
}
