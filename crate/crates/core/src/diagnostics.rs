//! Estimator diagnostics against exact prompt values.
//!
//! Four protocols, all driven by batches drawn without replacement from a
//! population:
//!
//! * group sweep: aggregate MSE of each estimator at its group size, every
//!   group size reading the first `G` of the same reward draws;
//! * heterogeneity: per-batch MSE binned by the batch's spread of values,
//!   with bins laid over the observed range after the fact;
//! * difficulty: per-prompt MSE and 0/1 collapse frequency binned by prompt
//!   value, baselines always computed on the unconditioned batch;
//! * beta curve: MSE of the initial tilted values and of the refined
//!   batchwise baselines at every grid point.
//!
//! Repeats use independent seeded streams and are merged in index order, so
//! serial and parallel runs agree bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{count_successes, sample_rollout, true_value, PromptPopulation};
use crate::estimators::{
    compute_advantages, refine_baselines, table_values, EstimatorError, EstimatorSpec, RewardBatch, Variant,
};
use crate::offline_values::ValueTable;
use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid diagnostics configuration: {0}")]
    Config(String),
    #[error("value table does not cover the population")]
    TableMismatch,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the reference value each estimate is scored against comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OracleMode {
    /// Closed-form softmax value.
    Exact,
    /// Mean of separate rollouts, disjoint from the estimator's rewards.
    MonteCarlo { rollouts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub batch_size: usize,
    /// Repeats for the group-sweep, difficulty and beta-curve protocols.
    pub repeats: usize,
    /// Batches drawn by the heterogeneity protocol.
    pub heterogeneity_batches: usize,
    pub group_sizes: Vec<usize>,
    pub heterogeneity_bins: usize,
    pub difficulty_bin_edges: Vec<f64>,
    pub seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    /// Current policy = reference policy tilted at this strength.
    pub drift_beta: Option<f64>,
    pub oracle: OracleMode,
    pub parallel: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        let group_sizes = vec![1, 2, 4, 8];
        Self {
            batch_size: 64,
            repeats: 10,
            heterogeneity_batches: 500,
            estimators: default_estimators(&group_sizes),
            group_sizes,
            heterogeneity_bins: 5,
            difficulty_bin_edges: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            seed: rng::DEFAULT_SEED,
            drift_beta: None,
            oracle: OracleMode::Exact,
            parallel: true,
        }
    }
}

/// Zero, REINFORCE++ and the three batchwise variants at G = 1, GRPO at
/// every group size and RLOO at every group size of at least 2.
pub fn default_estimators(group_sizes: &[usize]) -> Vec<EstimatorSpec> {
    let mut out = vec![EstimatorSpec::zero(), EstimatorSpec::reinforcepp(1)];
    out.extend([Variant::Unb, Variant::Vop, Variant::Rvg].map(EstimatorSpec::basis));
    out.extend(group_sizes.iter().map(|&g| EstimatorSpec::grpo(g)));
    out.extend(group_sizes.iter().filter(|&&g| g >= 2).map(|&g| EstimatorSpec::rloo(g)));
    out
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        let bad = |m: &str| Err(DiagnosticsError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.repeats == 0 || self.heterogeneity_batches == 0 {
            return bad("repeats and batches must be positive");
        }
        if self.heterogeneity_bins == 0 {
            return bad("need at least one heterogeneity bin");
        }
        let e = &self.difficulty_bin_edges;
        if e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1]) {
            return bad("difficulty bin edges must be strictly increasing");
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected");
        }
        if let Some(b) = self.drift_beta {
            if !(b > 0.0) {
                return bad("drift beta must be positive");
            }
        }
        if let OracleMode::MonteCarlo { rollouts: 0 } = self.oracle {
            return bad("Monte-Carlo oracle needs at least one rollout");
        }
        for spec in &self.estimators {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn max_group_size(&self) -> usize {
        self.estimators.iter().map(|s| s.group_size).max().unwrap_or(1)
    }
}

/// One batch of prompts with its oracle values and reward draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraw {
    pub prompt_ids: Vec<usize>,
    pub oracle: Vec<f64>,
    /// `B x max_g` rewards; estimators read the first `G` columns.
    pub rewards: Vec<Vec<f64>>,
}

/// The policy being diagnosed: the population, tilted if drift is set.
pub fn current_policy(pop: &PromptPopulation, config: &DiagnosticsConfig) -> PromptPopulation {
    match config.drift_beta {
        Some(beta) => pop.tilted(beta),
        None => pop.clone(),
    }
}

/// Draws repeat `repeat` of protocol `protocol_tag`.
pub fn draw_batch(
    current: &PromptPopulation,
    config: &DiagnosticsConfig,
    protocol_tag: u64,
    repeat: usize,
    max_g: usize,
) -> BatchDraw {
    let mut rng = rng::stream(config.seed, &[protocol_tag, repeat as u64]);
    let idx = current.sample_batch(config.batch_size, &mut rng);
    let rewards = idx
        .iter()
        .map(|&i| (0..max_g).map(|_| sample_rollout(&current.prompts[i], &mut rng).reward_f64()).collect())
        .collect();
    let oracle = match config.oracle {
        OracleMode::Exact => idx.iter().map(|&i| true_value(&current.prompts[i])).collect(),
        OracleMode::MonteCarlo { rollouts } => {
            let mut orng = rng::stream(config.seed, &[tag::ORACLE, protocol_tag, repeat as u64]);
            idx.iter()
                .map(|&i| count_successes(&current.prompts[i], rollouts, &mut orng) as f64 / rollouts as f64)
                .collect()
        }
    };
    BatchDraw {
        prompt_ids: idx.iter().map(|&i| current.prompts[i].prompt_id).collect(),
        oracle,
        rewards,
    }
}

/// Per-prompt squared error and collapse fraction for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptErrors {
    pub sq_err: Vec<f64>,
    /// Fraction of the prompt's `G` baselines equal to exactly 0 or 1.
    pub collapse: Vec<f64>,
}

/// Scores one estimator on one draw. Multi-rollout estimators average the
/// squared error over their `G` per-rollout baselines.
pub fn evaluate_estimator(
    spec: &EstimatorSpec,
    draw: &BatchDraw,
    table: Option<&ValueTable>,
) -> Result<PromptErrors, EstimatorError> {
    let g = spec.group_size;
    let rewards = draw.rewards.iter().map(|row| row[..g].to_vec()).collect();
    let batch = RewardBatch::new(draw.prompt_ids.clone(), rewards)?;
    let adv = compute_advantages(spec, &batch, table)?;
    let mut sq_err = Vec::with_capacity(draw.oracle.len());
    let mut collapse = Vec::with_capacity(draw.oracle.len());
    for (row, &v) in adv.baselines.iter().zip(&draw.oracle) {
        sq_err.push(row.iter().map(|b| (b - v).powi(2)).sum::<f64>() / g as f64);
        collapse.push(row.iter().filter(|&&b| b == 0.0 || b == 1.0).count() as f64 / g as f64);
    }
    Ok(PromptErrors { sq_err, collapse })
}

/// One CSV/JSON row: an estimator's aggregate over one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub variant: String,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    /// `None` for empty bins.
    pub mse: Option<f64>,
    pub collapse_freq: Option<f64>,
    /// Prompts (group sweep, difficulty) or batches (heterogeneity) in the bin.
    pub n: usize,
    /// The per-repeat or per-batch values averaged into `mse`.
    pub unit_mse: Vec<f64>,
    pub unit_collapse: Vec<f64>,
}

impl ReportRow {
    fn new(spec: &EstimatorSpec, lo: f64, hi: f64, n: usize, unit_mse: Vec<f64>, unit_collapse: Vec<f64>) -> Self {
        let avg = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        Self {
            estimator: spec.family.to_string(),
            variant: spec.variant_str().to_string(),
            group_size: spec.group_size,
            bin_lo: lo,
            bin_hi: hi,
            mse: avg(&unit_mse),
            collapse_freq: avg(&unit_collapse),
            n,
            unit_mse,
            unit_collapse,
        }
    }

    pub fn matches(&self, spec: &EstimatorSpec) -> bool {
        self.estimator == spec.family.as_str() && self.variant == spec.variant_str() && self.group_size == spec.group_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub protocol: String,
    pub seed: u64,
    pub config: DiagnosticsConfig,
    pub bin_edges: Vec<f64>,
    pub rows: Vec<ReportRow>,
    /// Heterogeneity scores of every batch (heterogeneity protocol only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub scores: Vec<f64>,
}

pub const CSV_HEADER: [&str; 8] = ["estimator", "variant", "G", "bin_lo", "bin_hi", "mse", "collapse_freq", "n"];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl DiagnosticsReport {
    /// Rows of `spec`, in bin order.
    pub fn rows_for(&self, spec: &EstimatorSpec) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.matches(spec)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.variant.clone(),
                r.group_size.to_string(),
                r.bin_lo.to_string(),
                r.bin_hi.to_string(),
                opt(r.mse),
                opt(r.collapse_freq),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_inputs(pop: &PromptPopulation, table: &ValueTable, config: &DiagnosticsConfig) -> Result<(), DiagnosticsError> {
    config.validate()?;
    if !table.covers(pop) {
        return Err(DiagnosticsError::TableMismatch);
    }
    if pop.len() < config.batch_size {
        return Err(DiagnosticsError::Config(format!(
            "population of {} prompts is smaller than the batch size {}",
            pop.len(),
            config.batch_size
        )));
    }
    Ok(())
}

fn run_repeats<T: Send>(
    count: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<T, DiagnosticsError> + Sync + Send,
) -> Result<Vec<T>, DiagnosticsError> {
    if parallel {
        (0..count).into_par_iter().map(f).collect()
    } else {
        (0..count).map(f).collect()
    }
}

/// Draws a batch and scores every configured estimator on it.
fn score_draw(
    current: &PromptPopulation,
    table: &ValueTable,
    config: &DiagnosticsConfig,
    protocol_tag: u64,
    repeat: usize,
) -> Result<(BatchDraw, Vec<PromptErrors>), DiagnosticsError> {
    let draw = draw_batch(current, config, protocol_tag, repeat, config.max_group_size());
    let errors = config
        .estimators
        .iter()
        .map(|spec| evaluate_estimator(spec, &draw, Some(table)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((draw, errors))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregate MSE per estimator: mean over prompts, then over repeats.
pub fn mse_sweep(
    pop: &PromptPopulation,
    table: &ValueTable,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    check_inputs(pop, table, config)?;
    let current = current_policy(pop, config);
    let per_repeat = run_repeats(config.repeats, config.parallel, |r| {
        score_draw(&current, table, config, tag::GROUP_SWEEP, r).map(|(_, e)| e)
    })?;
    let rows = config
        .estimators
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let unit_mse = per_repeat.iter().map(|e| mean(&e[k].sq_err)).collect();
            let unit_collapse = per_repeat.iter().map(|e| mean(&e[k].collapse)).collect();
            ReportRow::new(spec, 0.0, 1.0, config.repeats * config.batch_size, unit_mse, unit_collapse)
        })
        .collect();
    Ok(DiagnosticsReport {
        protocol: "group-sweep".into(),
        seed: config.seed,
        config: config.clone(),
        bin_edges: vec![0.0, 1.0],
        rows,
        scores: Vec::new(),
    })
}

/// Index of the bin containing `x` for increasing `edges`; the last bin is
/// closed on the right. Values outside the edges are clamped.
pub fn bin_index(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    (0..bins).find(|&b| x < edges[b + 1]).unwrap_or(bins - 1)
}

/// Uniform bin edges over `[lo, hi]`; a single bin when the range is empty
/// up to rounding.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    if hi - lo <= 1e-12 {
        return vec![lo, hi];
    }
    (0..=bins)
        .map(|b| if b == bins { hi } else { lo + (hi - lo) * b as f64 / bins as f64 })
        .collect()
}

/// Per-batch MSE binned by the population std of the batch's oracle values.
pub fn heterogeneity_sweep(
    pop: &PromptPopulation,
    table: &ValueTable,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    check_inputs(pop, table, config)?;
    let current = current_policy(pop, config);
    let per_batch = run_repeats(config.heterogeneity_batches, config.parallel, |r| {
        score_draw(&current, table, config, tag::HETEROGENEITY, r)
    })?;
    let scores: Vec<f64> = per_batch.iter().map(|(d, _)| crate::stats::std_dev(&d.oracle)).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = uniform_edges(lo, hi, config.heterogeneity_bins);
    let bins = edges.len() - 1;
    let assignment: Vec<usize> = scores.iter().map(|&s| bin_index(&edges, s)).collect();

    let mut rows = Vec::new();
    for (k, spec) in config.estimators.iter().enumerate() {
        for b in 0..bins {
            let members: Vec<usize> = (0..per_batch.len()).filter(|&i| assignment[i] == b).collect();
            let unit_mse = members.iter().map(|&i| mean(&per_batch[i].1[k].sq_err)).collect();
            let unit_collapse = members.iter().map(|&i| mean(&per_batch[i].1[k].collapse)).collect();
            rows.push(ReportRow::new(spec, edges[b], edges[b + 1], members.len(), unit_mse, unit_collapse));
        }
    }
    Ok(DiagnosticsReport {
        protocol: "heterogeneity".into(),
        seed: config.seed,
        config: config.clone(),
        bin_edges: edges,
        rows,
        scores,
    })
}

/// Per-prompt MSE and collapse frequency stratified by oracle value after
/// the baselines have been computed on the whole batch.
pub fn difficulty_sweep(
    pop: &PromptPopulation,
    table: &ValueTable,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    check_inputs(pop, table, config)?;
    let current = current_policy(pop, config);
    let per_repeat = run_repeats(config.repeats, config.parallel, |r| {
        score_draw(&current, table, config, tag::DIFFICULTY, r)
    })?;
    let edges = &config.difficulty_bin_edges;
    let bins = edges.len() - 1;

    let mut rows = Vec::new();
    for (k, spec) in config.estimators.iter().enumerate() {
        for b in 0..bins {
            let mut unit_mse = Vec::new();
            let mut unit_collapse = Vec::new();
            let mut n = 0;
            for (draw, errors) in &per_repeat {
                let members: Vec<usize> =
                    (0..draw.oracle.len()).filter(|&i| bin_index(edges, draw.oracle[i]) == b).collect();
                if members.is_empty() {
                    continue;
                }
                n += members.len();
                let m = members.len() as f64;
                unit_mse.push(members.iter().map(|&i| errors[k].sq_err[i]).sum::<f64>() / m);
                unit_collapse.push(members.iter().map(|&i| errors[k].collapse[i]).sum::<f64>() / m);
            }
            rows.push(ReportRow::new(spec, edges[b], edges[b + 1], n, unit_mse, unit_collapse));
        }
    }
    Ok(DiagnosticsReport {
        protocol: "difficulty".into(),
        seed: config.seed,
        config: config.clone(),
        bin_edges: edges.clone(),
        rows,
        scores: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCurvePoint {
    pub beta: f64,
    pub initial_mse: f64,
    pub refined_mse: f64,
    /// Mean active-set size at this tilt.
    pub mean_active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCurve {
    pub seed: u64,
    pub variant: Variant,
    pub drift_beta: Option<f64>,
    pub repeats: usize,
    pub points: Vec<BetaCurvePoint>,
}

impl BetaCurve {
    pub fn initial(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.initial_mse).collect()
    }

    pub fn refined(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.refined_mse).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["beta", "initial_mse", "refined_mse", "mean_active"])?;
        for p in &self.points {
            w.write_record([
                p.beta.to_string(),
                p.initial_mse.to_string(),
                p.refined_mse.to_string(),
                p.mean_active.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }
}

/// MSE of the initial tilted values and of the refined baselines at every
/// grid point of `grid`, against the current policy's values. Inactive
/// prompts score their zero fallback.
pub fn compare_initial_vs_refined(
    pop: &PromptPopulation,
    table: &ValueTable,
    grid: &[f64],
    variant: Variant,
    config: &DiagnosticsConfig,
) -> Result<BetaCurve, DiagnosticsError> {
    let mut config = config.clone();
    config.estimators = vec![EstimatorSpec::basis(variant)];
    check_inputs(pop, table, &config)?;
    let current = current_policy(pop, &config);
    let epsilon = config.estimators[0].epsilon;
    let per_repeat = run_repeats(config.repeats, config.parallel, |r| {
        let draw = draw_batch(&current, &config, tag::BETA_CURVE, r, 1);
        let rewards: Vec<f64> = draw.rewards.iter().map(|row| row[0]).collect();
        grid.iter()
            .map(|&beta| {
                let values = table_values(table, &draw.prompt_ids, beta)?;
                let refined = refine_baselines(&values, &rewards, &draw.prompt_ids, variant, epsilon);
                let init = values.iter().zip(&draw.oracle).map(|(v, o)| (v - o).powi(2)).collect::<Vec<_>>();
                let refd = refined.baselines.iter().zip(&draw.oracle).map(|(b, o)| (b - o).powi(2)).collect::<Vec<_>>();
                Ok((mean(&init), mean(&refd), refined.active_count() as f64))
            })
            .collect::<Result<Vec<_>, DiagnosticsError>>()
    })?;
    let reps = per_repeat.len() as f64;
    let points = grid
        .iter()
        .enumerate()
        .map(|(g, &beta)| BetaCurvePoint {
            beta,
            initial_mse: per_repeat.iter().map(|r| r[g].0).sum::<f64>() / reps,
            refined_mse: per_repeat.iter().map(|r| r[g].1).sum::<f64>() / reps,
            mean_active: per_repeat.iter().map(|r| r[g].2).sum::<f64>() / reps,
        })
        .collect();
    Ok(BetaCurve { seed: config.seed, variant, drift_beta: config.drift_beta, repeats: config.repeats, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_population, PromptState, ValueDistribution};
    use crate::offline_values::{build_table, BetaGrid};

    fn setup(dist: &str, count: usize, n: usize) -> (PromptPopulation, ValueTable) {
        let pop = make_population(count, dist.parse().unwrap(), 4, 5).unwrap();
        let table = build_table(&pop, n, BetaGrid::default_grid(), 6).unwrap();
        (pop, table)
    }

    #[test]
    fn bins() {
        let e = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        assert_eq!(bin_index(&e, 0.0), 0);
        assert_eq!(bin_index(&e, 0.2), 1);
        assert_eq!(bin_index(&e, 0.5999), 2);
        assert_eq!(bin_index(&e, 1.0), 4);
        assert_eq!(uniform_edges(0.3, 0.3, 5), vec![0.3, 0.3]);
        assert_eq!(bin_index(&[0.3, 0.3], 0.3), 0);
        let u = uniform_edges(0.2, 0.3, 5);
        assert_eq!(u.len(), 6);
        assert_eq!(u[5], 0.3);
    }

    #[test]
    fn deterministic_prompts_have_zero_grpo_error() {
        let prompts = (0..8)
            .map(|i| {
                let z = if i % 2 == 0 { 1e9 } else { -1e9 };
                PromptState::new(i, vec![z, 0.0], 0).unwrap()
            })
            .collect();
        let pop = PromptPopulation::new(prompts, 0).unwrap();
        let table = build_table(&pop, 4, BetaGrid::default_grid(), 1).unwrap();
        let config = DiagnosticsConfig {
            batch_size: 8,
            repeats: 3,
            estimators: vec![EstimatorSpec::grpo(8)],
            ..Default::default()
        };
        let r = mse_sweep(&pop, &table, &config).unwrap();
        assert_eq!(r.rows[0].mse, Some(0.0));
    }

    #[test]
    fn single_rollout_grpo_error_is_bernoulli_variance() {
        let (pop, table) = setup("uniform:0.5,0.5", 64, 16);
        let config = DiagnosticsConfig {
            batch_size: 64,
            repeats: 200,
            estimators: vec![EstimatorSpec::grpo(1)],
            ..Default::default()
        };
        let r = mse_sweep(&pop, &table, &config).unwrap();
        let row = &r.rows[0];
        // Squared error is exactly 0.25 for every prompt and draw.
        assert!((row.mse.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let (pop, table) = setup("uniform:0.05,0.95", 128, 64);
        let mut config = DiagnosticsConfig { batch_size: 32, repeats: 6, heterogeneity_batches: 20, ..Default::default() };
        for protocol in 0..3 {
            let run = |c: &DiagnosticsConfig| match protocol {
                0 => mse_sweep(&pop, &table, c).unwrap(),
                1 => heterogeneity_sweep(&pop, &table, c).unwrap(),
                _ => difficulty_sweep(&pop, &table, c).unwrap(),
            };
            config.parallel = true;
            let a = run(&config);
            config.parallel = false;
            let mut b = run(&config);
            b.config.parallel = true;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn point_mass_population_has_single_heterogeneity_bin() {
        let (pop, table) = setup("uniform:0.4,0.4", 80, 16);
        let config = DiagnosticsConfig {
            batch_size: 16,
            heterogeneity_batches: 30,
            estimators: vec![EstimatorSpec::reinforcepp(1)],
            ..Default::default()
        };
        let r = heterogeneity_sweep(&pop, &table, &config).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.scores.iter().all(|&s| s < 1e-12));
        assert_eq!(r.rows[0].n, 30);
    }

    #[test]
    fn bin_counts_reconcile() {
        let (pop, table) = setup("beta:1,1", 200, 32);
        let config = DiagnosticsConfig { batch_size: 40, repeats: 7, heterogeneity_batches: 25, ..Default::default() };
        let d = difficulty_sweep(&pop, &table, &config).unwrap();
        for spec in &config.estimators {
            let total: usize = d.rows_for(spec).iter().map(|r| r.n).sum();
            assert_eq!(total, 40 * 7);
        }
        let h = heterogeneity_sweep(&pop, &table, &config).unwrap();
        for spec in &config.estimators {
            let total: usize = h.rows_for(spec).iter().map(|r| r.n).sum();
            assert_eq!(total, 25);
        }
        assert!(d.rows.iter().chain(&h.rows).all(|r| r.mse.is_none_or(|m| m >= 0.0)));
    }

    #[test]
    fn zero_baseline_always_collapses() {
        let (pop, table) = setup("uniform:0.05,0.95", 100, 16);
        let config = DiagnosticsConfig { batch_size: 50, repeats: 5, estimators: vec![EstimatorSpec::zero()], ..Default::default() };
        let d = difficulty_sweep(&pop, &table, &config).unwrap();
        for row in &d.rows {
            if row.n > 0 {
                assert_eq!(row.collapse_freq, Some(1.0));
            }
        }
    }

    #[test]
    fn monte_carlo_oracle_is_close_to_exact() {
        let (pop, table) = setup("uniform:0.2,0.8", 64, 16);
        let exact = DiagnosticsConfig { batch_size: 64, repeats: 20, estimators: vec![EstimatorSpec::grpo(4)], ..Default::default() };
        let mc = DiagnosticsConfig { oracle: OracleMode::MonteCarlo { rollouts: 256 }, ..exact.clone() };
        let a = mse_sweep(&pop, &table, &exact).unwrap().rows[0].mse.unwrap();
        let b = mse_sweep(&pop, &table, &mc).unwrap().rows[0].mse.unwrap();
        // The MC oracle adds its own variance, about V(1-V)/256.
        assert!((a - b).abs() < 0.01, "{a} vs {b}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (pop, table) = setup("uniform:0.05,0.95", 64, 16);
        let config = DiagnosticsConfig { repeats: 2, ..Default::default() };
        let r = mse_sweep(&pop, &table, &config).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("estimator,variant,G,bin_lo,bin_hi,mse,collapse_freq,n"));
        assert_eq!(lines.count(), config.estimators.len());
    }

    #[test]
    fn rejects_bad_configs() {
        let (pop, table) = setup("uniform:0.05,0.95", 64, 16);
        let bad = [
            DiagnosticsConfig { repeats: 0, ..Default::default() },
            DiagnosticsConfig { batch_size: 128, ..Default::default() },
            DiagnosticsConfig { difficulty_bin_edges: vec![0.0, 0.5, 0.5, 1.0], ..Default::default() },
            DiagnosticsConfig { estimators: vec![EstimatorSpec::rloo(1)], ..Default::default() },
        ];
        for c in &bad {
            assert!(mse_sweep(&pop, &table, c).is_err());
        }
        let other = make_population(100, ValueDistribution::Uniform { lo: 0.1, hi: 0.9 }, 3, 0).unwrap();
        assert!(matches!(mse_sweep(&other, &table, &DiagnosticsConfig::default()), Err(DiagnosticsError::TableMismatch)));
    }
}
