//! Toy REINFORCE loop over the synthetic population.
//!
//! Each step samples a batch of prompts without replacement, draws `G`
//! rollouts per prompt from the current policy, computes advantages with
//! the configured estimator, and moves each sampled prompt's logits along
//! `advantage * (onehot(action) - softmax(logits))`. The value table is
//! built once from the initial policy and never refreshed.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{sample_rollout, softmax, true_value, PromptPopulation};
use crate::estimators::{compute_advantages, EstimatorError, EstimatorSpec, Family, RewardBatch};
use crate::offline_values::ValueTable;
use crate::rng::{self, tag};
use crate::stats::Welford;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("value table does not cover the population")]
    TableMismatch,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub estimator: EstimatorSpec,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 64,
            learning_rate: 0.1,
            estimator: EstimatorSpec::zero(),
            eval_every: 1,
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be a nonnegative finite number".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        self.estimator.validate()?;
        Ok(())
    }
}

/// One sampled rollout and its advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyUpdate {
    pub prompt_id: usize,
    pub action: usize,
    pub advantage: f64,
}

/// Gradient of `log softmax(logits)[action]` with respect to the logits.
pub fn policy_score(logits: &[f64], action: usize) -> Vec<f64> {
    let mut score: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    score[action] += 1.0;
    score
}

/// Applies `logits += lr * advantage * score` for every update, with all
/// scores taken at the logits before this call.
pub fn apply_policy_gradient(pop: &mut PromptPopulation, updates: &[PolicyUpdate], learning_rate: f64) {
    let mut deltas: Vec<Option<Vec<f64>>> = vec![None; pop.len()];
    for u in updates {
        if u.advantage == 0.0 {
            continue;
        }
        let logits = &pop.prompts[u.prompt_id].logits;
        let score = policy_score(logits, u.action);
        let delta = deltas[u.prompt_id].get_or_insert_with(|| vec![0.0; logits.len()]);
        for (d, s) in delta.iter_mut().zip(score) {
            *d += learning_rate * u.advantage * s;
        }
    }
    for (prompt, delta) in pop.prompts.iter_mut().zip(deltas) {
        if let Some(delta) = delta {
            prompt.logits.iter_mut().zip(delta).for_each(|(z, d)| *z += d);
        }
    }
}

/// Pure form of [`apply_policy_gradient`].
pub fn policy_gradient_step(pop: &PromptPopulation, updates: &[PolicyUpdate], learning_rate: f64) -> PromptPopulation {
    let mut next = pop.clone();
    apply_policy_gradient(&mut next, updates, learning_rate);
    next
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Exact population mean value, recorded on evaluation steps.
    pub mean_true_value: Option<f64>,
    /// Calibrated tilt (batchwise estimators only).
    pub selected_beta: Option<f64>,
    /// Sample variance across the batch's rollouts of the correct-answer
    /// component of `advantage * score`.
    pub grad_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub final_population: PromptPopulation,
}

impl TrainTrace {
    /// `(step, value)` for every evaluated record.
    pub fn values(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.mean_true_value.map(|v| (r.step, v))).collect()
    }

    pub fn initial_value(&self) -> f64 {
        self.values()[0].1
    }

    pub fn final_value(&self) -> f64 {
        self.values().last().expect("trace has evaluations").1
    }

    pub fn max_value(&self) -> f64 {
        self.values().iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max)
    }

    /// True if the final value retains at least `fraction` of the best value
    /// seen during training.
    pub fn retains(&self, fraction: f64) -> bool {
        self.final_value() >= fraction * self.max_value()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "mean_true_value", "selected_beta", "grad_var"])?;
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        for r in &self.records {
            w.write_record([r.step.to_string(), opt(r.mean_true_value), opt(r.selected_beta), opt(r.grad_var)])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sample variance of a slice; `None` below two values.
fn sample_variance(xs: &[f64]) -> Option<f64> {
    let mut w = Welford::default();
    xs.iter().for_each(|&x| w.push(x));
    (xs.len() >= 2).then(|| w.variance())
}

/// Draws `g` rollouts for each prompt index in `idx`; one stream per prompt
/// so the per-prompt sampling can run in parallel.
fn rollouts(pop: &PromptPopulation, idx: &[usize], g: usize, seed: u64, path: &[u64]) -> Vec<Vec<(usize, f64)>> {
    idx.par_iter()
        .map(|&i| {
            let p = &pop.prompts[i];
            let mut full = path.to_vec();
            full.push(p.prompt_id as u64);
            let mut rng = rng::stream(seed, &full);
            (0..g)
                .map(|_| {
                    let s = sample_rollout(p, &mut rng);
                    (s.action, s.reward_f64())
                })
                .collect()
        })
        .collect()
}

/// Runs the training loop from `pop`; `table` must have been built from
/// `pop` before training.
pub fn train(pop: &PromptPopulation, table: Option<&ValueTable>, config: &TrainConfig) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    if config.estimator.family == Family::Basis {
        match table {
            None => return Err(EstimatorError::MissingTable.into()),
            Some(t) if !t.covers(pop) => return Err(TrainError::TableMismatch),
            _ => {}
        }
    }
    let g = config.estimator.group_size;
    let b = config.batch_size.min(pop.len());
    let mut state = pop.clone();
    let mut records = vec![TraceRecord { step: 0, mean_true_value: Some(state.mean_true_value()), selected_beta: None, grad_var: None }];

    for step in 1..=config.steps {
        let mut rng = rng::stream(config.seed, &[tag::TRAIN, step as u64]);
        let idx = state.sample_batch(b, &mut rng);
        let draws = rollouts(&state, &idx, g, config.seed, &[tag::TRAIN, step as u64]);
        let ids: Vec<usize> = idx.iter().map(|&i| state.prompts[i].prompt_id).collect();
        let rewards = draws.iter().map(|row| row.iter().map(|&(_, r)| r).collect()).collect();
        let batch = RewardBatch::new(ids.clone(), rewards)?;
        let adv = compute_advantages(&config.estimator, &batch, table)?;

        let mut updates = Vec::with_capacity(b * g);
        let mut components = Vec::with_capacity(b * g);
        for ((&id, row), adv_row) in ids.iter().zip(&draws).zip(&adv.advantages) {
            let p = &state.prompts[id];
            let pi_correct = true_value(p);
            for (&(action, _), &a) in row.iter().zip(adv_row) {
                updates.push(PolicyUpdate { prompt_id: id, action, advantage: a });
                let indicator = if action == p.correct_index { 1.0 } else { 0.0 };
                components.push(a * (indicator - pi_correct));
            }
        }
        // Group rollouts are averaged so the per-prompt step does not grow with G.
        apply_policy_gradient(&mut state, &updates, config.learning_rate / g as f64);

        let evaluate = step % config.eval_every == 0 || step == config.steps;
        records.push(TraceRecord {
            step,
            mean_true_value: evaluate.then(|| state.mean_true_value()),
            selected_beta: adv.selected_beta,
            grad_var: sample_variance(&components),
        });
    }
    Ok(TrainTrace { records, final_population: state })
}

/// Baseline rule for the gradient-variance probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeBaseline {
    Estimator(EstimatorSpec),
    /// `b_i = V_i`, the exact value of the prompt, with one rollout.
    ExactValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradStats {
    pub prompt_id: usize,
    pub draws: u64,
    /// Monte-Carlo mean of the per-prompt gradient estimate, per logit.
    pub mean: Vec<f64>,
    /// Standard error of each mean component.
    pub std_err: Vec<f64>,
    /// Total variance (trace of the covariance) of the gradient estimate.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub per_prompt: Vec<PromptGradStats>,
    /// Mean of the per-prompt total variances over prompts that were drawn.
    pub aggregate_variance: f64,
}

/// Minimum number of draws accepted by the probe.
pub const MIN_PROBE_DRAWS: usize = 1000;

/// Monte-Carlo variance of the per-prompt gradient estimate
/// `(1/G) sum_g A_g * score(a_g)` under a baseline rule, with the policy
/// held fixed. Each draw samples a fresh batch of `batch_size` prompts.
pub fn gradient_variance_probe(
    pop: &PromptPopulation,
    table: Option<&ValueTable>,
    baseline: ProbeBaseline,
    batch_size: usize,
    n_draws: usize,
    seed: u64,
) -> Result<ProbeReport, TrainError> {
    if n_draws < MIN_PROBE_DRAWS {
        return Err(TrainError::Config(format!("probe needs at least {MIN_PROBE_DRAWS} draws")));
    }
    let b = batch_size.min(pop.len());
    let g = match baseline {
        ProbeBaseline::Estimator(spec) => {
            spec.validate()?;
            spec.group_size
        }
        ProbeBaseline::ExactValue => 1,
    };
    let probs: Vec<Vec<f64>> = pop.prompts.iter().map(|p| p.probabilities()).collect();
    let mut acc: Vec<Vec<Welford>> = pop.prompts.iter().map(|p| vec![Welford::default(); p.k()]).collect();

    for draw in 0..n_draws {
        let mut rng = rng::stream(seed, &[tag::PROBE, draw as u64]);
        let idx = pop.sample_batch(b, &mut rng);
        let draws = rollouts(pop, &idx, g, seed, &[tag::PROBE, draw as u64]);
        let ids: Vec<usize> = idx.iter().map(|&i| pop.prompts[i].prompt_id).collect();
        let advantages: Vec<Vec<f64>> = match baseline {
            ProbeBaseline::Estimator(spec) => {
                let rewards = draws.iter().map(|row| row.iter().map(|&(_, r)| r).collect()).collect();
                compute_advantages(&spec, &RewardBatch::new(ids.clone(), rewards)?, table)?.advantages
            }
            ProbeBaseline::ExactValue => ids
                .iter()
                .zip(&draws)
                .map(|(&id, row)| row.iter().map(|&(_, r)| r - true_value(&pop.prompts[id])).collect())
                .collect(),
        };
        for ((&id, row), adv_row) in ids.iter().zip(&draws).zip(&advantages) {
            let k = probs[id].len();
            let mut grad = vec![0.0; k];
            for (&(action, _), &a) in row.iter().zip(adv_row) {
                for c in 0..k {
                    let s = if c == action { 1.0 - probs[id][c] } else { -probs[id][c] };
                    grad[c] += a * s / g as f64;
                }
            }
            acc[id].iter_mut().zip(&grad).for_each(|(w, &x)| w.push(x));
        }
    }

    let per_prompt: Vec<PromptGradStats> = acc
        .iter()
        .enumerate()
        .filter(|(_, w)| w[0].count > 0)
        .map(|(id, w)| PromptGradStats {
            prompt_id: id,
            draws: w[0].count,
            mean: w.iter().map(|c| c.mean).collect(),
            std_err: w.iter().map(Welford::std_err).collect(),
            variance: w.iter().map(Welford::variance).sum(),
        })
        .collect();
    let aggregate_variance = per_prompt.iter().map(|s| s.variance).sum::<f64>() / per_prompt.len() as f64;
    Ok(ProbeReport { per_prompt, aggregate_variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_population, PromptState};
    use crate::estimators::Variant;
    use crate::offline_values::{build_table, BetaGrid};
    use proptest::prelude::*;

    #[test]
    fn zero_advantage_leaves_logits() {
        let pop = make_population(3, "uniform:0.2,0.8".parse().unwrap(), 3, 1).unwrap();
        let next = policy_gradient_step(&pop, &[PolicyUpdate { prompt_id: 1, action: 0, advantage: 0.0 }], 1.0);
        assert_eq!(next, pop);
    }

    #[test]
    fn two_arm_update() {
        let pop = PromptPopulation::new(vec![PromptState::new(0, vec![0.0, 0.0], 0).unwrap()], 0).unwrap();
        let next = policy_gradient_step(&pop, &[PolicyUpdate { prompt_id: 0, action: 0, advantage: 1.0 }], 1.0);
        assert_eq!(next.prompts[0].logits, vec![0.5, -0.5]);
    }

    #[test]
    fn untouched_prompts_unchanged() {
        let pop = make_population(4, "uniform:0.2,0.8".parse().unwrap(), 3, 1).unwrap();
        let next = policy_gradient_step(&pop, &[PolicyUpdate { prompt_id: 2, action: 1, advantage: -0.7 }], 0.3);
        for i in [0, 1, 3] {
            assert_eq!(next.prompts[i], pop.prompts[i]);
        }
        assert_ne!(next.prompts[2], pop.prompts[2]);
    }

    fn central_difference(logits: &[f64], action: usize, h: f64) -> Vec<f64> {
        let log_pi = |z: &[f64]| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            z[action] - lse
        };
        (0..logits.len())
            .map(|c| {
                let mut up = logits.to_vec();
                let mut down = logits.to_vec();
                up[c] += h;
                down[c] -= h;
                (log_pi(&up) - log_pi(&down)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn score_matches_finite_differences(logits in prop::collection::vec(-5.0f64..5.0, 2..8), a in 0usize..8) {
            let a = a % logits.len();
            let analytic = policy_score(&logits, a);
            let numeric = central_difference(&logits, a, 1e-5);
            for (x, y) in analytic.iter().zip(&numeric) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn probabilities_stay_normalized(
            logits in prop::collection::vec(-5.0f64..5.0, 2..6),
            a in 0usize..6,
            adv in -3.0f64..3.0,
            lr in 0.0f64..2.0,
        ) {
            let k = logits.len();
            let pop = PromptPopulation::new(vec![PromptState::new(0, logits, 0).unwrap()], 0).unwrap();
            let next = policy_gradient_step(&pop, &[PolicyUpdate { prompt_id: 0, action: a % k, advantage: adv }], lr);
            let total: f64 = next.prompts[0].probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_policy_keeps_value() {
        let pop = make_population(50, "uniform:0.1,0.9".parse().unwrap(), 4, 2).unwrap();
        let config = TrainConfig { steps: 20, batch_size: 16, learning_rate: 0.0, estimator: EstimatorSpec::grpo(4), ..Default::default() };
        let trace = train(&pop, None, &config).unwrap();
        let v0 = trace.initial_value();
        assert!(trace.values().iter().all(|&(_, v)| v == v0));
        assert_eq!(trace.final_population, pop);
    }

    #[test]
    fn training_is_deterministic() {
        let pop = make_population(40, "uniform:0.1,0.9".parse().unwrap(), 3, 2).unwrap();
        let table = build_table(&pop, 32, BetaGrid::default_grid(), 3).unwrap();
        let config = TrainConfig { steps: 15, batch_size: 16, estimator: EstimatorSpec::basis(Variant::Unb), ..Default::default() };
        let a = train(&pop, Some(&table), &config).unwrap();
        let b = train(&pop, Some(&table), &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 16);
        assert!(a.records[1..].iter().all(|r| r.selected_beta.is_some()));
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,mean_true_value,selected_beta,grad_var\n"));
    }

    #[test]
    fn eval_every_thins_evaluations() {
        let pop = make_population(20, "uniform:0.1,0.9".parse().unwrap(), 3, 2).unwrap();
        let config = TrainConfig { steps: 10, batch_size: 8, eval_every: 4, ..Default::default() };
        let trace = train(&pop, None, &config).unwrap();
        let steps: Vec<usize> = trace.values().iter().map(|&(s, _)| s).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
        assert!(trace.records.iter().all(|r| r.selected_beta.is_none()));
    }

    #[test]
    fn basis_training_needs_table() {
        let pop = make_population(20, "uniform:0.1,0.9".parse().unwrap(), 3, 2).unwrap();
        let config = TrainConfig { estimator: EstimatorSpec::basis(Variant::Unb), ..Default::default() };
        assert!(matches!(train(&pop, None, &config), Err(TrainError::Estimator(EstimatorError::MissingTable))));
        let bad = TrainConfig { steps: 0, ..Default::default() };
        assert!(train(&pop, None, &bad).is_err());
    }

    #[test]
    fn grpo_improves_an_easy_population() {
        let pop = make_population(128, "uniform:0.6,0.8".parse().unwrap(), 4, 9).unwrap();
        let config = TrainConfig { steps: 300, batch_size: 32, estimator: EstimatorSpec::grpo(8), seed: 4, ..Default::default() };
        let trace = train(&pop, None, &config).unwrap();
        assert!(trace.final_value() >= trace.initial_value() + 0.1, "{} -> {}", trace.initial_value(), trace.final_value());
    }

    #[test]
    fn probe_deterministic_prompt_has_no_variance() {
        let prompts = vec![
            PromptState::new(0, vec![40.0, 0.0, 0.0], 0).unwrap(),
            PromptState::new(1, vec![0.0, 40.0, 0.0], 1).unwrap(),
        ];
        let pop = PromptPopulation::new(prompts, 0).unwrap();
        for spec in [EstimatorSpec::zero(), EstimatorSpec::grpo(4), EstimatorSpec::reinforcepp(1)] {
            let r = gradient_variance_probe(&pop, None, ProbeBaseline::Estimator(spec), 2, 1000, 3).unwrap();
            assert!(r.aggregate_variance < 1e-12, "{spec}: {}", r.aggregate_variance);
        }
        assert!(gradient_variance_probe(&pop, None, ProbeBaseline::ExactValue, 2, 10, 3).is_err());
    }

    #[test]
    fn exact_value_baseline_reduces_variance() {
        let pop = make_population(4, "uniform:0.45,0.55".parse().unwrap(), 3, 7).unwrap();
        let zero = gradient_variance_probe(&pop, None, ProbeBaseline::Estimator(EstimatorSpec::zero()), 4, 20_000, 1).unwrap();
        let exact = gradient_variance_probe(&pop, None, ProbeBaseline::ExactValue, 4, 20_000, 1).unwrap();
        for (z, e) in zero.per_prompt.iter().zip(&exact.per_prompt) {
            assert!(e.variance < z.variance, "{} vs {}", e.variance, z.variance);
        }
    }
}
