//! Prompt-as-bandit environment.
//!
//! Each prompt is a categorical softmax policy over `K` candidate answers,
//! exactly one of which is correct. The reward of a rollout is 1 when the
//! sampled answer is the correct one, so the prompt value is the softmax
//! mass on the correct answer and is available in closed form.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("answer-set size must be at least 2, got {0}")]
    TooFewAnswers(usize),
    #[error("population count must be positive")]
    EmptyPopulation,
    #[error("invalid value distribution: {0}")]
    InvalidDistribution(String),
    #[error("prompt {id}: {reason}")]
    InvalidPrompt { id: usize, reason: String },
    #[error("population json: {0}")]
    Json(String),
}

/// A synthetic prompt: softmax logits over `K` answers and the index of the
/// correct one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub prompt_id: usize,
    pub logits: Vec<f64>,
    pub correct_index: usize,
}

/// One sampled answer and its verifier reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardSample {
    pub prompt_id: usize,
    pub action: usize,
    pub reward: u8,
}

impl RewardSample {
    pub fn reward_f64(&self) -> f64 {
        f64::from(self.reward)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl PromptState {
    pub fn new(prompt_id: usize, logits: Vec<f64>, correct_index: usize) -> Result<Self, EnvError> {
        let state = Self { prompt_id, logits, correct_index };
        state.validate()?;
        Ok(state)
    }

    /// Builds a prompt whose value is exactly `value`: the correct logit is
    /// `ln(v (K-1) / (1-v))` and every other logit is zero.
    pub fn with_value(prompt_id: usize, value: f64, k: usize, correct_index: usize) -> Result<Self, EnvError> {
        if k < 2 {
            return Err(EnvError::TooFewAnswers(k));
        }
        if !(value > 0.0 && value < 1.0) {
            return Err(EnvError::InvalidPrompt {
                id: prompt_id,
                reason: format!("target value {value} outside (0, 1)"),
            });
        }
        let mut logits = vec![0.0; k];
        logits[correct_index] = (value * (k - 1) as f64 / (1.0 - value)).ln();
        Self::new(prompt_id, logits, correct_index)
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |reason: String| EnvError::InvalidPrompt { id: self.prompt_id, reason };
        if self.logits.len() < 2 {
            return Err(EnvError::TooFewAnswers(self.logits.len()));
        }
        if self.correct_index >= self.logits.len() {
            return Err(bad(format!(
                "correct_index {} out of range for K = {}",
                self.correct_index,
                self.logits.len()
            )));
        }
        if let Some(z) = self.logits.iter().find(|z| !z.is_finite()) {
            return Err(bad(format!("non-finite logit {z}")));
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// The exact expected reward of this prompt under its current policy.
    pub fn true_value(&self) -> f64 {
        true_value(self)
    }

    /// The KL-tilted policy `pi_ref * exp(r / beta) / Z`. With a 0/1 reward
    /// this only shifts the correct logit by `1 / beta`.
    pub fn tilted(&self, beta: f64) -> Self {
        let mut out = self.clone();
        out.logits[self.correct_index] += 1.0 / beta;
        out
    }
}

/// Softmax mass on the correct answer.
pub fn true_value(p: &PromptState) -> f64 {
    let max = p.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = p.logits.iter().map(|&z| (z - max).exp()).sum();
    ((p.logits[p.correct_index] - max).exp() / total).clamp(0.0, 1.0)
}

/// Draws an action index from `probs` by inverting the cumulative sum.
pub(crate) fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = a;
        }
        acc += p;
        if u < acc {
            return a;
        }
    }
    last_positive
}

/// Samples one answer from the prompt's policy and scores it.
pub fn sample_rollout(p: &PromptState, rng: &mut Rng) -> RewardSample {
    let action = sample_index(&p.probabilities(), rng);
    RewardSample {
        prompt_id: p.prompt_id,
        action,
        reward: u8::from(action == p.correct_index),
    }
}

/// Draws `n` rollouts and returns the number with reward 1.
pub fn count_successes(p: &PromptState, n: usize, rng: &mut Rng) -> usize {
    let probs = p.probabilities();
    (0..n)
        .filter(|_| sample_index(&probs, rng) == p.correct_index)
        .count()
}

/// Distribution of target prompt values in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ValueDistribution {
    Uniform { lo: f64, hi: f64 },
    Beta { a: f64, b: f64 },
    TwoCluster { low: f64, high: f64, mix: f64 },
}

fn open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl ValueDistribution {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: &str| Err(EnvError::InvalidDistribution(format!("{self}: {m}")));
        match *self {
            Self::Uniform { lo, hi } => {
                if !(open_unit(lo) && open_unit(hi)) {
                    return err("support must lie strictly inside (0, 1)");
                }
                if lo > hi {
                    return err("lo must not exceed hi");
                }
            }
            Self::Beta { a, b } => {
                if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                    return err("shape parameters must be positive");
                }
            }
            Self::TwoCluster { low, high, mix } => {
                if !(open_unit(low) && open_unit(high)) {
                    return err("cluster values must lie strictly inside (0, 1)");
                }
                if !(0.0..=1.0).contains(&mix) {
                    return err("mix must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }

    /// Draws one target value strictly inside (0, 1).
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let v = match *self {
            Self::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            Self::Beta { a, b } => Beta::new(a, b).expect("validated shape").sample(rng),
            Self::TwoCluster { low, high, mix } => {
                if rng.random::<f64>() < mix {
                    low
                } else {
                    high
                }
            }
        };
        // Beta draws can round to the closed endpoints.
        v.clamp(1e-12, 1.0 - 1e-12)
    }
}

impl fmt::Display for ValueDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            Self::Beta { a, b } => write!(f, "beta:{a},{b}"),
            Self::TwoCluster { low, high, mix } => write!(f, "two-cluster:{low},{high},{mix}"),
        }
    }
}

impl FromStr for ValueDistribution {
    type Err = EnvError;

    /// Parses `uniform:lo,hi`, `beta:a,b` or `two-cluster:v1,v2,mix`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnvError::InvalidDistribution(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = rest
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let dist = match (kind.trim(), nums.as_slice()) {
            ("uniform", &[lo, hi]) => Self::Uniform { lo, hi },
            ("beta", &[a, b]) => Self::Beta { a, b },
            ("two-cluster", &[low, high, mix]) => Self::TwoCluster { low, high, mix },
            _ => return Err(bad()),
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// An ordered set of prompts with contiguous ids starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPopulation {
    pub prompts: Vec<PromptState>,
    pub rng_seed: u64,
}

impl PromptPopulation {
    pub fn new(prompts: Vec<PromptState>, rng_seed: u64) -> Result<Self, EnvError> {
        for (i, p) in prompts.iter().enumerate() {
            if p.prompt_id != i {
                return Err(EnvError::InvalidPrompt {
                    id: p.prompt_id,
                    reason: format!("expected contiguous id {i}"),
                });
            }
            p.validate()?;
        }
        Ok(Self { prompts, rng_seed })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn true_values(&self) -> Vec<f64> {
        self.prompts.iter().map(true_value).collect()
    }

    pub fn mean_true_value(&self) -> f64 {
        self.prompts.iter().map(true_value).sum::<f64>() / self.len() as f64
    }

    /// Applies the KL tilt at `beta` to every prompt.
    pub fn tilted(&self, beta: f64) -> Self {
        Self {
            prompts: self.prompts.iter().map(|p| p.tilted(beta)).collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Draws `count` distinct prompt indices.
    pub fn sample_batch(&self, count: usize, rng: &mut Rng) -> Vec<usize> {
        index::sample(rng, self.len(), count.min(self.len())).into_vec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.prompts).expect("population serializes")
    }

    /// Reads the `.pop.json` array form. The seed is not part of the file.
    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let prompts: Vec<PromptState> = serde_json::from_str(s).map_err(|e| EnvError::Json(e.to_string()))?;
        Self::new(prompts, 0)
    }
}

/// Builds a population whose prompt values are drawn from `dist`.
pub fn make_population(
    count: usize,
    dist: ValueDistribution,
    k: usize,
    seed: u64,
) -> Result<PromptPopulation, EnvError> {
    if count == 0 {
        return Err(EnvError::EmptyPopulation);
    }
    if k < 2 {
        return Err(EnvError::TooFewAnswers(k));
    }
    dist.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::POPULATION]);
    let prompts = (0..count)
        .map(|id| {
            let v = dist.sample(&mut rng);
            let correct = rng.random_range(0..k);
            PromptState::with_value(id, v, k, correct)
        })
        .collect::<Result<Vec<_>, _>>()?;
    PromptPopulation::new(prompts, seed)
}
