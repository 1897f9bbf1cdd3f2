//! Direct-loop reference implementations shared by the integration tests.
//! Everything here is written from the definitions, without the prefix sums,
//! simplifications or parallelism of the library code.

#![allow(dead_code)]

use basis_core::estimators::Variant;

pub fn bernoulli_var(v: f64) -> f64 {
    v * (1.0 - v)
}

pub fn tilt(p: f64, beta: f64) -> f64 {
    let e = (1.0 / beta).exp();
    p * e / (1.0 - p + p * e)
}

/// `w_ij = (V_i V_j / s_j) / (extra + sum_{k != i} V_k^2 / s_k)` over the
/// positions listed in `peers_of_i` (which must not contain `i`).
pub fn weights(values: &[f64], i: usize, peers: &[usize], extra: f64) -> Vec<f64> {
    let mut den = extra;
    for &k in peers {
        den += values[k] * values[k] / bernoulli_var(values[k]);
    }
    let mut w = vec![0.0; values.len()];
    for &j in peers {
        w[j] = values[i] * values[j] / bernoulli_var(values[j]) / den;
    }
    w
}

/// Refined baselines and active flags, by direct loops.
pub fn refined(values: &[f64], rewards: &[f64], variant: Variant, eps: f64) -> (Vec<f64>, Vec<bool>) {
    let b = values.len();
    let mut active = vec![false; b];
    for i in 0..b {
        active[i] = values[i] > eps && values[i] < 1.0 - eps;
    }
    let count = active.iter().filter(|&&a| a).count();
    let mut baselines = vec![0.0; b];
    if count < 2 {
        return (baselines, vec![false; b]);
    }
    for i in 0..b {
        if !active[i] {
            continue;
        }
        let peers: Vec<usize> = (0..b).filter(|&j| j != i && active[j]).collect();
        baselines[i] = match variant {
            Variant::Unb | Variant::Vop => {
                let extra = if variant == Variant::Vop { 1.0 } else { 0.0 };
                let w = weights(values, i, &peers, extra);
                let mut s = 0.0;
                for &j in &peers {
                    s += w[j] * rewards[j];
                }
                s
            }
            Variant::Rvg => {
                let mut s = 0.0;
                for &j in &peers {
                    s += rewards[j] / values[j];
                }
                values[i] * s / peers.len() as f64
            }
        };
    }
    (baselines, active)
}

/// Calibration objective at every grid point, with initial values
/// `tilt(p_hat, beta)`: mean squared residual over
/// the prompts active at any grid point, scoring inactive prompts with a
/// zero baseline; `None` where fewer than two prompts are active.
pub fn objectives(
    p_hats: &[f64],
    rewards: &[f64],
    grid: &[f64],
    tilt: impl Fn(f64, f64) -> f64,
    variant: Variant,
    eps: f64,
) -> Vec<Option<f64>> {
    let b = rewards.len();
    let per_beta: Vec<(Vec<f64>, Vec<bool>)> = grid
        .iter()
        .map(|&beta| {
            let values: Vec<f64> = p_hats.iter().map(|&p| tilt(p, beta)).collect();
            refined(&values, rewards, variant, eps)
        })
        .collect();
    let mut scored = vec![false; b];
    for (_, active) in &per_beta {
        for i in 0..b {
            if active[i] {
                scored[i] = true;
            }
        }
    }
    let n = scored.iter().filter(|&&s| s).count();
    per_beta
        .iter()
        .map(|(base, active)| {
            if active.iter().filter(|&&a| a).count() < 2 {
                return None;
            }
            let mut s = 0.0;
            for i in 0..b {
                if scored[i] {
                    s += (rewards[i] - base[i]).powi(2);
                }
            }
            Some(s / n as f64)
        })
        .collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Exact gradient of `softmax(logits)[correct]` with respect to the logits.
pub fn value_gradient(logits: &[f64], correct: usize) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let pi: Vec<f64> = logits.iter().map(|&l| (l - max).exp() / z).collect();
    (0..logits.len())
        .map(|c| pi[correct] * (if c == correct { 1.0 } else { 0.0 } - pi[c]))
        .collect()
}

/// Central finite-difference gradient of `log softmax(logits)[action]`.
pub fn log_prob_gradient_fd(logits: &[f64], action: usize, h: f64) -> Vec<f64> {
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
