//! Small statistics helpers: means, variances, and a seeded bootstrap.

use rand::Rng as _;

use crate::rng::{self, Rng};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Empirical quantile with linear interpolation, `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Unbiased sample variance; 0 with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Seeded resampler over a fixed number of units.
pub struct Bootstrap {
    rng: Rng,
    pub resamples: usize,
}

impl Bootstrap {
    pub fn new(seed: u64, resamples: usize) -> Self {
        Self { rng: rng::stream(seed, &[rng::tag::BOOTSTRAP]), resamples }
    }

    /// Draws `n` indices with replacement.
    pub fn indices(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.random_range(0..n)).collect()
    }

    /// Fraction of resamples of the paired units for which `pred` holds.
    /// Each resample draws unit indices once and passes them to `pred`.
    pub fn support(&mut self, n: usize, mut pred: impl FnMut(&[usize]) -> bool) -> f64 {
        let hits = (0..self.resamples).filter(|_| pred(&self.indices(n))).count();
        hits as f64 / self.resamples as f64
    }

    /// Bootstrap distribution of the mean of `xs`.
    pub fn means(&mut self, xs: &[f64]) -> Vec<f64> {
        (0..self.resamples)
            .map(|_| {
                let idx = self.indices(xs.len());
                idx.iter().map(|&i| xs[i]).sum::<f64>() / xs.len() as f64
            })
            .collect()
    }
}

/// Mean of `xs` at the given resample indices.
pub fn resampled_mean(xs: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
}
