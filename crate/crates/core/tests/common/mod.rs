#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, Normal};

/// Mean of the epsilon-ABC posterior for `x = theta + N(0, sigma^2)` with
/// a uniform prior on [0, 1], by midpoint quadrature:
/// `p(theta) ∝ P(|theta + sigma Z - x| < eps)`.
pub fn abc_location_mean(x: f64, eps: f64, sigma: f64) -> f64 {
    let n = 200_000;
    let z = Normal::new(0.0, 1.0).unwrap();
    let (mut mass, mut first) = (0.0, 0.0);
    for i in 0..n {
        let t = (i as f64 + 0.5) / n as f64;
        let p = if sigma == 0.0 {
            ((t - x).abs() < eps) as u8 as f64
        } else {
            z.cdf((x + eps - t) / sigma) - z.cdf((x - eps - t) / sigma)
        };
        mass += p;
        first += p * t;
    }
    first / mass
}

/// Mean of `N(x, sigma^2)` truncated to [0, 1], in closed form.
pub fn truncated_normal_mean(x: f64, sigma: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    let (a, b) = ((0.0 - x) / sigma, (1.0 - x) / sigma);
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x + sigma * (phi(a) - phi(b)) / (z.cdf(b) - z.cdf(a))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    sd(&means) / (batches as f64).sqrt()
}
