//! Reference likelihood-free samplers (rejection, MCMC and SMC ABC, AVO
//! with a Gaussian proposal) and the gradient-vanishing probe.

pub mod abc;
pub mod avo;
pub mod probe;

pub use abc::{mcmc_abc, rejection_abc, smc_abc, AbcConfig, AbcLevel, AbcResult, Threshold};
pub use avo::{avo_run, reinforce_gradient, AvoConfig, AvoResult, AvoState, ValuePair};
pub use probe::{gradient_vanishing_probe, probe_gradient_norm, probe_samples, ProbeConfig, ProbePoint, ProbeSample};

use crate::error::{Error, Result};

/// Effective sample size `1 / sum w^2` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    1.0 / weights.iter().map(|w| (w / total).powi(2)).sum::<f64>()
}

/// Weighted componentwise mean.
pub fn weighted_mean(samples: &[Vec<f64>], weights: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if samples.is_empty() || !(total > 0.0) {
        return None;
    }
    let d = samples[0].len();
    let mut out = vec![0.0; d];
    for (s, w) in samples.iter().zip(weights) {
        for k in 0..d {
            out[k] += w / total * s[k];
        }
    }
    Some(out)
}

fn weighted_sd(samples: &[Vec<f64>], weights: &[f64], mean: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..mean.len())
        .map(|k| {
            let v: f64 = samples.iter().zip(weights).map(|(s, w)| w / total * (s[k] - mean[k]).powi(2)).sum();
            v.sqrt()
        })
        .collect()
}

/// Mode of a weighted product-Gaussian kernel density estimate, searched
/// over the samples themselves. Bandwidths follow the normal reference
/// rule `0.9 sd ess^(-1/5)` per dimension; ties go to the lowest index.
pub fn weighted_kde_mode(samples: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() || samples.len() != weights.len() {
        return Err(Error::Domain("kde mode needs matching non-empty samples and weights".into()));
    }
    let mean = weighted_mean(samples, weights).ok_or_else(|| Error::Domain("weights sum to zero".into()))?;
    let ess = effective_sample_size(weights);
    let bw: Vec<f64> = weighted_sd(samples, weights, &mean)
        .into_iter()
        .map(|sd| 0.9 * sd * ess.powf(-0.2))
        .collect();
    if bw.iter().all(|h| *h == 0.0) {
        return Ok(samples[0].clone());
    }
    let bw: Vec<f64> = bw.into_iter().map(|h| if h > 0.0 { h } else { f64::MIN_POSITIVE }).collect();
    use rayon::prelude::*;
    let density: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            samples
                .iter()
                .zip(weights)
                .map(|(s, w)| {
                    let q: f64 = x.iter().zip(s).zip(&bw).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
                    w * (-0.5 * q).exp()
                })
                .sum()
        })
        .collect();
    let mut best = 0;
    for (i, v) in density.iter().enumerate() {
        if *v > density[best] {
            best = i;
        }
    }
    Ok(samples[best].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ess_of_uniform_and_degenerate_weights() {
        assert!((effective_sample_size(&[1.0; 40]) - 40.0).abs() < 1e-9);
        assert!((effective_sample_size(&[0.0, 3.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kde_mode_finds_the_dense_cluster() {
        let mut samples: Vec<Vec<f64>> = (0..50).map(|i| vec![0.7 + 0.001 * i as f64]).collect();
        samples.extend((0..20).map(|i| vec![0.1 + 0.02 * i as f64]));
        let w = vec![1.0; samples.len()];
        let m = weighted_kde_mode(&samples, &w).unwrap();
        assert!((m[0] - 0.725).abs() < 0.03, "{m:?}");
        // weights can move the mode
        let mut w2 = vec![0.01; 50];
        w2.extend(vec![1.0; 20]);
        assert!(weighted_kde_mode(&samples, &w2).unwrap()[0] < 0.6);
        assert_eq!(weighted_kde_mode(&[vec![0.3], vec![0.3]], &[1.0, 1.0]).unwrap(), vec![0.3]);
        assert!(weighted_kde_mode(&[], &[]).is_err());
    }
}
