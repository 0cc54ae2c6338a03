//! Parametric families for the transformed discriminator output, the
//! support-expanding transform `h`, and small density utilities used by
//! the diagnostics.
//!
//! The likelihood surrogate is `f(h(y); s) * |h'(y)|` where `y` is the
//! discriminator score of the observation. Beta pairs with the identity
//! transform; Gaussian pairs with `h(y) = -2 cot(pi * sigmoid(y - center))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};

/// Lower bound added to every strictly positive shape produced by a network head.
pub const SHAPE_FLOOR: f64 = 1e-3;

/// Discriminator scores fed to the beta density are clamped into
/// `[BETA_CLAMP, 1 - BETA_CLAMP]`.
pub const BETA_CLAMP: f64 = 1e-6;

/// Sigmoid output of the Gaussian transform is clamped away from {0, 1}.
pub const SIGMOID_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Beta,
    Gaussian,
}

impl Family {
    pub fn arity(self) -> usize {
        2
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Beta => "beta",
            Family::Gaussian => "gaussian",
        }
    }
}

/// Shape parameters `(alpha, beta)` for the beta family or `(mu, sigma)`
/// for the Gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub family: Family,
    pub values: [f64; 2],
}

impl ShapeParams {
    pub fn beta(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(Family::Beta, [alpha, beta])
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(Family::Gaussian, [mu, sigma])
    }

    pub fn new(family: Family, values: [f64; 2]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite {} shapes {values:?}", family.name())));
        }
        let ok = match family {
            Family::Beta => values[0] > 0.0 && values[1] > 0.0,
            Family::Gaussian => values[1] > 0.0,
        };
        if !ok {
            return Err(Error::Domain(format!("invalid {} shapes {values:?}", family.name())));
        }
        Ok(ShapeParams { family, values })
    }

    /// Mean of the family on its own support.
    pub fn mean(&self) -> f64 {
        match self.family {
            Family::Beta => self.values[0] / (self.values[0] + self.values[1]),
            Family::Gaussian => self.values[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    CotSigmoid { center: f64 },
}

impl Transform {
    pub fn cot_sigmoid(center: f64) -> Result<Self> {
        if !(center > 0.0 && center < 1.0) {
            return Err(Error::Domain(format!("transform center {center} outside (0, 1)")));
        }
        Ok(Transform::CotSigmoid { center })
    }

    /// The transform paired with `family`, centered at the observation score.
    pub fn for_family(family: Family, d_obs: f64) -> Result<Self> {
        match family {
            Family::Beta => Ok(Transform::Identity),
            Family::Gaussian => Transform::cot_sigmoid(d_obs),
        }
    }
}

pub fn beta_logpdf(y: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain(format!("beta density needs y in (0, 1), got {y}")));
    }
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Domain(format!("beta shapes must be positive, got ({alpha}, {beta})")));
    }
    Ok((alpha - 1.0) * y.ln() + (beta - 1.0) * (-y).ln_1p() - ln_beta(alpha, beta))
}

pub fn gaussian_logpdf(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = (z - mu) / sigma;
    Ok(-0.5 * r * r - sigma.ln() - 0.5 * (2.0 * PI).ln())
}

/// `h0(t) = -2 sin(2 pi t) / (1 - cos(2 pi t))`, evaluated through the
/// equivalent half-angle form `-2 cot(pi t)`.
pub fn h0(t: f64) -> f64 {
    let (s, c) = (PI * t).sin_cos();
    -2.0 * c / s
}

/// Derivative of [`h0`]: `2 pi / sin^2(pi t)`.
pub fn h0_prime(t: f64) -> f64 {
    let s = (PI * t).sin();
    2.0 * PI / (s * s)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Returns `(h(y), h'(y))`.
pub fn h_transform(t: &Transform, y: f64) -> Result<(f64, f64)> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain(format!("transform input must lie in (0, 1), got {y}")));
    }
    match *t {
        Transform::Identity => Ok((y, 1.0)),
        Transform::CotSigmoid { center } => {
            let s = sigmoid(y - center);
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Singularity(y));
            }
            let s = s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
            Ok((h0(s), h0_prime(s) * s * (1.0 - s)))
        }
    }
}

/// Log-density of the shape family at `h(y)`, without the Jacobian term.
/// This is the quantity whose ratio drives the Metropolis-Hastings step.
pub fn shape_logpdf(shapes: &ShapeParams, transform: &Transform, y: f64) -> Result<f64> {
    check_pairing(shapes.family, transform)?;
    match shapes.family {
        Family::Beta => {
            let y = y.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
            let (z, _) = h_transform(transform, y)?;
            beta_logpdf(z.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP), shapes.values[0], shapes.values[1])
        }
        Family::Gaussian => {
            let (z, _) = h_transform(transform, y)?;
            gaussian_logpdf(z, shapes.values[0], shapes.values[1])
        }
    }
}

/// `log f(h(y); s) + log |h'(y)|`.
pub fn family_logpdf(shapes: &ShapeParams, transform: &Transform, y: f64) -> Result<f64> {
    let base = shape_logpdf(shapes, transform, y)?;
    let y = match shapes.family {
        Family::Beta => y.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP),
        Family::Gaussian => y,
    };
    let (_, deriv) = h_transform(transform, y)?;
    Ok(base + deriv.abs().ln())
}

fn check_pairing(family: Family, transform: &Transform) -> Result<()> {
    match (family, transform) {
        (Family::Beta, Transform::CotSigmoid { .. }) => Err(Error::Config(
            "beta family requires the identity transform".into(),
        )),
        _ => Ok(()),
    }
}

/// Gradient of `log f(z; s)` with respect to the two shapes, where `z` is
/// already on the family's support.
pub fn shape_score(shapes: &ShapeParams, z: f64) -> [f64; 2] {
    let [a, b] = shapes.values;
    match shapes.family {
        Family::Beta => {
            let common = digamma(a + b);
            [z.ln() + common - digamma(a), (-z).ln_1p() + common - digamma(b)]
        }
        Family::Gaussian => {
            let r = z - a;
            [r / (b * b), -1.0 / b + r * r / (b * b * b)]
        }
    }
}

/// Maps a discriminator score onto the family's support, returning the
/// target and whether the score had to be clamped.
pub fn family_target(family: Family, transform: &Transform, y: f64) -> Result<(f64, bool)> {
    match family {
        Family::Beta => {
            let clamped = y.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
            Ok((clamped, clamped != y))
        }
        Family::Gaussian => {
            let clamped = y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            let (z, _) = h_transform(transform, clamped)?;
            Ok((z, clamped != y))
        }
    }
}

fn mean_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Gaussian-kernel density estimate at `x`.
pub fn kde_pdf(sample: &[f64], bandwidth: f64, x: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Domain("kde needs a non-empty sample".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Domain(format!("kde bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / ((2.0 * PI).sqrt() * bandwidth * sample.len() as f64);
    Ok(norm * sample.iter().map(|s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp()).sum::<f64>())
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::Domain("bandwidth selection needs at least two points".into()));
    }
    let (_, var) = mean_var(sample);
    let sd = var.sqrt();
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (sample.len() as f64).powf(-0.2);
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::Domain("degenerate sample: zero spread".into()))
    }
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Beta shapes matching a mean and variance.
pub fn beta_from_moments(mean: f64, var: f64) -> Result<ShapeParams> {
    if !(mean > 0.0 && mean < 1.0) {
        return Err(Error::Domain(format!("beta mean must lie in (0, 1), got {mean}")));
    }
    // rounding leaves a ~1e-33 residue on constant samples
    if !(var > 1e-15 * mean * (1.0 - mean) && var < mean * (1.0 - mean)) {
        return Err(Error::Domain(format!("degenerate variance {var} for mean {mean}")));
    }
    let common = mean * (1.0 - mean) / var - 1.0;
    ShapeParams::beta(mean * common, (1.0 - mean) * common)
}

/// Method-of-moments beta fit.
pub fn fit_beta_moments(sample: &[f64]) -> Result<ShapeParams> {
    if sample.len() < 2 {
        return Err(Error::Domain("moment fit needs at least two points".into()));
    }
    if let Some(bad) = sample.iter().find(|y| !(**y > 0.0 && **y < 1.0)) {
        return Err(Error::Domain(format!("moment fit needs values in (0, 1), got {bad}")));
    }
    let (mean, var) = mean_var(sample);
    beta_from_moments(mean, var)
}

/// Cumulative distribution of `Z = h(Y)` expressed on the `y` scale,
/// i.e. `P(Y <= y)` under the fitted family. Used for goodness-of-fit checks.
pub fn family_cdf_on_y(shapes: &ShapeParams, transform: &Transform, y: f64) -> Result<f64> {
    use statrs::distribution::{Beta, ContinuousCDF, Normal};
    let y = y.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
    let (z, _) = h_transform(transform, y)?;
    let [a, b] = shapes.values;
    let cdf = match shapes.family {
        Family::Beta => Beta::new(a, b)
            .map_err(|e| Error::Domain(e.to_string()))?
            .cdf(z),
        Family::Gaussian => Normal::new(a, b)
            .map_err(|e| Error::Domain(e.to_string()))?
            .cdf(z),
    };
    Ok(cdf)
}
