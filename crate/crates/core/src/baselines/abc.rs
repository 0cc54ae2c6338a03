//! Approximate Bayesian computation with the boxcar kernel
//! `1{ ||g(theta, u) - x_obs|| < eps }` and a uniform prior on the box.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::effective_sample_size;
use crate::alfi::mh_propose;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::sim::{euclidean, simulate, Generator, ParamBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcConfig {
    /// Fixed ball radius. Mutually exclusive with `quantile`.
    pub epsilon: Option<f64>,
    /// Keep this fraction of the closest draws. Used (at 0.01) when neither
    /// `epsilon` nor `quantile` is given.
    pub quantile: Option<f64>,
    /// Total simulator calls.
    pub budget: usize,
    /// Share of the MCMC budget spent on the rejection pilot that sets the
    /// start point (and the radius in quantile mode).
    pub pilot_fraction: f64,
    /// MCMC random-walk standard deviation as a fraction of the box width.
    pub proposal_fraction: f64,
    /// SMC population size.
    pub population: usize,
    /// Strictly decreasing SMC tolerances. When absent, each level uses
    /// the `adaptive_quantile` of the previous population's distances.
    pub schedule: Option<Vec<f64>>,
    pub adaptive_quantile: f64,
    pub seed: u64,
}

impl Default for AbcConfig {
    fn default() -> Self {
        AbcConfig {
            epsilon: None,
            quantile: None,
            budget: 10_000,
            pilot_fraction: 0.1,
            proposal_fraction: 0.05,
            population: 200,
            schedule: None,
            adaptive_quantile: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Epsilon(f64),
    Quantile(f64),
}

pub const DEFAULT_QUANTILE: f64 = 0.01;

impl AbcConfig {
    pub fn threshold(&self) -> Result<Threshold> {
        match (self.epsilon, self.quantile) {
            (Some(_), Some(_)) => Err(Error::Config("set either `epsilon` or `quantile`, not both".into())),
            (Some(e), None) if e > 0.0 => Ok(Threshold::Epsilon(e)),
            (Some(e), None) => Err(Error::Config(format!("epsilon must be positive, got {e}"))),
            (None, Some(q)) if q > 0.0 && q < 1.0 => Ok(Threshold::Quantile(q)),
            (None, Some(q)) => Err(Error::Config(format!("quantile must lie in (0, 1), got {q}"))),
            (None, None) => Ok(Threshold::Quantile(DEFAULT_QUANTILE)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.threshold()?;
        if self.budget == 0 || self.population == 0 {
            return Err(Error::Config("budget and population must be at least 1".into()));
        }
        if !(self.pilot_fraction > 0.0 && self.pilot_fraction < 1.0) {
            return Err(Error::Config(format!("pilot_fraction must lie in (0, 1), got {}", self.pilot_fraction)));
        }
        if !(self.proposal_fraction > 0.0) || !self.proposal_fraction.is_finite() {
            return Err(Error::Config("proposal_fraction must be positive".into()));
        }
        if !(self.adaptive_quantile > 0.0 && self.adaptive_quantile < 1.0) {
            return Err(Error::Config("adaptive_quantile must lie in (0, 1)".into()));
        }
        if let Some(s) = &self.schedule {
            if s.is_empty() || s.iter().any(|e| !(*e > 0.0)) || s.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(Error::Config(format!("schedule must be non-empty, positive and strictly decreasing, got {s:?}")));
            }
        }
        Ok(())
    }
}

/// Diagnostics for one SMC tolerance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcLevel {
    pub epsilon: f64,
    pub ess: f64,
    pub acceptance_rate: f64,
    pub simulations: usize,
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcResult {
    pub samples: Vec<Vec<f64>>,
    /// Normalized importance weights (uniform outside SMC).
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    /// Radius in force for the returned samples.
    pub epsilon: f64,
    /// Accepted draws over attempted draws (MCMC: accepted moves over proposals).
    pub acceptance_rate: f64,
    pub simulations: usize,
    pub failed_simulations: usize,
    pub levels: Vec<AbcLevel>,
    /// Why the sampler returned early or with nothing.
    pub diagnostic: Option<String>,
}

impl AbcResult {
    fn empty(simulations: usize, failed: usize, diagnostic: String) -> Self {
        AbcResult {
            samples: Vec::new(),
            weights: Vec::new(),
            distances: Vec::new(),
            epsilon: f64::NAN,
            acceptance_rate: 0.0,
            simulations,
            failed_simulations: failed,
            levels: Vec::new(),
            diagnostic: Some(diagnostic),
        }
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        super::weighted_mean(&self.samples, &self.weights)
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    /// Weighted KDE mode of the samples.
    pub fn point_estimate(&self) -> Option<Vec<f64>> {
        super::weighted_kde_mode(&self.samples, &self.weights).ok()
    }
}

fn check_obs(gen: &dyn Generator, x_obs: &[f64]) -> Result<()> {
    if x_obs.len() != gen.summary_dim() {
        return Err(Error::Shape { expected: gen.summary_dim(), got: x_obs.len() });
    }
    Ok(())
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// One prior draw and its distance; `None` when the simulation failed.
fn prior_draw(gen: &dyn Generator, x_obs: &[f64], stream: SeedStream) -> (Vec<f64>, Option<f64>) {
    let theta = gen.bounds().sample_uniform(&mut stream.child("theta").rng());
    let dist = distance_at(gen, x_obs, &theta, stream.child("sim").seed());
    (theta, dist)
}

fn distance_at(gen: &dyn Generator, x_obs: &[f64], theta: &[f64], seed: u64) -> Option<f64> {
    match simulate(gen, theta, seed) {
        Ok(x) => Some(euclidean(&x, x_obs)),
        Err(e) => {
            log::warn!("abc simulation failed: {e}");
            None
        }
    }
}

fn prior_fan(gen: &dyn Generator, x_obs: &[f64], n: usize, stream: SeedStream) -> Vec<(Vec<f64>, Option<f64>)> {
    (0..n).into_par_iter().map(|i| prior_draw(gen, x_obs, stream.index(i as u64))).collect()
}

/// Indices of the `k` smallest distances, ordered by distance then index.
fn closest(draws: &[(Vec<f64>, Option<f64>)], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..draws.len()).filter(|&i| draws[i].1.is_some()).collect();
    idx.sort_by(|&a, &b| draws[a].1.unwrap().total_cmp(&draws[b].1.unwrap()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn keep_count(q: f64, n: usize) -> usize {
    ((q * n as f64).ceil() as usize).max(1)
}

/// Rejection ABC: `budget` prior draws, accepted inside the epsilon ball or
/// among the closest `quantile` fraction.
pub fn rejection_abc(gen: &dyn Generator, x_obs: &[f64], cfg: &AbcConfig) -> Result<AbcResult> {
    cfg.validate()?;
    check_obs(gen, x_obs)?;
    let draws = prior_fan(gen, x_obs, cfg.budget, SeedStream::new(cfg.seed).child("rejection"));
    let failed = draws.iter().filter(|d| d.1.is_none()).count();
    let (keep, epsilon): (Vec<usize>, f64) = match cfg.threshold()? {
        Threshold::Epsilon(e) => ((0..draws.len()).filter(|&i| draws[i].1.is_some_and(|d| d < e)).collect(), e),
        Threshold::Quantile(q) => {
            let keep = closest(&draws, keep_count(q, cfg.budget));
            let eps = keep.last().map_or(f64::NAN, |&i| draws[i].1.unwrap());
            (keep, eps)
        }
    };
    if keep.is_empty() {
        return Ok(AbcResult::empty(cfg.budget, failed, "no draw landed in the epsilon ball".into()));
    }
    Ok(AbcResult {
        samples: keep.iter().map(|&i| draws[i].0.clone()).collect(),
        weights: uniform(keep.len()),
        distances: keep.iter().map(|&i| draws[i].1.unwrap()).collect(),
        epsilon,
        acceptance_rate: keep.len() as f64 / cfg.budget as f64,
        simulations: cfg.budget,
        failed_simulations: failed,
        levels: Vec::new(),
        diagnostic: None,
    })
}

/// ABC-MCMC: a reflected Gaussian random walk that moves only when one
/// fresh simulation at the proposal lands in the ball. A rejection pilot
/// picks the start (its closest draw) and, in quantile mode, the radius.
/// The returned chain holds one state per post-pilot proposal.
pub fn mcmc_abc(gen: &dyn Generator, x_obs: &[f64], cfg: &AbcConfig) -> Result<AbcResult> {
    cfg.validate()?;
    check_obs(gen, x_obs)?;
    let root = SeedStream::new(cfg.seed);
    let pilot_n = ((cfg.budget as f64 * cfg.pilot_fraction).round() as usize).clamp(1, cfg.budget);
    let pilot = prior_fan(gen, x_obs, pilot_n, root.child("pilot"));
    let mut failed = pilot.iter().filter(|d| d.1.is_none()).count();
    let Some(&start) = closest(&pilot, 1).first() else {
        return Ok(AbcResult::empty(pilot_n, failed, "every pilot simulation failed".into()));
    };
    // quantile radii are attained by the pilot, so the ball is closed there
    let (epsilon, closed) = match cfg.threshold()? {
        Threshold::Epsilon(e) => (e, false),
        Threshold::Quantile(q) => {
            let k = closest(&pilot, keep_count(q, pilot_n));
            (pilot[*k.last().unwrap()].1.unwrap(), true)
        }
    };
    let inside = |d: f64| if closed { d <= epsilon } else { d < epsilon };

    let step: Vec<f64> = gen.bounds().widths().iter().map(|w| w * cfg.proposal_fraction).collect();
    let mut rng = root.child("mcmc").rng();
    let sims = root.child("mcmc-sim");
    let mut current = pilot[start].0.clone();
    let mut current_d = pilot[start].1.unwrap();
    let steps = cfg.budget - pilot_n;
    let mut samples = Vec::with_capacity(steps);
    let mut distances = Vec::with_capacity(steps);
    let mut accepted = 0;
    for j in 0..steps {
        let proposal = mh_propose(&current, &step, gen.bounds(), &mut rng);
        match distance_at(gen, x_obs, &proposal, sims.index(j as u64).seed()) {
            Some(d) if inside(d) => {
                current = proposal;
                current_d = d;
                accepted += 1;
            }
            Some(_) => {}
            None => failed += 1,
        }
        samples.push(current.clone());
        distances.push(current_d);
    }
    if samples.is_empty() {
        samples.push(current);
        distances.push(current_d);
    }
    let rate = if steps == 0 { 0.0 } else { accepted as f64 / steps as f64 };
    Ok(AbcResult {
        weights: uniform(samples.len()),
        samples,
        distances,
        epsilon,
        acceptance_rate: rate,
        simulations: cfg.budget,
        failed_simulations: failed,
        levels: Vec::new(),
        diagnostic: (accepted == 0 && steps > 0).then(|| "chain never moved".to_string()),
    })
}

struct Population {
    thetas: Vec<Vec<f64>>,
    weights: Vec<f64>,
    distances: Vec<f64>,
}

fn weighted_var(thetas: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let d = thetas[0].len();
    let mean = super::weighted_mean(thetas, weights).expect("non-empty population");
    (0..d)
        .map(|k| thetas.iter().zip(weights).map(|(t, w)| w * (t[k] - mean[k]).powi(2)).sum::<f64>())
        .collect()
}

fn pick_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Gaussian kernel truncated to the box.
struct Kernel {
    sd: Vec<f64>,
    bounds: ParamBox,
}

impl Kernel {
    fn mass_inside(&self, center: &[f64]) -> f64 {
        center
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let n = Normal::new(*c, self.sd[k]).expect("positive sd");
                n.cdf(self.bounds.upper[k]) - n.cdf(self.bounds.lower[k])
            })
            .product()
    }

    fn density(&self, x: &[f64], center: &[f64]) -> f64 {
        x.iter()
            .zip(center)
            .enumerate()
            .map(|(k, (a, c))| Normal::new(*c, self.sd[k]).expect("positive sd").pdf(*a))
            .product()
    }
}

const MAX_PERTURB_TRIES: usize = 10_000;

/// Population Monte Carlo ABC. The first level samples the prior; later
/// levels draw parents from the previous weighted population, perturb
/// them with a box-truncated Gaussian kernel of variance twice the
/// weighted population variance, and reweight by prior over proposal
/// density. The population is resampled first when its ESS drops below
/// half its size. Stops early when the budget runs out mid-level (the
/// last complete level is returned) or when the ESS falls below 2.
pub fn smc_abc(gen: &dyn Generator, x_obs: &[f64], cfg: &AbcConfig) -> Result<AbcResult> {
    cfg.validate()?;
    check_obs(gen, x_obs)?;
    let root = SeedStream::new(cfg.seed).child("smc");
    let n = cfg.population;
    let bounds = gen.bounds();
    let mut used = 0;
    let mut failed = 0;
    let mut levels: Vec<AbcLevel> = Vec::new();
    let mut current: Option<Population> = None;
    let mut diagnostic = None;

    for level in 0.. {
        let epsilon = match &cfg.schedule {
            Some(s) if level < s.len() => s[level],
            Some(_) => break,
            None if level == 0 => f64::INFINITY,
            None => {
                let pop = current.as_ref().unwrap();
                let mut d = pop.distances.clone();
                d.sort_by(f64::total_cmp);
                let next = crate::dist::quantile_sorted(&d, cfg.adaptive_quantile);
                if !(next < levels.last().unwrap().epsilon) {
                    diagnostic = Some(format!("tolerance stopped decreasing at {next}"));
                    break;
                }
                next
            }
        };
        let stream = root.child("level").index(level as u64);

        // parents for this level, resampled when degenerate
        let mut resampled = false;
        let parents = current.as_ref().map(|pop| {
            if effective_sample_size(&pop.weights) < n as f64 / 2.0 {
                resampled = true;
                let mut rng = stream.child("resample").rng();
                let thetas: Vec<Vec<f64>> =
                    (0..pop.thetas.len()).map(|_| pop.thetas[pick_index(&pop.weights, &mut rng)].clone()).collect();
                (thetas, uniform(pop.thetas.len()))
            } else {
                (pop.thetas.clone(), pop.weights.clone())
            }
        });
        let kernel = parents.as_ref().map(|(thetas, weights)| Kernel {
            sd: weighted_var(thetas, weights)
                .iter()
                .zip(bounds.widths())
                .map(|(v, w)| (2.0 * v).sqrt().max(1e-9 * w))
                .collect(),
            bounds: bounds.clone(),
        });

        let propose = |c: u64| -> (Vec<f64>, Option<f64>) {
            let s = stream.child("candidate").index(c);
            let theta = match (&parents, &kernel) {
                (Some((thetas, weights)), Some(k)) => {
                    let mut rng = s.child("theta").rng();
                    let parent = &thetas[pick_index(weights, &mut rng)];
                    let mut out = parent.clone();
                    for _ in 0..MAX_PERTURB_TRIES {
                        out = parent.iter().zip(&k.sd).map(|(p, sd)| p + sd * rng.sample::<f64, _>(StandardNormal)).collect();
                        if bounds.contains(&out) {
                            break;
                        }
                    }
                    bounds.reflect(&mut out);
                    out
                }
                _ => bounds.sample_uniform(&mut s.child("theta").rng()),
            };
            let dist = distance_at(gen, x_obs, &theta, s.child("sim").seed());
            (theta, dist)
        };

        let mut accepted: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
        let mut level_sims = 0;
        let mut next_candidate = 0u64;
        while accepted.len() < n && used < cfg.budget {
            let chunk = (n - accepted.len()).max(16).min(cfg.budget - used);
            let out: Vec<(Vec<f64>, Option<f64>)> =
                (next_candidate..next_candidate + chunk as u64).into_par_iter().map(propose).collect();
            next_candidate += chunk as u64;
            used += chunk;
            level_sims += chunk;
            for (theta, d) in out {
                match d {
                    None => failed += 1,
                    Some(d) if d < epsilon && accepted.len() < n => accepted.push((theta, d)),
                    Some(_) => {}
                }
            }
        }
        if accepted.len() < n {
            diagnostic = Some(format!("budget exhausted during level {} (epsilon {epsilon})", level + 1));
            if current.is_none() && !accepted.is_empty() {
                let k = accepted.len();
                levels.push(AbcLevel { epsilon, ess: k as f64, acceptance_rate: k as f64 / level_sims as f64, simulations: level_sims, resampled });
                let (thetas, distances) = accepted.into_iter().unzip();
                current = Some(Population { thetas, weights: uniform(k), distances });
            }
            break;
        }

        let weights = match (&parents, &kernel) {
            (Some((thetas, pw)), Some(k)) => {
                let mass: Vec<f64> = thetas.iter().map(|t| k.mass_inside(t)).collect();
                let raw: Vec<f64> = accepted
                    .par_iter()
                    .map(|(theta, _)| {
                        let q: f64 = thetas.iter().zip(pw).zip(&mass).map(|((p, w), m)| w * k.density(theta, p) / m).sum();
                        1.0 / q
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|w| w / total).collect()
            }
            _ => uniform(n),
        };
        let ess = effective_sample_size(&weights);
        levels.push(AbcLevel { epsilon, ess, acceptance_rate: n as f64 / level_sims as f64, simulations: level_sims, resampled });
        let (thetas, distances) = accepted.into_iter().unzip();
        current = Some(Population { thetas, weights, distances });
        if ess < 2.0 {
            diagnostic = Some(format!("population collapsed (ess {ess:.3}) at level {}", level + 1));
            break;
        }
    }

    let Some(pop) = current else {
        return Ok(AbcResult::empty(used, failed, diagnostic.unwrap_or_else(|| "no level completed".into())));
    };
    let last = levels.last().unwrap();
    Ok(AbcResult {
        epsilon: last.epsilon,
        acceptance_rate: last.acceptance_rate,
        samples: pop.thetas,
        weights: pop.weights,
        distances: pop.distances,
        simulations: used,
        failed_simulations: failed,
        levels,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::GaussianLocation;

    fn identity() -> GaussianLocation {
        GaussianLocation::new(1, 0.0).unwrap()
    }

    fn eps(e: f64, budget: usize) -> AbcConfig {
        AbcConfig { epsilon: Some(e), budget, ..Default::default() }
    }

    #[test]
    fn threshold_resolution() {
        assert_eq!(AbcConfig::default().threshold().unwrap(), Threshold::Quantile(0.01));
        assert_eq!(eps(0.2, 1).threshold().unwrap(), Threshold::Epsilon(0.2));
        let both = AbcConfig { epsilon: Some(0.1), quantile: Some(0.1), ..Default::default() };
        assert!(both.validate().unwrap_err().is_config());
        assert!(AbcConfig { quantile: Some(1.0), ..Default::default() }.validate().is_err());
        assert!(AbcConfig { schedule: Some(vec![0.5, 0.5]), ..Default::default() }.validate().is_err());
        assert!(AbcConfig { schedule: Some(vec![]), ..Default::default() }.validate().is_err());
        assert!(AbcConfig { budget: 0, ..Default::default() }.validate().is_err());
        let parsed: AbcConfig = toml::from_str("epsilon = inf\nbudget = 5").unwrap();
        assert_eq!(parsed.threshold().unwrap(), Threshold::Epsilon(f64::INFINITY));
    }

    #[test]
    fn rejection_with_infinite_ball_keeps_everything() {
        let r = rejection_abc(&identity(), &[0.5], &eps(f64::INFINITY, 300)).unwrap();
        assert_eq!(r.samples.len(), 300);
        assert_eq!(r.acceptance_rate, 1.0);
        assert_eq!(r.simulations, 300);
    }

    #[test]
    fn rejection_respects_the_ball() {
        let r = rejection_abc(&identity(), &[0.5], &eps(0.1, 2000)).unwrap();
        assert!(!r.samples.is_empty());
        assert!(r.samples.iter().all(|t| t[0] > 0.4 && t[0] < 0.6));
        assert!(r.distances.iter().all(|d| *d < 0.1));
    }

    #[test]
    fn rejection_rate_grows_with_epsilon() {
        let rates: Vec<f64> = [0.05, 0.1, 0.5, f64::INFINITY]
            .iter()
            .map(|e| rejection_abc(&identity(), &[0.5], &eps(*e, 1000)).unwrap().acceptance_rate)
            .collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    }

    #[test]
    fn quantile_mode_keeps_the_closest_fraction() {
        let cfg = AbcConfig { quantile: Some(0.05), budget: 1000, ..Default::default() };
        let r = rejection_abc(&identity(), &[0.3], &cfg).unwrap();
        assert_eq!(r.samples.len(), 50);
        assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.epsilon, *r.distances.last().unwrap());
        let all = rejection_abc(&identity(), &[0.3], &eps(f64::INFINITY, 1000)).unwrap();
        assert_eq!(all.distances.iter().filter(|d| **d <= r.epsilon).count(), 50);
    }

    #[test]
    fn empty_acceptance_is_a_diagnostic() {
        let r = rejection_abc(&identity(), &[0.5], &eps(1e-12, 50)).unwrap();
        assert!(r.samples.is_empty());
        assert!(r.diagnostic.is_some());
        assert!(r.point_estimate().is_none());
    }

    #[test]
    fn smaller_ball_concentrates_the_sample() {
        let gen = GaussianLocation::new(1, 0.1).unwrap();
        let var = |e: f64| {
            let r = rejection_abc(&gen, &[0.5], &eps(e, 4000)).unwrap();
            let m = r.mean().unwrap()[0];
            r.samples.iter().map(|t| (t[0] - m).powi(2)).sum::<f64>() / r.samples.len() as f64
        };
        assert!(var(0.05) <= var(0.5));
    }

    #[test]
    fn mcmc_with_infinite_ball_is_a_random_walk() {
        let r = mcmc_abc(&identity(), &[0.5], &eps(f64::INFINITY, 1000)).unwrap();
        assert_eq!(r.acceptance_rate, 1.0);
        assert_eq!(r.samples.len(), 900);
        assert_eq!(r.simulations, 1000);
    }

    #[test]
    fn mcmc_stays_in_the_ball_after_first_acceptance() {
        let r = mcmc_abc(&identity(), &[0.5], &eps(0.1, 3000)).unwrap();
        let first = r.distances.iter().position(|d| *d < 0.1).unwrap();
        assert!(r.samples[first..].iter().all(|t| t[0] > 0.4 && t[0] < 0.6));
        assert!(r.acceptance_rate > 0.0 && r.acceptance_rate < 1.0);
        let q = mcmc_abc(&identity(), &[0.5], &AbcConfig { budget: 3000, ..Default::default() }).unwrap();
        assert!(q.distances.iter().all(|d| *d <= q.epsilon));
    }

    #[test]
    fn smc_single_infinite_level_is_the_prior() {
        let cfg = AbcConfig { schedule: Some(vec![f64::INFINITY]), population: 100, ..Default::default() };
        let r = smc_abc(&identity(), &[0.5], &cfg).unwrap();
        assert_eq!(r.samples.len(), 100);
        assert!(r.weights.iter().all(|w| (w - 0.01).abs() < 1e-15));
        assert_eq!(r.simulations, 100);
        assert_eq!(r.levels.len(), 1);
    }

    #[test]
    fn smc_final_level_sits_in_the_last_ball() {
        let cfg = AbcConfig { schedule: Some(vec![0.5, 0.1]), population: 100, ..Default::default() };
        let r = smc_abc(&identity(), &[0.5], &cfg).unwrap();
        assert_eq!(r.levels.len(), 2);
        assert!(r.samples.iter().all(|t| t[0] > 0.4 && t[0] < 0.6));
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.diagnostic.is_none());
    }

    #[test]
    fn smc_adaptive_schedule_stays_in_budget() {
        let gen = GaussianLocation::new(2, 0.1).unwrap();
        let cfg = AbcConfig { population: 100, budget: 3000, ..Default::default() };
        let r = smc_abc(&gen, &[0.3, 0.7], &cfg).unwrap();
        assert!(r.simulations <= 3000);
        assert!(r.levels.len() >= 3);
        assert!(r.levels.windows(2).all(|w| w[1].epsilon < w[0].epsilon));
        assert!(r.samples.iter().all(|t| gen.bounds().contains(t)));
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn samplers_stay_in_the_box_and_repeat() {
        let gen = GaussianLocation::new(2, 0.3).unwrap();
        let cfg = AbcConfig { budget: 2000, population: 50, ..Default::default() };
        for f in [rejection_abc, mcmc_abc, smc_abc] {
            let a = f(&gen, &[0.05, 0.95], &cfg).unwrap();
            assert!(a.samples.iter().all(|t| gen.bounds().contains(t)));
            assert_eq!(a, f(&gen, &[0.05, 0.95], &cfg).unwrap());
        }
    }
}
