//! Empirical check that the REINFORCE gradient of the adversarial value
//! with respect to a Gaussian proposal vanishes as the discriminator
//! approaches the optimum against a single observation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::avo::{reinforce_gradient, AvoConfig, AvoState, ValuePair};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::SeedStream;
use crate::sim::{simulate, Generator, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Fixed proposal, `N(mean, sd^2)` on the 1-d parameter. The default
    /// sits at the quadratic toy's vertex, away from any `theta*` whose
    /// observation the discriminator is asked to isolate.
    pub mean: f64,
    pub sd: f64,
    /// Monte-Carlo samples per gradient estimate; reused at every checkpoint.
    pub samples: usize,
    /// Discriminator step counts at which the gradient is measured.
    pub checkpoints: Vec<usize>,
    /// Fresh proposal simulations per discriminator step.
    pub batch: usize,
    pub disc_lr: f64,
    pub clip: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mean: 0.5,
            sd: 0.05,
            samples: 10_000,
            checkpoints: vec![0, 10, 30, 100, 300, 1000],
            batch: 100,
            disc_lr: 1e-2,
            clip: 1.0,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

/// One unreflected proposal draw and the simulation at its reflection.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub theta: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub steps: usize,
    /// `(1 - d(x_obs)) + mean d(fake)`: zero for the ideal discriminator.
    pub distance: f64,
    pub grad_norm: f64,
}

/// Draws shared by every gradient estimate (common random numbers).
pub fn probe_samples(gen: &dyn Generator, mean: f64, sd: f64, n: usize, stream: SeedStream) -> Result<Vec<ProbeSample>> {
    if gen.dim() != 1 {
        return Err(Error::UnsupportedDimension(gen.dim()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = stream.index(i as u64);
            let z: f64 = rand::Rng::sample(&mut s.child("theta").rng(), rand_distr::StandardNormal);
            let theta = vec![mean + sd * z];
            let mut reflected = theta.clone();
            gen.bounds().reflect(&mut reflected);
            let summary = simulate(gen, &reflected, s.child("sim").seed())?;
            Ok(ProbeSample { theta, summary })
        })
        .collect()
}

/// Norm of the REINFORCE estimate of `grad_psi E b(critic(g(theta, u)))`
/// with `psi = (mean, log sd)`.
pub fn probe_gradient_norm<C>(samples: &[ProbeSample], mean: f64, sd: f64, pair: ValuePair, critic: C) -> Result<f64>
where
    C: Fn(&[f64]) -> Result<f64> + Sync,
{
    let rewards: Vec<f64> = samples.par_iter().map(|s| Ok(pair.b(critic(&s.summary)?))).collect::<Result<_>>()?;
    let draws: Vec<Vec<f64>> = samples.iter().map(|s| s.theta.clone()).collect();
    let (gm, gs) = reinforce_gradient(&[mean], &[sd], &draws, &rewards, 0.0);
    Ok((gm[0] * gm[0] + gs[0] * gs[0]).sqrt())
}

/// Train a discriminator on `x_obs` against fresh proposal batches and
/// measure the gradient norm at each checkpoint.
pub fn gradient_vanishing_probe(gen: &dyn Generator, x_obs: &[f64], pair: ValuePair, cfg: &ProbeConfig) -> Result<Vec<ProbePoint>> {
    if !(cfg.sd > 0.0) || cfg.samples == 0 || cfg.batch == 0 {
        return Err(Error::Config("probe needs sd > 0 and at least one sample".into()));
    }
    if cfg.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("probe checkpoints must be strictly increasing".into()));
    }
    let root = SeedStream::new(cfg.seed).child("probe");
    let samples = probe_samples(gen, cfg.mean, cfg.sd, cfg.samples, root.child("mc"))?;
    let avo_cfg = AvoConfig {
        value: pair,
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
        clip: cfg.clip,
        init_mean: None,
        seed: cfg.seed,
        ..AvoConfig::default()
    };
    let mut state = AvoState::new(&avo_cfg, gen.bounds(), x_obs)?;
    state.mean = vec![cfg.mean];
    state.log_sd = vec![cfg.sd.ln()];
    let fakes: Vec<Summary> = samples.iter().take(cfg.batch.max(100)).map(|s| s.summary.clone()).collect();
    let mut rows = fakes.clone();
    rows.push(x_obs.to_vec());
    state.discriminator = state.discriminator.clone().with_input_norm(crate::nn::InputNorm::fit(&rows)?)?;

    let mut series = Vec::with_capacity(cfg.checkpoints.len());
    let mut done = 0;
    for &target in &cfg.checkpoints {
        while done < target {
            let draws = state.sample(cfg.batch, root.child("train").index(done as u64));
            let batch: Vec<Summary> = draws
                .par_iter()
                .enumerate()
                .map(|(i, raw)| {
                    let mut theta = raw.clone();
                    gen.bounds().reflect(&mut theta);
                    simulate(gen, &theta, root.child("train-sim").index(done as u64).index(i as u64).seed())
                })
                .collect::<Result<_>>()?;
            state.train_discriminator(&batch, pair, 1, cfg.disc_lr, cfg.clip)?;
            done += 1;
        }
        let net = &state.discriminator;
        let grad_norm = probe_gradient_norm(&samples, cfg.mean, cfg.sd, pair, |x| net.score(x))?;
        let fake_mean = samples.par_iter().map(|s| net.score(&s.summary)).collect::<Result<Vec<f64>>>()?.iter().sum::<f64>()
            / samples.len() as f64;
        let distance = 1.0 - net.score(x_obs)? + fake_mean;
        series.push(ProbePoint { steps: target, distance, grad_norm });
    }
    Ok(series)
}
