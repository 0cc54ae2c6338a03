//! Adversarial variational optimization with a diagonal Gaussian proposal
//! over simulator parameters, trained by REINFORCE against a discriminator
//! that sees the single observation as its only real sample.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alfi::PhaseTimings;
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, Gradients, Head, InputNorm, Network, OptimizerState};
use crate::rng::SeedStream;
use crate::sim::{simulate, Generator, ParamBox, Summary};

/// The `(a, b)` pair of the value `V = a(d(x_obs)) + E b(d(x_fake))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePair {
    /// `a = log t`, `b = log(1 - t)`.
    Vanilla,
    /// `a = t`, `b = -t`.
    Wasserstein,
}

impl ValuePair {
    pub fn a(self, t: f64) -> f64 {
        match self {
            ValuePair::Vanilla => t.ln(),
            ValuePair::Wasserstein => t,
        }
    }

    pub fn b(self, t: f64) -> f64 {
        match self {
            ValuePair::Vanilla => (-t).ln_1p(),
            ValuePair::Wasserstein => -t,
        }
    }

    pub fn da(self, t: f64) -> f64 {
        match self {
            ValuePair::Vanilla => 1.0 / t,
            ValuePair::Wasserstein => 1.0,
        }
    }

    pub fn db(self, t: f64) -> f64 {
        match self {
            ValuePair::Vanilla => -1.0 / (1.0 - t),
            ValuePair::Wasserstein => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValuePair::Vanilla => "vanilla",
            ValuePair::Wasserstein => "wasserstein",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvoConfig {
    pub value: ValuePair,
    pub iterations: usize,
    /// Proposal draws (one simulation each) per iteration.
    pub batch: usize,
    /// Step size for the proposal parameters.
    pub lr: f64,
    pub disc_lr: f64,
    pub disc_steps: usize,
    /// Weight clip for the Wasserstein pair; ignored for vanilla.
    pub clip: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Subtract the batch-mean reward before forming the gradient.
    pub baseline: bool,
    /// Initial proposal mean; drawn uniformly from the central 80% of the
    /// box (from the seed) when absent.
    pub init_mean: Option<Vec<f64>>,
    /// Initial proposal standard deviation as a fraction of box width.
    pub init_sd_fraction: f64,
    pub seed: u64,
}

impl Default for AvoConfig {
    fn default() -> Self {
        AvoConfig {
            value: ValuePair::Wasserstein,
            iterations: 100,
            batch: 100,
            lr: 0.5,
            disc_lr: 1e-3,
            disc_steps: 5,
            clip: 0.1,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            baseline: false,
            init_mean: None,
            init_sd_fraction: 0.25,
            seed: 0,
        }
    }
}

pub const SIGMA_FLOOR: f64 = 1e-4;

impl AvoConfig {
    pub fn validate(&self, bounds: &ParamBox) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("avo iterations, batch and hidden widths must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.disc_lr >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("avo learning rates must be non-negative and clip positive".into()));
        }
        if !(self.init_sd_fraction > 0.0) {
            return Err(Error::Config("init_sd_fraction must be positive".into()));
        }
        if let Some(m) = &self.init_mean {
            bounds.check(m).map_err(|e| Error::Config(format!("init_mean: {e}")))?;
        }
        Ok(())
    }
}

/// Score-function estimate of `grad_psi E[r(theta)]` for
/// `theta ~ N(mean, diag(sd^2))`, `psi = (mean, log sd)`. `draws` are the
/// raw draws. Returns `(grad_mean, grad_log_sd)`.
pub fn reinforce_gradient(mean: &[f64], sd: &[f64], draws: &[Vec<f64>], rewards: &[f64], baseline: f64) -> (Vec<f64>, Vec<f64>) {
    let d = mean.len();
    let n = draws.len() as f64;
    let mut g_mean = vec![0.0; d];
    let mut g_log_sd = vec![0.0; d];
    for (theta, r) in draws.iter().zip(rewards) {
        for k in 0..d {
            let z = (theta[k] - mean[k]) / sd[k];
            g_mean[k] += (r - baseline) * z / sd[k] / n;
            g_log_sd[k] += (r - baseline) * (z * z - 1.0) / n;
        }
    }
    (g_mean, g_log_sd)
}

#[derive(Debug, Clone)]
pub struct AvoState {
    pub mean: Vec<f64>,
    pub log_sd: Vec<f64>,
    pub discriminator: Network,
    pub disc_opt: OptimizerState,
    pub x_obs: Summary,
    pub bounds: ParamBox,
    /// Set once the standard deviation hit [`SIGMA_FLOOR`].
    pub sd_clamped: bool,
}

impl AvoState {
    pub fn new(cfg: &AvoConfig, bounds: &ParamBox, x_obs: &[f64]) -> Result<Self> {
        cfg.validate(bounds)?;
        let dims: Vec<usize> = std::iter::once(x_obs.len()).chain(cfg.hidden.iter().copied()).chain([1]).collect();
        let mut discriminator =
            Network::new(&dims, cfg.activation, Head::SigmoidScalar, &mut SeedStream::new(cfg.seed).child("avo-discriminator").rng())?;
        if cfg.value == ValuePair::Wasserstein {
            discriminator.clip_weights(cfg.clip);
        }
        let mean = match &cfg.init_mean {
            Some(m) => m.clone(),
            None => bounds.sample_central(0.8, &mut SeedStream::new(cfg.seed).child("avo-init").rng()),
        };
        Ok(AvoState {
            mean,
            log_sd: bounds.widths().iter().map(|w| (w * cfg.init_sd_fraction).ln()).collect(),
            disc_opt: OptimizerState::new(&discriminator),
            discriminator,
            x_obs: x_obs.to_vec(),
            bounds: bounds.clone(),
            sd_clamped: false,
        })
    }

    pub fn sd(&self) -> Vec<f64> {
        self.log_sd.iter().map(|l| l.exp()).collect()
    }

    /// Proposal mean clamped into the box, used as the point estimate.
    pub fn estimate(&self) -> Vec<f64> {
        self.mean.iter().enumerate().map(|(k, m)| m.clamp(self.bounds.lower[k], self.bounds.upper[k])).collect()
    }

    /// Steps ascending `a(d(x_obs)) + mean b(d(fake))`.
    pub fn train_discriminator(&mut self, fakes: &[Summary], pair: ValuePair, steps: usize, lr: f64, clip: f64) -> Result<f64> {
        let w = 1.0 / fakes.len() as f64;
        let mut value = 0.0;
        for _ in 0..steps {
            let net = &self.discriminator;
            let (real, cache) = net.forward_cached(&self.x_obs)?;
            let (mut grads, _) = net.backward(&cache, &[-pair.da(real[0])])?;
            let parts: Vec<(f64, Gradients)> = fakes
                .par_iter()
                .map(|x| {
                    let (out, cache) = net.forward_cached(x)?;
                    let (g, _) = net.backward(&cache, &[-w * pair.db(out[0])])?;
                    Ok((pair.b(out[0]), g))
                })
                .collect::<Result<_>>()?;
            value = pair.a(real[0]);
            for (b, g) in &parts {
                value += w * b;
                grads.add_scaled(g, 1.0);
            }
            adam_step(&mut self.discriminator, &grads, &mut self.disc_opt, lr)?;
            if pair == ValuePair::Wasserstein {
                self.discriminator.clip_weights(clip);
            }
        }
        Ok(value)
    }

    /// One natural-gradient descent step on `E b(d(g(theta)))`: the
    /// REINFORCE gradient is preconditioned by the inverse Fisher
    /// information `diag(sd^2, 1/2)`, which keeps the update unbiased and
    /// invariant to the proposal scale.
    pub fn proposal_step(&mut self, draws: &[Vec<f64>], rewards: &[f64], lr: f64, baseline: bool) {
        let sd = self.sd();
        let b = if baseline { rewards.iter().sum::<f64>() / rewards.len() as f64 } else { 0.0 };
        let (g_mean, g_log_sd) = reinforce_gradient(&self.mean, &sd, draws, rewards, b);
        for k in 0..self.mean.len() {
            self.mean[k] -= lr * sd[k] * sd[k] * g_mean[k];
            self.mean[k] = self.mean[k].clamp(self.bounds.lower[k], self.bounds.upper[k]);
            self.log_sd[k] -= lr * 0.5 * g_log_sd[k];
            if self.log_sd[k] < SIGMA_FLOOR.ln() {
                self.log_sd[k] = SIGMA_FLOOR.ln();
                self.sd_clamped = true;
            }
            let cap = self.bounds.width(k).ln();
            self.log_sd[k] = self.log_sd[k].min(cap);
        }
    }

    /// Draw `n` raw (unclamped) proposals.
    pub fn sample(&self, n: usize, stream: SeedStream) -> Vec<Vec<f64>> {
        let sd = self.sd();
        let mut rng = stream.rng();
        (0..n)
            .map(|_| self.mean.iter().zip(&sd).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoStep {
    pub iteration: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct AvoResult {
    pub trajectory: Vec<AvoStep>,
    pub state: AvoState,
    pub simulations: usize,
    pub failed_simulations: usize,
    pub timings: PhaseTimings,
    /// Samples from the final proposal, clamped to the box.
    pub final_samples: Vec<Vec<f64>>,
}

/// Nearest point of the box.
pub fn clamp_to_box(bounds: &ParamBox, theta: &[f64]) -> Vec<f64> {
    theta.iter().enumerate().map(|(k, t)| t.clamp(bounds.lower[k], bounds.upper[k])).collect()
}

/// Alternate discriminator training and proposal updates for
/// `cfg.iterations` rounds of `cfg.batch` simulations. Proposals outside
/// the box are clamped to it before simulation; the score function uses
/// the raw draw.
pub fn avo_run(gen: &dyn Generator, x_obs: &[f64], cfg: &AvoConfig) -> Result<AvoResult> {
    if x_obs.len() != gen.summary_dim() {
        return Err(Error::Shape { expected: gen.summary_dim(), got: x_obs.len() });
    }
    let mut state = AvoState::new(cfg, gen.bounds(), x_obs)?;
    let root = SeedStream::new(cfg.seed).child("avo");
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut timings = PhaseTimings::default();
    let (mut simulations, mut failed) = (0, 0);
    for t in 0..cfg.iterations {
        let stream = root.index(t as u64);
        let clock = Instant::now();
        let draws = state.sample(cfg.batch, stream.child("theta"));
        timings.sample += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let sims = stream.child("sim");
        let outcomes: Vec<Option<Summary>> = draws
            .par_iter()
            .enumerate()
            .map(|(i, raw)| {
                let theta = clamp_to_box(gen.bounds(), raw);
                simulate(gen, &theta, sims.index(i as u64).seed())
                    .map_err(|e| log::warn!("avo simulation failed: {e}"))
                    .ok()
            })
            .collect();
        timings.simulate += clock.elapsed().as_secs_f64();
        simulations += draws.len();
        let (kept, fakes): (Vec<Vec<f64>>, Vec<Summary>) =
            draws.into_iter().zip(outcomes).filter_map(|(d, o)| o.map(|x| (d, x))).unzip();
        failed += cfg.batch - kept.len();
        if kept.is_empty() {
            return Err(Error::Simulation { theta: state.mean.clone(), msg: "every avo simulation failed".into() });
        }

        let clock = Instant::now();
        if state.discriminator.input_norm.is_none() {
            let mut rows = fakes.clone();
            rows.push(state.x_obs.clone());
            state.discriminator = state.discriminator.clone().with_input_norm(InputNorm::fit(&rows)?)?;
        }
        let value = state.train_discriminator(&fakes, cfg.value, cfg.disc_steps, cfg.disc_lr, cfg.clip)?;
        let rewards: Vec<f64> =
            fakes.par_iter().map(|x| Ok(cfg.value.b(state.discriminator.score(x)?))).collect::<Result<_>>()?;
        state.proposal_step(&kept, &rewards, cfg.lr, cfg.baseline);
        timings.optimize += clock.elapsed().as_secs_f64();
        trajectory.push(AvoStep { iteration: t + 1, mean: state.mean.clone(), sd: state.sd(), value });
    }
    let final_samples = state.sample(cfg.batch, root.child("final")).iter().map(|d| clamp_to_box(gen.bounds(), d)).collect();
    Ok(AvoResult { trajectory, state, simulations, failed_simulations: failed, timings, final_samples })
}
