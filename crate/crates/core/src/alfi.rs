//! Adversarial likelihood-free inference.
//!
//! Each outer iteration runs three phases over an ensemble of particles:
//!
//! 1. `m_inner` Metropolis-Hastings steps per particle, accepting with the
//!    ratio of encoder densities evaluated at the observation's
//!    discriminator score,
//! 2. one simulator call per particle,
//! 3. `l_updates` alternating updates of the discriminator (Wasserstein
//!    loss against the single observation) and of the encoder (negative
//!    log-likelihood of the transformed discriminator scores).
//!
//! The estimated log-likelihood at `theta` is
//! `log f(h(d(x_obs)); s(theta)) + log |h'(d(x_obs))|`.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{self, Family, ShapeParams, Transform};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, Gradients, Head, InputNorm, Network, OptimizerState};
use crate::rng::{SeedStream, StreamRng};
use crate::sim::{simulate, Generator, ParamBox, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlfiConfig {
    pub t_outer: usize,
    pub m_inner: usize,
    pub l_updates: usize,
    pub n_particles: usize,
    /// Proposal standard deviation per dimension; defaults to a fraction
    /// `proposal_fraction` of the box width.
    pub proposal_step: Option<Vec<f64>>,
    pub proposal_fraction: f64,
    pub family: Family,
    pub disc_lr: f64,
    pub enc_lr: f64,
    pub clip: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub minibatch: usize,
    /// Number of trailing ensembles searched for the posterior mode.
    pub mode_window: usize,
    pub seed: u64,
}

impl Default for AlfiConfig {
    fn default() -> Self {
        AlfiConfig {
            t_outer: 100,
            m_inner: 5,
            l_updates: 5,
            n_particles: 100,
            proposal_step: None,
            proposal_fraction: 0.05,
            family: Family::Beta,
            disc_lr: 1e-3,
            enc_lr: 1e-2,
            clip: 0.2,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            minibatch: 128,
            mode_window: 10,
            seed: 0,
        }
    }
}

impl AlfiConfig {
    pub fn validate(&self, bounds: &ParamBox) -> Result<()> {
        let counts = [
            ("t_outer", self.t_outer),
            ("m_inner", self.m_inner),
            ("l_updates", self.l_updates),
            ("n_particles", self.n_particles),
            ("minibatch", self.minibatch),
            ("mode_window", self.mode_window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("alfi `{name}` must be at least 1")));
        }
        let step = self.step(bounds);
        if step.len() != bounds.dim() || step.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("proposal step must be positive per dimension, got {step:?}")));
        }
        if !(self.clip > 0.0) || !(self.disc_lr >= 0.0) || !(self.enc_lr >= 0.0) {
            return Err(Error::Config("clip must be positive and learning rates non-negative".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self, bounds: &ParamBox) -> Vec<f64> {
        match &self.proposal_step {
            Some(s) => s.clone(),
            None => bounds.widths().iter().map(|w| w * self.proposal_fraction).collect(),
        }
    }
}

/// The `n` Markov-chain particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub particles: Vec<Vec<f64>>,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct AlfiState {
    pub discriminator: Network,
    pub encoder: Network,
    pub disc_opt: OptimizerState,
    pub enc_opt: OptimizerState,
    pub ensemble: ParticleEnsemble,
    pub bounds: ParamBox,
    pub family: Family,
    pub x_obs: Summary,
    /// Cached discriminator score of the observation.
    pub d_obs: f64,
    pub replay: Vec<(Vec<f64>, Summary)>,
    pub boundary_hits: usize,
    /// Most recent ensembles (newest last), for mode extraction.
    pub history: VecDeque<Vec<Vec<f64>>>,
}

impl AlfiState {
    pub fn new(cfg: &AlfiConfig, bounds: &ParamBox, x_obs: &[f64]) -> Result<Self> {
        cfg.validate(bounds)?;
        if x_obs.is_empty() || x_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("observation must be a non-empty finite vector".into()));
        }
        let root = SeedStream::new(cfg.seed);
        let q = x_obs.len();
        let d = bounds.dim();
        let disc_dims: Vec<usize> = std::iter::once(q).chain(cfg.hidden.iter().copied()).chain([1]).collect();
        let enc_dims: Vec<usize> = std::iter::once(d).chain(cfg.hidden.iter().copied()).chain([2]).collect();
        let mut disc_rng = root.child("init-discriminator").rng();
        let mut discriminator = Network::new(&disc_dims, cfg.activation, Head::SigmoidScalar, &mut disc_rng)?;
        discriminator.clip_weights(cfg.clip);
        let mut enc_rng = root.child("init-encoder").rng();
        let (center, half) = bounds.center_and_halfwidth();
        let encoder = Network::new(&enc_dims, cfg.activation, Head::Shape(cfg.family), &mut enc_rng)?
            .with_input_norm(InputNorm::new(center, half)?)?;

        let mut init_rng = root.child("init-particles").rng();
        let particles = (0..cfg.n_particles).map(|_| bounds.sample_uniform(&mut init_rng)).collect();

        let mut state = AlfiState {
            disc_opt: OptimizerState::new(&discriminator),
            enc_opt: OptimizerState::new(&encoder),
            discriminator,
            encoder,
            ensemble: ParticleEnsemble { particles, iteration: 0 },
            bounds: bounds.clone(),
            family: cfg.family,
            x_obs: x_obs.to_vec(),
            d_obs: 0.5,
            replay: Vec::new(),
            boundary_hits: 0,
            history: VecDeque::new(),
        };
        state.refresh_d_obs()?;
        Ok(state)
    }

    pub fn refresh_d_obs(&mut self) -> Result<()> {
        let d = self.discriminator.score(&self.x_obs)?;
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::NonFinite(format!("discriminator score of the observation is {d}")));
        }
        self.d_obs = d;
        Ok(())
    }

    pub fn transform(&self) -> Result<Transform> {
        Transform::for_family(self.family, self.d_obs)
    }

    pub fn shapes(&self, theta: &[f64]) -> Result<ShapeParams> {
        self.encoder.shapes(theta)
    }

    /// `log f(h(d_obs); s(theta))`, the Metropolis-Hastings target up to a
    /// theta-independent constant.
    pub fn log_target(&self, theta: &[f64]) -> Result<f64> {
        let shapes = self.shapes(theta)?;
        let v = dist::shape_logpdf(&shapes, &self.transform()?, self.d_obs)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("log-density {v} for shapes {:?}", shapes.values)));
        }
        Ok(v)
    }

    /// Standardize discriminator inputs with the spread of a batch of
    /// generated summaries (plus the observation).
    pub fn fit_input_norm(&mut self, fakes: &[Summary]) -> Result<()> {
        let mut rows: Vec<Vec<f64>> = fakes.to_vec();
        rows.push(self.x_obs.clone());
        let norm = InputNorm::fit(&rows)?;
        self.discriminator = self.discriminator.clone().with_input_norm(norm)?;
        self.refresh_d_obs()
    }
}

/// Reflected Gaussian random-walk proposal.
pub fn mh_propose<R: Rng + ?Sized>(theta: &[f64], step: &[f64], bounds: &ParamBox, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = theta
        .iter()
        .zip(step)
        .map(|(t, s)| t + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    bounds.reflect(&mut out);
    out
}

/// `min(1, f(h(d_obs); s(proposed)) / f(h(d_obs); s(current)))`.
pub fn acceptance_ratio(proposed: &[f64], current: &[f64], state: &AlfiState) -> Result<f64> {
    let a = state.log_target(proposed)?;
    let b = state.log_target(current)?;
    Ok(ratio_from_logs(a, b))
}

fn ratio_from_logs(proposed: f64, current: f64) -> f64 {
    (proposed - current).min(0.0).exp()
}

/// Run `m` Metropolis-Hastings steps from `start` and return every visited state
/// (including `start`) and the number of accepted moves.
pub fn mh_chain<F>(
    start: &[f64],
    step: &[f64],
    bounds: &ParamBox,
    m: usize,
    rng: &mut StreamRng,
    log_target: F,
) -> Result<(Vec<Vec<f64>>, usize)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut current = start.to_vec();
    let mut current_lp = log_target(&current)?;
    let mut path = Vec::with_capacity(m + 1);
    path.push(current.clone());
    let mut accepted = 0;
    for _ in 0..m {
        let proposal = mh_propose(&current, step, bounds, rng);
        let lp = log_target(&proposal)?;
        let u: f64 = rng.random();
        if u < ratio_from_logs(lp, current_lp) {
            current = proposal;
            current_lp = lp;
            accepted += 1;
        }
        path.push(current.clone());
    }
    Ok((path, accepted))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl SweepStats {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Advance every particle `m` steps under an arbitrary log target; particle
/// `i` uses the substream `stream.index(i)`.
pub fn mh_sweep_with<F>(
    particles: &mut [Vec<f64>],
    step: &[f64],
    bounds: &ParamBox,
    m: usize,
    stream: SeedStream,
    log_target: F,
) -> Result<SweepStats>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let accepted = particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream.index(i as u64).rng();
            let (path, acc) = mh_chain(p, step, bounds, m, &mut rng, &log_target)?;
            *p = path.into_iter().last().expect("chain has a start");
            Ok(acc)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(SweepStats { proposals: m * particles.len(), accepted: accepted.iter().sum() })
}

/// `m` Metropolis-Hastings steps per particle with the encoder-defined ratio.
pub fn mh_sweep(state: &mut AlfiState, step: &[f64], m: usize, stream: SeedStream) -> Result<SweepStats> {
    if m == 0 {
        return Err(Error::Config("mh_sweep needs m >= 1".into()));
    }
    let mut particles = std::mem::take(&mut state.ensemble.particles);
    let bounds = state.bounds.clone();
    let shared: &AlfiState = state;
    let stats = mh_sweep_with(&mut particles, step, &bounds, m, stream, |t| shared.log_target(t));
    state.ensemble.particles = particles;
    stats
}

/// Run the generator once per particle. Particles whose simulation fails
/// are moved back to `fallback` (their position before the sweep) and
/// left out of the returned batch.
pub fn evaluate_particles(
    state: &mut AlfiState,
    gen: &dyn Generator,
    stream: SeedStream,
    fallback: Option<&[Vec<f64>]>,
) -> (Vec<(Vec<f64>, Summary)>, usize) {
    let outcomes: Vec<Result<Summary>> = state
        .ensemble
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| simulate(gen, p, stream.index(i as u64).seed()))
        .collect();
    let calls = outcomes.len();
    let mut batch = Vec::with_capacity(calls);
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(s) => batch.push((state.ensemble.particles[i].clone(), s)),
            Err(e) => {
                log::warn!("simulation for particle {i} failed: {e}");
                if let Some(prev) = fallback {
                    state.ensemble.particles[i] = prev[i].clone();
                }
            }
        }
    }
    (batch, calls)
}

/// `l` Adam steps on `-d(x_obs) + mean d(fake)`, clipping weights to
/// `[-c, c]` after each step. Returns the loss before the last step.
pub fn discriminator_update(state: &mut AlfiState, fakes: &[Summary], l: usize, lr: f64, c: f64) -> Result<f64> {
    if fakes.is_empty() {
        return Err(Error::Domain("discriminator update needs at least one generated sample".into()));
    }
    let mut loss = 0.0;
    let w = 1.0 / fakes.len() as f64;
    for _ in 0..l {
        let net = &state.discriminator;
        let (real_out, real_cache) = net.forward_cached(&state.x_obs)?;
        let (mut grads, _) = net.backward(&real_cache, &[-1.0])?;
        let per_fake: Vec<(f64, Gradients)> = fakes
            .par_iter()
            .map(|x| {
                let (out, cache) = net.forward_cached(x)?;
                let (g, _) = net.backward(&cache, &[w])?;
                Ok((out[0], g))
            })
            .collect::<Result<_>>()?;
        let mut fake_mean = 0.0;
        for (out, g) in &per_fake {
            fake_mean += out * w;
            grads.add_scaled(g, 1.0);
        }
        loss = -real_out[0] + fake_mean;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {loss}")));
        }
        adam_step(&mut state.discriminator, &grads, &mut state.disc_opt, lr)?;
        state.discriminator.clip_weights(c);
    }
    state.refresh_d_obs()?;
    Ok(loss)
}

/// `l` Adam steps on the negative log-likelihood of the transformed
/// discriminator scores under the encoder's shapes. The discriminator is
/// only read. Returns the loss before the last step.
pub fn encoder_update(state: &mut AlfiState, batch: &[(Vec<f64>, Summary)], l: usize, lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("encoder update needs a non-empty batch".into()));
    }
    let transform = state.transform()?;
    let family = state.family;
    let mut hits = 0;
    let mut targets = Vec::with_capacity(batch.len());
    for (_, x) in batch {
        let (z, clamped) = dist::family_target(family, &transform, state.discriminator.score(x)?)?;
        hits += clamped as usize;
        targets.push(z);
    }
    state.boundary_hits += hits;

    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for _ in 0..l {
        let net = &state.encoder;
        let parts: Vec<(f64, Gradients)> = batch
            .par_iter()
            .zip(&targets)
            .map(|((theta, _), &z)| {
                let (out, cache) = net.forward_cached(theta)?;
                let shapes = ShapeParams::new(family, [out[0], out[1]])?;
                let lp = match family {
                    Family::Beta => dist::beta_logpdf(z, out[0], out[1])?,
                    Family::Gaussian => dist::gaussian_logpdf(z, out[0], out[1])?,
                };
                let score = dist::shape_score(&shapes, z);
                let (g, _) = net.backward(&cache, &[-w * score[0], -w * score[1]])?;
                Ok((lp, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = Gradients::zeros_like(net);
        loss = 0.0;
        for (lp, g) in &parts {
            loss -= lp * w;
            grads.add_scaled(g, 1.0);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("encoder loss {loss}")));
        }
        adam_step(&mut state.encoder, &grads, &mut state.enc_opt, lr)?;
    }
    Ok(loss)
}

/// Estimated `log p(x_obs | theta)`, including the Jacobian of `h`.
pub fn estimate_loglik(state: &AlfiState, theta: &[f64]) -> Result<f64> {
    state.bounds.check(theta)?;
    let shapes = state.shapes(theta)?;
    let v = dist::family_logpdf(&shapes, &state.transform()?, state.d_obs)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("log-likelihood {v} for shapes {:?}", shapes.values)));
    }
    Ok(v)
}

/// Candidate set for the mode: the final ensemble first, then earlier
/// ensembles from newest to oldest.
pub fn mode_candidates(state: &AlfiState) -> Vec<Vec<f64>> {
    let mut out = state.ensemble.particles.clone();
    for snapshot in state.history.iter().rev().skip(1) {
        out.extend(snapshot.iter().cloned());
    }
    out
}

/// Candidate maximizing [`estimate_loglik`]; ties go to the lowest index.
pub fn posterior_mode(state: &AlfiState) -> Result<Vec<f64>> {
    let candidates = mode_candidates(state);
    argmax_by(&candidates, |t| estimate_loglik(state, t))
}

pub fn argmax_by<F>(candidates: &[Vec<f64>], score: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Domain("no candidates for the mode".into()));
    }
    let scores: Vec<f64> = candidates.par_iter().map(|c| score(c)).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best].clone())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub simulate: f64,
    pub sample: f64,
    pub optimize: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub simulations: usize,
    pub mh_decisions: usize,
    pub disc_steps: usize,
    pub enc_steps: usize,
    pub failed_simulations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub acceptance_rate: f64,
    pub loss_d: f64,
    pub loss_s: f64,
    pub d_obs: f64,
}

#[derive(Debug, Clone)]
pub struct AlfiResult {
    /// Ensemble after the MH phase of every iteration.
    pub trace: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub mode: Option<Vec<f64>>,
    pub timings: PhaseTimings,
    pub counts: Counts,
    pub state: AlfiState,
    /// Set when the loop stopped early; everything above holds the partial run.
    pub aborted: Option<String>,
}

impl AlfiResult {
    pub fn final_ensemble(&self) -> &[Vec<f64>] {
        &self.state.ensemble.particles
    }
}

/// The full adversarial inference loop.
pub fn run(cfg: &AlfiConfig, gen: &dyn Generator, x_obs: &[f64]) -> Result<AlfiResult> {
    if x_obs.len() != gen.summary_dim() {
        return Err(Error::Shape { expected: gen.summary_dim(), got: x_obs.len() });
    }
    let mut state = AlfiState::new(cfg, gen.bounds(), x_obs)?;
    let step = cfg.step(gen.bounds());
    let root = SeedStream::new(cfg.seed);
    let mut result = AlfiResult {
        trace: Vec::with_capacity(cfg.t_outer),
        diagnostics: Vec::with_capacity(cfg.t_outer),
        mode: None,
        timings: PhaseTimings::default(),
        counts: Counts::default(),
        state: state.clone(),
        aborted: None,
    };
    for t in 0..cfg.t_outer {
        match iterate(cfg, gen, &mut state, &step, root.child("iteration").index(t as u64), t, &mut result) {
            Ok(diag) => result.diagnostics.push(diag),
            Err(e) => {
                log::error!("alfi stopped at iteration {t}: {e}");
                result.aborted = Some(e.to_string());
                break;
            }
        }
    }
    result.mode = posterior_mode(&state).ok();
    result.state = state;
    Ok(result)
}

fn iterate(
    cfg: &AlfiConfig,
    gen: &dyn Generator,
    state: &mut AlfiState,
    step: &[f64],
    stream: SeedStream,
    t: usize,
    result: &mut AlfiResult,
) -> Result<IterationDiagnostics> {
    let before = state.ensemble.particles.clone();

    let clock = Instant::now();
    let stats = mh_sweep(state, step, cfg.m_inner, stream.child("mh"))?;
    result.timings.sample += clock.elapsed().as_secs_f64();
    result.counts.mh_decisions += stats.proposals;
    state.ensemble.iteration = t + 1;

    let clock = Instant::now();
    let (batch, calls) = evaluate_particles(state, gen, stream.child("simulate"), Some(&before));
    result.timings.simulate += clock.elapsed().as_secs_f64();
    result.counts.simulations += calls;
    result.counts.failed_simulations += calls - batch.len();

    result.trace.push(state.ensemble.particles.clone());
    state.history.push_back(state.ensemble.particles.clone());
    while state.history.len() > cfg.mode_window {
        state.history.pop_front();
    }
    if batch.is_empty() {
        return Err(Error::Simulation { theta: Vec::new(), msg: "every simulation in the iteration failed".into() });
    }

    let clock = Instant::now();
    let fakes: Vec<Summary> = batch.iter().map(|(_, s)| s.clone()).collect();
    if state.discriminator.input_norm.is_none() {
        state.fit_input_norm(&fakes)?;
    }
    state.replay.extend(batch);

    let mut pick = stream.child("minibatch").rng();
    let (mut loss_d, mut loss_s) = (0.0, 0.0);
    for _ in 0..cfg.l_updates {
        loss_d = discriminator_update(state, &fakes, 1, cfg.disc_lr, cfg.clip)?;
        let size = cfg.minibatch.min(state.replay.len());
        let minibatch: Vec<(Vec<f64>, Summary)> = if size == state.replay.len() {
            state.replay.clone()
        } else {
            (0..size).map(|_| state.replay[pick.random_range(0..state.replay.len())].clone()).collect()
        };
        loss_s = encoder_update(state, &minibatch, 1, cfg.enc_lr)?;
        result.counts.disc_steps += 1;
        result.counts.enc_steps += 1;
    }
    result.timings.optimize += clock.elapsed().as_secs_f64();

    Ok(IterationDiagnostics {
        iteration: t + 1,
        acceptance_rate: stats.rate(),
        loss_d,
        loss_s,
        d_obs: state.d_obs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::SHAPE_FLOOR;
    use crate::nn::Activation;
    use crate::sim::{FnGenerator, GaussianLocation};
    use rand_distr::{Beta, Distribution};

    fn inv_shape(s: f64) -> f64 {
        ((s - SHAPE_FLOOR).exp() - 1.0).ln()
    }

    fn small_cfg(n: usize) -> AlfiConfig {
        AlfiConfig { n_particles: n, hidden: vec![8], ..Default::default() }
    }

    /// State on the unit interval with a zero-weight discriminator (d = 0.5
    /// everywhere) and a linear encoder `raw = w * theta + b`.
    fn linear_state(family: Family, w: [f64; 2], b: [f64; 2], particles: Vec<Vec<f64>>) -> AlfiState {
        let cfg = AlfiConfig { family, ..small_cfg(particles.len()) };
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.0]).unwrap();
        state.discriminator = Network::zeros(&[1, 1], Activation::Tanh, Head::SigmoidScalar).unwrap();
        let mut enc = Network::zeros(&[1, 2], Activation::Tanh, Head::Shape(family)).unwrap();
        enc.layers[0].weights = w.to_vec();
        enc.layers[0].biases = b.to_vec();
        state.encoder = enc;
        state.ensemble.particles = particles;
        state.refresh_d_obs().unwrap();
        state
    }

    #[test]
    fn zero_step_proposal_is_identity() {
        let mut rng = SeedStream::new(1).rng();
        let b = ParamBox::unit(2);
        assert_eq!(mh_propose(&[0.3, 0.7], &[0.0, 0.0], &b, &mut rng), vec![0.3, 0.7]);
    }

    #[test]
    fn proposal_from_lower_face_stays_inside() {
        let b = ParamBox::unit(1);
        let mut rng = SeedStream::new(2).rng();
        for _ in 0..10_000 {
            let p = mh_propose(&[0.0], &[0.5], &b, &mut rng);
            assert!(b.contains(&p));
        }
        // a large negative jump from the face mirrors into the box
        let mut x = vec![-0.3];
        b.reflect(&mut x);
        assert!((x[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reflected_proposal_is_symmetric() {
        let b = ParamBox::unit(1);
        let (a, c, step, half) = (0.03, 0.08, 0.05, 0.01);
        let draws = 100_000;
        let hits = |from: f64, to: f64, seed: u64| {
            let mut rng = SeedStream::new(seed).rng();
            (0..draws)
                .filter(|_| (mh_propose(&[from], &[step], &b, &mut rng)[0] - to).abs() < half)
                .count() as f64
        };
        let forward = hits(a, c, 10);
        let reverse = hits(c, a, 11);
        let (p1, p2) = (forward / draws as f64, reverse / draws as f64);
        let p = 0.5 * (p1 + p2);
        let se = (2.0 * p * (1.0 - p) / draws as f64).sqrt();
        assert!(forward > 1000.0);
        assert!(((p1 - p2) / se).abs() < 4.0, "forward {p1} reverse {p2}");
    }

    #[test]
    fn beta_ratio_closed_form() {
        // shapes (1,1) at theta = 0 and (2,2) at theta = 1
        let b0 = inv_shape(1.0);
        let w = inv_shape(2.0) - b0;
        let state = linear_state(Family::Beta, [w, w], [b0, b0], vec![vec![0.5]]);
        assert_eq!(state.d_obs, 0.5);
        let s1 = state.shapes(&[1.0]).unwrap().values;
        assert!((s1[0] - 2.0).abs() < 1e-12 && (s1[1] - 2.0).abs() < 1e-12);
        assert!((acceptance_ratio(&[1.0], &[0.0], &state).unwrap() - 1.0).abs() < 1e-12);
        assert!((acceptance_ratio(&[0.0], &[1.0], &state).unwrap() - 1.0 / 1.5).abs() < 1e-12);
        assert_eq!(acceptance_ratio(&[0.4], &[0.4], &state).unwrap(), 1.0);
    }

    #[test]
    fn ratio_is_a_probability() {
        let cfg = small_cfg(4);
        let state = AlfiState::new(&cfg, &ParamBox::unit(2), &[0.1, 0.2]).unwrap();
        let mut rng = SeedStream::new(3).rng();
        for _ in 0..500 {
            let a = state.bounds.sample_uniform(&mut rng);
            let b = state.bounds.sample_uniform(&mut rng);
            let r = acceptance_ratio(&a, &b, &state).unwrap();
            assert!(r > 0.0 && r <= 1.0);
            assert_eq!(acceptance_ratio(&a, &a, &state).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_encoder_gives_pure_random_walk() {
        let particles: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 20.0]).collect();
        let mut state = linear_state(Family::Beta, [0.0, 0.0], [0.3, -0.2], particles);
        let mut rng = SeedStream::new(4).rng();
        for _ in 0..100 {
            let a = state.bounds.sample_uniform(&mut rng);
            let b = state.bounds.sample_uniform(&mut rng);
            assert_eq!(acceptance_ratio(&a, &b, &state).unwrap(), 1.0);
        }
        let stats = mh_sweep(&mut state, &[0.05], 7, SeedStream::new(5)).unwrap();
        assert_eq!(stats.proposals, 140);
        assert_eq!(stats.accepted, 140);
        assert_eq!(mh_sweep(&mut state, &[0.05], 0, SeedStream::new(5)).unwrap_err().is_config(), true);
    }

    #[test]
    fn sweep_is_deterministic_per_stream() {
        let cfg = small_cfg(30);
        let base = AlfiState::new(&cfg, &ParamBox::unit(2), &[0.1, 0.2]).unwrap();
        let run = |seed| {
            let mut s = base.clone();
            mh_sweep(&mut s, &[0.1, 0.1], 5, SeedStream::new(seed)).unwrap();
            s.ensemble.particles
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn chain_ignores_jacobian_term() {
        let cfg = AlfiConfig { family: Family::Gaussian, ..small_cfg(1) };
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.4]).unwrap();
        state.d_obs = 0.37;
        let jac = dist::h_transform(&state.transform().unwrap(), state.d_obs).unwrap().1.ln();
        assert!(jac.abs() > 0.1);
        let a = mh_chain(&[0.5], &[0.2], &state.bounds, 2000, &mut SeedStream::new(6).rng(), |t| state.log_target(t))
            .unwrap();
        let b = mh_chain(&[0.5], &[0.2], &state.bounds, 2000, &mut SeedStream::new(6).rng(), |t| {
            estimate_loglik(&state, t)
        })
        .unwrap();
        assert!(a.1 > 0);
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_calls_generator_once_per_particle() {
        let gen = FnGenerator::new("mock", ParamBox::unit(2), 2, |t: &[f64], _: &mut StreamRng| vec![t[0] * 2.0, t[1] + 1.0]);
        let cfg = small_cfg(1);
        let mut state = AlfiState::new(&cfg, gen.bounds(), &[0.0, 0.0]).unwrap();
        let (batch, calls) = evaluate_particles(&mut state, &gen, SeedStream::new(1), None);
        assert_eq!((batch.len(), calls), (1, 1));

        let cfg = small_cfg(100);
        let mut state = AlfiState::new(&cfg, gen.bounds(), &[0.0, 0.0]).unwrap();
        let (batch, calls) = evaluate_particles(&mut state, &gen, SeedStream::new(1), None);
        assert_eq!((batch.len(), calls), (100, 100));
        for (theta, s) in &batch {
            assert_eq!(s, &vec![theta[0] * 2.0, theta[1] + 1.0]);
        }
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| SeedStream::new(1).index(i).seed()).collect();
        assert_eq!(seeds.len(), 100);
    }

    #[test]
    fn failed_simulation_reverts_particle() {
        let gen = FnGenerator::new("half-broken", ParamBox::unit(1), 1, |t: &[f64], _: &mut StreamRng| {
            vec![if t[0] > 0.5 { f64::NAN } else { t[0] }]
        });
        let particles = vec![vec![0.2], vec![0.9]];
        let mut state = linear_state(Family::Beta, [0.0; 2], [0.0; 2], particles);
        let before = vec![vec![0.1], vec![0.4]];
        let (batch, calls) = evaluate_particles(&mut state, &gen, SeedStream::new(1), Some(&before));
        assert_eq!(calls, 2);
        assert_eq!(batch, vec![(vec![0.2], vec![0.2])]);
        assert_eq!(state.ensemble.particles, vec![vec![0.2], vec![0.4]]);
    }

    #[test]
    fn replicated_observation_has_zero_loss() {
        let cfg = small_cfg(2);
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.3, -1.0]).unwrap();
        let fakes = vec![state.x_obs.clone(); 5];
        let loss = discriminator_update(&mut state, &fakes, 1, 1e-3, 0.1).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn constant_discriminator_moves_toward_observation() {
        let mut state = linear_state(Family::Beta, [0.0; 2], [0.0; 2], vec![vec![0.5]]);
        state.discriminator = Network::zeros(&[1, 4, 1], Activation::Relu, Head::SigmoidScalar).unwrap();
        state.discriminator.layers[0].weights = vec![1.0, -1.0, 0.5, -0.5];
        state.x_obs = vec![1.0];
        state.refresh_d_obs().unwrap();
        let fakes = vec![vec![-1.0], vec![-2.0]];
        let loss = discriminator_update(&mut state, &fakes, 1, 1e-2, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(state.d_obs > 0.5);
    }

    #[test]
    fn discriminator_separates_distant_fakes() {
        let cfg = AlfiConfig { hidden: vec![16, 16], clip: 1.0, ..small_cfg(1) };
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.0]).unwrap();
        let fakes: Vec<Summary> = (0..50).map(|i| vec![3.0 + i as f64 / 25.0]).collect();
        discriminator_update(&mut state, &fakes, 500, 1e-2, 1.0).unwrap();
        let fake_mean: f64 = fakes.iter().map(|x| state.discriminator.score(x).unwrap()).sum::<f64>() / 50.0;
        assert!(state.d_obs - fake_mean >= 0.5, "d_obs {} fake mean {fake_mean}", state.d_obs);
        assert!(state.discriminator.max_abs_weight() <= 1.0);
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let cfg = small_cfg(10);
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.2]).unwrap();
        let batch: Vec<(Vec<f64>, Summary)> = (0..10).map(|i| (vec![i as f64 / 10.0], vec![i as f64 / 5.0])).collect();
        let fakes: Vec<Summary> = batch.iter().map(|b| b.1.clone()).collect();

        let enc = state.encoder.params();
        discriminator_update(&mut state, &fakes, 3, 1e-2, 0.1).unwrap();
        assert_eq!(enc.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), state.encoder.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let disc = state.discriminator.params();
        encoder_update(&mut state, &batch, 3, 1e-2).unwrap();
        assert_eq!(disc.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), state.discriminator.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(enc, state.encoder.params());

        let before = state.encoder.params();
        encoder_update(&mut state, &batch, 3, 0.0).unwrap();
        assert_eq!(before, state.encoder.params());
    }

    #[test]
    fn gaussian_encoder_collapses_on_constant_targets() {
        // zero-weight discriminator: every target is h(0.5) = 0 around d_obs = 0.5
        let cfg = AlfiConfig { family: Family::Gaussian, hidden: vec![8], ..Default::default() };
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.0]).unwrap();
        state.discriminator = Network::zeros(&[1, 1], Activation::Tanh, Head::SigmoidScalar).unwrap();
        state.refresh_d_obs().unwrap();
        let batch: Vec<(Vec<f64>, Summary)> = (0..20).map(|i| (vec![i as f64 / 19.0], vec![i as f64])).collect();
        let losses: Vec<f64> = (0..1200).map(|_| encoder_update(&mut state, &batch, 1, 1e-3).unwrap()).collect();
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing as f64 >= 0.95 * (losses.len() - 1) as f64, "{decreasing} decreasing steps");
        for (theta, _) in &batch {
            let s = state.shapes(theta).unwrap().values;
            assert!(s[0].abs() < 0.01, "mu {}", s[0]);
            assert!(s[1] < 0.1, "sigma {}", s[1]);
        }
    }

    #[test]
    fn beta_encoder_matches_moment_fit() {
        let cfg = AlfiConfig { hidden: vec![16], ..small_cfg(1) };
        let mut state = AlfiState::new(&cfg, &ParamBox::unit(1), &[0.0]).unwrap();
        let mut disc = Network::zeros(&[1, 1], Activation::Tanh, Head::SigmoidScalar).unwrap();
        disc.layers[0].weights = vec![1.0];
        state.discriminator = disc;
        state.refresh_d_obs().unwrap();
        let mut rng = SeedStream::new(12).rng();
        let draw = Beta::new(2.0, 5.0).unwrap();
        let ys: Vec<f64> = (0..500).map(|_| draw.sample(&mut rng)).collect();
        let batch: Vec<(Vec<f64>, Summary)> = ys.iter().map(|y| (vec![0.5], vec![(y / (1.0 - y)).ln()])).collect();
        encoder_update(&mut state, &batch, 2000, 1e-2).unwrap();
        let fitted = state.shapes(&[0.5]).unwrap().values;
        let oracle = dist::fit_beta_moments(&ys).unwrap().values;
        assert!((fitted[0] - oracle[0]).abs() < 0.5 && (fitted[1] - oracle[1]).abs() < 0.5, "{fitted:?} vs {oracle:?}");
    }

    #[test]
    fn loglik_examples() {
        let b0 = inv_shape(1.0);
        let state = linear_state(Family::Beta, [0.0; 2], [b0, b0], vec![vec![0.5]]);
        assert!(estimate_loglik(&state, &[0.3]).unwrap().abs() < 1e-12);
        let state = linear_state(Family::Gaussian, [0.0, 0.0], [0.2, 0.1], vec![vec![0.5]]);
        assert_eq!(estimate_loglik(&state, &[0.1]).unwrap(), estimate_loglik(&state, &[0.9]).unwrap());
        assert!(estimate_loglik(&state, &[1.5]).is_err());
    }

    #[test]
    fn mode_extraction_rules() {
        let state = linear_state(Family::Beta, [0.0; 2], [0.0; 2], vec![vec![0.42]]);
        assert_eq!(posterior_mode(&state).unwrap(), vec![0.42]);

        let particles: Vec<Vec<f64>> = vec![vec![0.9], vec![0.1], vec![0.5]];
        let state = linear_state(Family::Beta, [0.0; 2], [0.4, 0.4], particles.clone());
        assert_eq!(posterior_mode(&state).unwrap(), vec![0.9]);

        // encoder mean theta - 0.33 peaks the likelihood at theta = 0.33
        let mut state = linear_state(Family::Gaussian, [1.0, 0.0], [-0.33, 0.0], particles);
        state.history.push_back(vec![vec![0.2], vec![0.31]]);
        state.history.push_back(state.ensemble.particles.clone());
        assert_eq!(posterior_mode(&state).unwrap(), vec![0.31]);
        assert_eq!(mode_candidates(&state).len(), 5);
    }

    #[test]
    fn budget_accounting_single_step() {
        let gen = GaussianLocation::new(1, 0.1).unwrap();
        let cfg = AlfiConfig { t_outer: 1, n_particles: 1, m_inner: 1, l_updates: 1, hidden: vec![4], ..Default::default() };
        let r = run(&cfg, &gen, &[0.5]).unwrap();
        assert_eq!(r.counts.simulations, 1);
        assert!(r.counts.mh_decisions >= 1);
        assert_eq!((r.counts.disc_steps, r.counts.enc_steps), (1, 1));
        assert_eq!(r.diagnostics.len(), 1);
        assert!(r.mode.is_some() && r.aborted.is_none());
    }

    #[test]
    fn runs_are_reproducible_and_contained() {
        let gen = GaussianLocation::new(2, 0.1).unwrap();
        let cfg = AlfiConfig { t_outer: 6, n_particles: 20, hidden: vec![8, 8], seed: 5, ..Default::default() };
        let a = run(&cfg, &gen, &[0.3, 0.6]).unwrap();
        let b = run(&cfg, &gen, &[0.3, 0.6]).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert_eq!(a.mode, b.mode);
        assert_eq!(a.state.encoder, b.state.encoder);
        assert_eq!(a.state.discriminator, b.state.discriminator);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.counts.simulations, 6 * 20);
        assert_eq!(a.state.replay.len(), 6 * 20);
        assert!(a.trace.iter().flatten().all(|p| gen.bounds().contains(p)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let b = ParamBox::unit(1);
        let bad = [
            AlfiConfig { t_outer: 0, ..Default::default() },
            AlfiConfig { n_particles: 0, ..Default::default() },
            AlfiConfig { proposal_step: Some(vec![0.0]), ..Default::default() },
            AlfiConfig { proposal_step: Some(vec![0.1, 0.1]), ..Default::default() },
            AlfiConfig { clip: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate(&b).unwrap_err().is_config());
        }
        assert!(toml::from_str::<AlfiConfig>("t_outr = 3").is_err());
        let gen = GaussianLocation::new(1, 0.1).unwrap();
        assert!(matches!(run(&AlfiConfig::default(), &gen, &[0.1, 0.2]), Err(Error::Shape { .. })));
    }
}
