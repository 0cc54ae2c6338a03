//! Black-box generators `g(theta, u)` and the observation builder.
//!
//! A generator maps a parameter inside its box to a fixed-length summary
//! vector. The nuisance randomness `u` is an internal ChaCha stream seeded
//! per call, so `simulate(gen, theta, seed)` is a pure function.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedStream, StreamRng};

pub type Summary = Vec<f64>;

/// Compact rectangular parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Config(format!(
                "box bounds need equal non-zero lengths, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config(format!("box needs lower < upper: {lower:?} / {upper:?}")));
        }
        Ok(ParamBox { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        ParamBox { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.width(i)).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: theta.len() });
        }
        if !self.contains(theta) {
            return Err(Error::Domain(format!("theta {theta:?} outside box {:?}..{:?}", self.lower, self.upper)));
        }
        Ok(())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect()
    }

    /// Uniform draw from the central `frac` of every side.
    pub fn sample_central<R: Rng + ?Sized>(&self, frac: f64, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                let margin = 0.5 * (1.0 - frac) * (u - l);
                l + margin + frac * (u - l) * rng.random::<f64>()
            })
            .collect()
    }

    /// Fold a point back into the box by mirror reflection at the faces.
    pub fn reflect(&self, theta: &mut [f64]) {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = reflect_scalar(*t, self.lower[i], self.upper[i]);
        }
    }

    /// Map into `[-1, 1]^d`; used as the encoder input normalization.
    pub fn center_and_halfwidth(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let h = self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect();
        (c, h)
    }
}

pub fn reflect_scalar(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    if !x.is_finite() {
        return lo + 0.5 * (hi - lo);
    }
    let w = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    (lo + y).clamp(lo, hi)
}

/// A stochastic simulator with fixed internal coefficients.
pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn bounds(&self) -> &ParamBox;
    fn summary_dim(&self) -> usize;
    /// Run once with the nuisance randomness drawn from `rng`.
    /// `theta` has already been checked against the box.
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary>;

    fn dim(&self) -> usize {
        self.bounds().dim()
    }
}

pub fn simulate(gen: &dyn Generator, theta: &[f64], seed: u64) -> Result<Summary> {
    gen.bounds().check(theta)?;
    let mut rng = SeedStream::new(seed).child("u").rng();
    let out = gen.run(theta, &mut rng)?;
    if out.len() != gen.summary_dim() {
        return Err(Error::Simulation {
            theta: theta.to_vec(),
            msg: format!("summary has length {}, expected {}", out.len(), gen.summary_dim()),
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation { theta: theta.to_vec(), msg: "non-finite summary".into() });
    }
    Ok(out)
}

/// Seed used for the `j`-th repeat of [`make_observation`].
pub fn observation_seed(seed: u64, j: usize) -> u64 {
    SeedStream::new(seed).child("observation").index(j as u64).seed()
}

/// Componentwise mean of `repeats` independent runs at `theta_star`.
pub fn make_observation(gen: &dyn Generator, theta_star: &[f64], repeats: usize, seed: u64) -> Result<Summary> {
    if repeats == 0 {
        return Err(Error::Config("observation repeats must be at least 1".into()));
    }
    let runs: Vec<Summary> = (0..repeats)
        .into_par_iter()
        .map(|j| simulate(gen, theta_star, observation_seed(seed, j)))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; gen.summary_dim()];
    for r in &runs {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= repeats as f64);
    Ok(mean)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Values over a regular grid of cell centers, row-major over the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn points(&self) -> Vec<Vec<f64>> {
        match self.axes.len() {
            1 => self.axes[0].iter().map(|&x| vec![x]).collect(),
            _ => self.axes[0]
                .iter()
                .flat_map(|&a| self.axes[1].iter().map(move |&b| vec![a, b]))
                .collect(),
        }
    }

    pub fn argmin(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
            .0
    }
}

pub fn grid_axes(bounds: &ParamBox, resolution: usize) -> Result<Vec<Vec<f64>>> {
    let d = bounds.dim();
    if !(1..=2).contains(&d) {
        return Err(Error::UnsupportedDimension(d));
    }
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    Ok((0..d)
        .map(|i| {
            (0..resolution)
                .map(|k| bounds.lower[i] + (k as f64 + 0.5) / resolution as f64 * bounds.width(i))
                .collect()
        })
        .collect())
}

/// `||x_obs - g(theta, u)||_2` over a grid with one fresh run per cell.
pub fn discrepancy_map(gen: &dyn Generator, x_obs: &[f64], resolution: usize, seed: u64) -> Result<Grid> {
    let axes = grid_axes(gen.bounds(), resolution)?;
    let mut grid = Grid { axes, values: Vec::new() };
    let stream = SeedStream::new(seed).child("discrepancy");
    let points = grid.points();
    grid.values = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| simulate(gen, p, stream.index(i as u64).seed()).map(|s| euclidean(&s, x_obs)))
        .collect::<Result<_>>()?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Catalog

/// `g(theta, u) = (theta - 0.5)^2 + u`, `u ~ N(0, noise_sd^2)` on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub noise_sd: f64,
    bounds: ParamBox,
}

impl Quadratic {
    pub fn new(noise_sd: f64) -> Result<Self> {
        if !(noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd must be non-negative, got {noise_sd}")));
        }
        Ok(Quadratic { noise_sd, bounds: ParamBox::unit(1) })
    }
}

impl Generator for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        1
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        let u: f64 = rng.sample(StandardNormal);
        Ok(vec![(theta[0] - 0.5).powi(2) + self.noise_sd * u])
    }
}

/// `g(theta, u) = theta + u`, `u ~ N(0, sigma^2 I)` on the unit cube.
#[derive(Debug, Clone)]
pub struct GaussianLocation {
    pub sigma: f64,
    bounds: ParamBox,
}

impl GaussianLocation {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 || !(sigma >= 0.0) {
            return Err(Error::Config(format!("gaussian_location needs dim >= 1 and sigma >= 0, got {dim}, {sigma}")));
        }
        Ok(GaussianLocation { sigma, bounds: ParamBox::unit(dim) })
    }
}

impl Generator for GaussianLocation {
    fn name(&self) -> &str {
        "gaussian_location"
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        self.bounds.dim()
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        Ok(theta.iter().map(|t| t + self.sigma * rng.sample::<f64, _>(StandardNormal)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirSettings {
    pub population: f64,
    pub initial_infected: f64,
    pub horizon: f64,
    pub step: f64,
    pub observations: usize,
    pub noise_fraction: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for SirSettings {
    fn default() -> Self {
        SirSettings {
            population: 1000.0,
            initial_infected: 10.0,
            horizon: 40.0,
            step: 0.1,
            observations: 10,
            noise_fraction: 0.02,
            lower: vec![0.05, 0.05],
            upper: vec![1.0, 1.0],
        }
    }
}

/// Deterministic SIR dynamics (infection rate theta_1, recovery rate
/// theta_2) integrated with fixed-step RK4; the summary is I(t) at
/// equispaced times plus Gaussian observation noise.
#[derive(Debug, Clone)]
pub struct Sir {
    pub settings: SirSettings,
    bounds: ParamBox,
}

impl Sir {
    pub fn new(settings: SirSettings) -> Result<Self> {
        let bounds = ParamBox::new(settings.lower.clone(), settings.upper.clone())?;
        if bounds.dim() != 2 {
            return Err(Error::Config("sir box must be two-dimensional".into()));
        }
        let s = &settings;
        if !(s.population > 0.0 && s.initial_infected >= 0.0 && s.initial_infected <= s.population)
            || !(s.horizon > 0.0 && s.step > 0.0 && s.step <= s.horizon)
            || s.observations == 0
            || !(s.noise_fraction >= 0.0)
        {
            return Err(Error::Config(format!("invalid sir settings {s:?}")));
        }
        Ok(Sir { settings, bounds })
    }

    fn deriv(&self, beta: f64, gamma: f64, y: [f64; 3]) -> [f64; 3] {
        let n = self.settings.population;
        let infection = beta * y[0] * y[1] / n;
        let recovery = gamma * y[1];
        [-infection, infection - recovery, recovery]
    }

    /// Full RK4 trajectory `(S, I, R)` at every integration step, starting at t = 0.
    pub fn trajectory(&self, theta: &[f64]) -> Vec<[f64; 3]> {
        let s = &self.settings;
        let (beta, gamma) = (theta[0], theta[1]);
        let h = s.step;
        let steps = (s.horizon / h).round() as usize;
        let mut y = [s.population - s.initial_infected, s.initial_infected, 0.0];
        let mut out = Vec::with_capacity(steps + 1);
        out.push(y);
        let add = |a: [f64; 3], b: [f64; 3], k: f64| [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2]];
        for _ in 0..steps {
            let k1 = self.deriv(beta, gamma, y);
            let k2 = self.deriv(beta, gamma, add(y, k1, h / 2.0));
            let k3 = self.deriv(beta, gamma, add(y, k2, h / 2.0));
            let k4 = self.deriv(beta, gamma, add(y, k3, h));
            for i in 0..3 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out.push(y);
        }
        out
    }
}

impl Generator for Sir {
    fn name(&self) -> &str {
        "sir"
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        self.settings.observations
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        let s = &self.settings;
        let traj = self.trajectory(theta);
        let steps = traj.len() - 1;
        let sd = s.noise_fraction * s.population;
        let mut out = Vec::with_capacity(s.observations);
        for k in 1..=s.observations {
            let idx = ((k as f64 / s.observations as f64) * steps as f64).round() as usize;
            let infected = traj[idx.min(steps)][1];
            if !infected.is_finite() {
                return Err(Error::Simulation { theta: theta.to_vec(), msg: "sir trajectory diverged".into() });
            }
            out.push(infected + sd * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(out)
    }
}

/// Moving-average process `x_t = u_t + theta_1 u_{t-1} + theta_2 u_{t-2}`;
/// the summary is the lag-0, 1, 2 autocovariance `(1/T) sum x_t x_{t+k}`.
#[derive(Debug, Clone)]
pub struct Ma2 {
    pub length: usize,
    bounds: ParamBox,
}

impl Ma2 {
    pub fn new(length: usize) -> Result<Self> {
        if length < 3 {
            return Err(Error::Config("ma2 length must be at least 3".into()));
        }
        Ok(Ma2 { length, bounds: ParamBox::new(vec![-2.0, -1.0], vec![2.0, 1.0])? })
    }

    pub fn series(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let u: Vec<f64> = (0..self.length + 2).map(|_| rng.sample(StandardNormal)).collect();
        (2..self.length + 2).map(|t| u[t] + theta[0] * u[t - 1] + theta[1] * u[t - 2]).collect()
    }
}

impl Generator for Ma2 {
    fn name(&self) -> &str {
        "ma2"
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        3
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        let x = self.series(theta, rng);
        let t = x.len() as f64;
        Ok((0..3).map(|lag| x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / t).collect())
    }
}

/// Single-server FIFO queue. Parameters are `(service_min, service_gap,
/// arrival_rate)` with service times Uniform(service_min, service_min +
/// service_gap) and Poisson arrivals. The summary is the nine interior
/// deciles of the inter-departure times.
#[derive(Debug, Clone)]
pub struct Mg1 {
    pub customers: usize,
    bounds: ParamBox,
}

impl Mg1 {
    pub fn new(customers: usize) -> Result<Self> {
        if customers < 2 {
            return Err(Error::Config("mg1 needs at least two customers".into()));
        }
        Ok(Mg1 { customers, bounds: ParamBox::new(vec![0.0, 0.0, 0.1], vec![10.0, 10.0, 0.5])? })
    }

    pub fn inter_departures(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        let (lo, gap, rate) = (theta[0], theta[1], theta[2]);
        let arrivals = Exp::new(rate).map_err(|e| Error::Simulation { theta: theta.to_vec(), msg: e.to_string() })?;
        let service = Uniform::new_inclusive(lo, lo + gap)
            .map_err(|e| Error::Simulation { theta: theta.to_vec(), msg: e.to_string() })?;
        let mut arrival = 0.0;
        let mut last_departure = 0.0;
        let mut out = Vec::with_capacity(self.customers);
        for _ in 0..self.customers {
            arrival += arrivals.sample(rng);
            let departure = f64::max(arrival, last_departure) + service.sample(rng);
            out.push(departure - last_departure);
            last_departure = departure;
        }
        Ok(out)
    }
}

impl Generator for Mg1 {
    fn name(&self) -> &str {
        "mg1"
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        9
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        let mut gaps = self.inter_departures(theta, rng)?;
        gaps.sort_by(f64::total_cmp);
        Ok((1..=9).map(|k| crate::dist::quantile_sorted(&gaps, k as f64 / 10.0)).collect())
    }
}

/// Generator backed by a closure; handy for mocks and user extensions.
pub struct FnGenerator<F> {
    name: String,
    bounds: ParamBox,
    q: usize,
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(&[f64], &mut StreamRng) -> Summary + Send + Sync,
{
    pub fn new(name: impl Into<String>, bounds: ParamBox, q: usize, f: F) -> Self {
        FnGenerator { name: name.into(), bounds, q, f }
    }
}

impl<F> Generator for FnGenerator<F>
where
    F: Fn(&[f64], &mut StreamRng) -> Summary + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn summary_dim(&self) -> usize {
        self.q
    }
    fn run(&self, theta: &[f64], rng: &mut StreamRng) -> Result<Summary> {
        Ok((self.f)(theta, rng))
    }
}

pub const GENERATORS: &[(&str, &str)] = &[
    ("quadratic", "(theta - 0.5)^2 + N(0, 0.01^2) on [0, 1]; bimodal posterior"),
    ("gaussian_location", "theta + N(0, sigma^2 I) on [0, 1]^d; conjugate oracle"),
    ("identity", "noiseless theta -> theta on [0, 1]^d"),
    ("sir", "SIR epidemic ODE (RK4), noisy I(t) at 10 times; d = 2"),
    ("ma2", "MA(2) series of length 100, autocovariances at lags 0..2; d = 2"),
    ("mg1", "M/G/1 queue, deciles of 50 inter-departure times; d = 3"),
];

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct QuadraticParams {
    noise_sd: f64,
}
impl Default for QuadraticParams {
    fn default() -> Self {
        QuadraticParams { noise_sd: 0.01 }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LocationParams {
    dim: usize,
    sigma: f64,
}
impl Default for LocationParams {
    fn default() -> Self {
        LocationParams { dim: 1, sigma: 0.1 }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Ma2Params {
    length: usize,
}
impl Default for Ma2Params {
    fn default() -> Self {
        Ma2Params { length: 100 }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Mg1Params {
    customers: usize,
}
impl Default for Mg1Params {
    fn default() -> Self {
        Mg1Params { customers: 50 }
    }
}

fn parse<T: serde::de::DeserializeOwned>(name: &str, params: &toml::Table) -> Result<T> {
    toml::Value::Table(params.clone())
        .try_into()
        .map_err(|e| Error::Config(format!("generator `{name}`: {e}")))
}

/// Build a catalog generator by name, applying `params` overrides.
pub fn build_generator(name: &str, params: &toml::Table) -> Result<Arc<dyn Generator>> {
    Ok(match name {
        "quadratic" => Arc::new(Quadratic::new(parse::<QuadraticParams>(name, params)?.noise_sd)?),
        "gaussian_location" => {
            let p: LocationParams = parse(name, params)?;
            Arc::new(GaussianLocation::new(p.dim, p.sigma)?)
        }
        "identity" => {
            let mut p: LocationParams = parse(name, params)?;
            p.sigma = 0.0;
            Arc::new(GaussianLocation::new(p.dim, p.sigma)?)
        }
        "sir" => Arc::new(Sir::new(parse(name, params)?)?),
        "ma2" => Arc::new(Ma2::new(parse::<Ma2Params>(name, params)?.length)?),
        "mg1" => Arc::new(Mg1::new(parse::<Mg1Params>(name, params)?.customers)?),
        other => return Err(Error::Config(format!("unknown generator `{other}`"))),
    })
}
