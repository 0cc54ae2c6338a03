//! Experiment orchestration: configuration, replications, the
//! `-log ||theta* - theta_hat||` score, result files and comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alfi::{self, AlfiConfig, AlfiState, PhaseTimings};
use crate::baselines::{self, AbcConfig, AvoConfig};
use crate::dist::{self, Family};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::SeedStream;
use crate::sim::{self, build_generator, make_observation, Generator, Summary};

/// Smallest distance used by [`performance_metric`].
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// `-log ||theta* - theta_hat||_2`, with the distance floored at 1e-12.
pub fn performance_metric(theta_star: &[f64], theta_hat: &[f64]) -> Result<f64> {
    if theta_star.len() != theta_hat.len() {
        return Err(Error::Domain(format!(
            "metric needs equal dimensions, got {} and {}",
            theta_star.len(),
            theta_hat.len()
        )));
    }
    Ok(-sim::euclidean(theta_star, theta_hat).max(DISTANCE_FLOOR).ln())
}

/// A catalog generator plus its overrides. `theta_star` fixes the true
/// parameter; otherwise each replication samples one uniformly from the
/// central 80% of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(flatten)]
    pub params: toml::Table,
}

impl GeneratorSpec {
    pub fn named(name: &str) -> Self {
        GeneratorSpec { name: name.into(), theta_star: None, params: toml::Table::new() }
    }

    pub fn build(&self) -> Result<std::sync::Arc<dyn Generator>> {
        build_generator(&self.name, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Alfi(AlfiConfig),
    RejectionAbc(AbcConfig),
    McmcAbc(AbcConfig),
    SmcAbc(AbcConfig),
    Avo(AvoConfig),
    /// Named slot; not implemented.
    Bolfi,
    /// Named slot; not implemented.
    Romc,
}

pub const ALGORITHMS: &[(&str, &str)] = &[
    ("alfi", "adversarial likelihood-free inference (beta or gaussian family)"),
    ("rejection_abc", "rejection ABC, epsilon ball or best-quantile"),
    ("mcmc_abc", "ABC-MCMC with a rejection pilot"),
    ("smc_abc", "population Monte Carlo ABC"),
    ("avo", "adversarial variational optimization, Gaussian proposal"),
    ("bolfi", "reserved, not implemented"),
    ("romc", "reserved, not implemented"),
];

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Alfi(_) => "alfi",
            AlgorithmConfig::RejectionAbc(_) => "rejection_abc",
            AlgorithmConfig::McmcAbc(_) => "mcmc_abc",
            AlgorithmConfig::SmcAbc(_) => "smc_abc",
            AlgorithmConfig::Avo(_) => "avo",
            AlgorithmConfig::Bolfi => "bolfi",
            AlgorithmConfig::Romc => "romc",
        }
    }

    /// Name used in tables; ALFI variants carry their family.
    pub fn label(&self) -> String {
        match self {
            AlgorithmConfig::Alfi(c) => format!("alfi-{}", c.family.name()),
            other => other.name().to_string(),
        }
    }

    /// Simulator calls the algorithm is configured to spend.
    pub fn budget(&self) -> Option<usize> {
        match self {
            AlgorithmConfig::Alfi(c) => Some(c.t_outer * c.n_particles),
            AlgorithmConfig::RejectionAbc(c) | AlgorithmConfig::McmcAbc(c) | AlgorithmConfig::SmcAbc(c) => Some(c.budget),
            AlgorithmConfig::Avo(c) => Some(c.iterations * c.batch),
            AlgorithmConfig::Bolfi | AlgorithmConfig::Romc => None,
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            AlgorithmConfig::Alfi(c) => c.seed = seed,
            AlgorithmConfig::RejectionAbc(c) | AlgorithmConfig::McmcAbc(c) | AlgorithmConfig::SmcAbc(c) => c.seed = seed,
            AlgorithmConfig::Avo(c) => c.seed = seed,
            AlgorithmConfig::Bolfi | AlgorithmConfig::Romc => {}
        }
        out
    }

    pub fn validate(&self, gen: &dyn Generator) -> Result<()> {
        match self {
            AlgorithmConfig::Alfi(c) => c.validate(gen.bounds()),
            AlgorithmConfig::RejectionAbc(c) | AlgorithmConfig::McmcAbc(c) | AlgorithmConfig::SmcAbc(c) => c.validate(),
            AlgorithmConfig::Avo(c) => c.validate(gen.bounds()),
            AlgorithmConfig::Bolfi | AlgorithmConfig::Romc => {
                Err(Error::Config(format!("algorithm `{}` is reserved but not implemented", self.name())))
            }
        }
    }
}

fn default_repeats() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub algorithm: AlgorithmConfig,
    /// Number of replications (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(default = "default_repeats")]
    pub observation_repeats: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn replications(&self) -> usize {
        self.replications.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<std::sync::Arc<dyn Generator>> {
        let gen = self.generator.build()?;
        if self.observation_repeats == 0 {
            return Err(Error::Config("observation_repeats must be at least 1".into()));
        }
        if self.replications == Some(0) {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if let Some(t) = &self.generator.theta_star {
            gen.bounds().check(t).map_err(|e| Error::Config(format!("theta_star: {e}")))?;
        }
        self.algorithm.validate(gen.as_ref())?;
        Ok(gen)
    }
}

/// Fraction of each box side, centered, from which `theta*` is drawn.
pub const THETA_STAR_FRACTION: f64 = 0.8;

/// Seeds for one replication, all derived from the experiment seed.
#[derive(Debug, Clone, Copy)]
pub struct ReplicationSeeds {
    pub theta_star: SeedStream,
    pub observation: u64,
    pub algorithm: u64,
}

pub fn replication_seeds(seed: u64, replication: usize) -> ReplicationSeeds {
    let root = SeedStream::new(seed);
    let r = replication as u64;
    ReplicationSeeds {
        theta_star: root.child("theta-star").index(r),
        observation: root.child("observation").index(r).seed(),
        algorithm: root.child("algorithm").index(r).seed(),
    }
}

/// One row of `particles.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRow {
    pub iteration: usize,
    pub index: usize,
    pub weight: f64,
    pub theta: Vec<f64>,
}

/// Column names plus numeric rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// What one algorithm run leaves behind.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub mode: Option<Vec<f64>>,
    pub simulations: usize,
    pub timings: PhaseTimings,
    pub particles: Vec<ParticleRow>,
    pub diagnostics: Frame,
    pub networks: Vec<(String, Network)>,
    pub note: Option<String>,
    pub alfi_state: Option<Box<AlfiState>>,
}

fn weighted_rows(iteration: usize, samples: &[Vec<f64>], weights: &[f64]) -> Vec<ParticleRow> {
    samples
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (t, w))| ParticleRow { iteration, index: i, weight: *w, theta: t.clone() })
        .collect()
}

fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Run one algorithm on one observation.
pub fn run_algorithm(alg: &AlgorithmConfig, gen: &dyn Generator, x_obs: &[f64]) -> Result<Outcome> {
    alg.validate(gen)?;
    match alg {
        AlgorithmConfig::Alfi(cfg) => {
            let r = alfi::run(cfg, gen, x_obs)?;
            let n = cfg.n_particles as f64;
            let particles = r
                .trace
                .iter()
                .enumerate()
                .flat_map(|(t, ens)| weighted_rows(t + 1, ens, &vec![1.0 / n; ens.len()]))
                .collect();
            let diagnostics = Frame {
                columns: columns(&["iteration", "acceptance_rate", "loss_d", "loss_s", "d_obs"]),
                rows: r
                    .diagnostics
                    .iter()
                    .map(|d| vec![d.iteration as f64, d.acceptance_rate, d.loss_d, d.loss_s, d.d_obs])
                    .collect(),
            };
            Ok(Outcome {
                mode: r.mode.clone(),
                simulations: r.counts.simulations,
                timings: r.timings,
                particles,
                diagnostics,
                networks: vec![
                    ("discriminator".into(), r.state.discriminator.clone()),
                    ("encoder".into(), r.state.encoder.clone()),
                ],
                note: r.aborted.clone(),
                alfi_state: Some(Box::new(r.state)),
            })
        }
        AlgorithmConfig::RejectionAbc(cfg) | AlgorithmConfig::McmcAbc(cfg) | AlgorithmConfig::SmcAbc(cfg) => {
            let clock = std::time::Instant::now();
            let r = match alg {
                AlgorithmConfig::RejectionAbc(_) => baselines::rejection_abc(gen, x_obs, cfg)?,
                AlgorithmConfig::McmcAbc(_) => baselines::mcmc_abc(gen, x_obs, cfg)?,
                _ => baselines::smc_abc(gen, x_obs, cfg)?,
            };
            let timings = PhaseTimings { sample: clock.elapsed().as_secs_f64(), ..Default::default() };
            let diagnostics = if r.levels.is_empty() {
                Frame {
                    columns: columns(&["level", "epsilon", "ess", "acceptance_rate", "simulations"]),
                    rows: vec![vec![1.0, r.epsilon, r.ess(), r.acceptance_rate, r.simulations as f64]],
                }
            } else {
                Frame {
                    columns: columns(&["level", "epsilon", "ess", "acceptance_rate", "simulations"]),
                    rows: r
                        .levels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| vec![(i + 1) as f64, l.epsilon, l.ess, l.acceptance_rate, l.simulations as f64])
                        .collect(),
                }
            };
            let level = r.levels.len().max(1);
            Ok(Outcome {
                mode: r.point_estimate(),
                simulations: r.simulations,
                timings,
                particles: weighted_rows(level, &r.samples, &r.weights),
                diagnostics,
                networks: Vec::new(),
                note: r.diagnostic.clone(),
                alfi_state: None,
            })
        }
        AlgorithmConfig::Avo(cfg) => {
            let r = baselines::avo_run(gen, x_obs, cfg)?;
            let d = gen.dim();
            let mut cols = vec!["iteration".to_string(), "value".to_string()];
            cols.extend((0..d).map(|k| format!("mean_{k}")));
            cols.extend((0..d).map(|k| format!("sd_{k}")));
            let rows = r
                .trajectory
                .iter()
                .map(|s| {
                    let mut row = vec![s.iteration as f64, s.value];
                    row.extend(&s.mean);
                    row.extend(&s.sd);
                    row
                })
                .collect();
            let n = r.final_samples.len() as f64;
            Ok(Outcome {
                mode: Some(r.state.estimate()),
                simulations: r.simulations,
                timings: r.timings,
                particles: weighted_rows(cfg.iterations, &r.final_samples, &vec![1.0 / n; r.final_samples.len()]),
                diagnostics: Frame { columns: cols, rows },
                networks: vec![("discriminator".into(), r.state.discriminator.clone())],
                note: r.state.sd_clamped.then(|| "proposal sd clamped at its floor".to_string()),
                alfi_state: None,
            })
        }
        AlgorithmConfig::Bolfi | AlgorithmConfig::Romc => unreachable!("rejected by validate"),
    }
}

/// Per-replication record, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    pub x_obs: Vec<f64>,
    pub mode: Option<Vec<f64>>,
    pub performance: Option<f64>,
    pub simulations: usize,
    /// Error message when the replication failed.
    pub error: Option<String>,
    /// Non-fatal notice (early stop, empty acceptance set, ...).
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

impl Aggregate {
    pub fn from_scores(scores: &[Option<f64>]) -> Self {
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        let n = ok.len();
        let mean = (n > 0).then(|| ok.iter().sum::<f64>() / n as f64);
        let sd = mean.map(|m| {
            if n < 2 {
                0.0
            } else {
                (ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        Aggregate { mean, sd, successes: n, failures: scores.len() - n }
    }

    /// Table-1 style `mean ± sd`.
    pub fn cell(&self) -> String {
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "failed".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub generator: String,
    pub budget: Option<usize>,
    pub replications: Vec<ReplicationRecord>,
    pub performance: Aggregate,
    /// Wall-clock seconds per replication; the only non-reproducible field.
    pub timings: Vec<PhaseTimings>,
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: RunSummary,
    pub outcomes: Vec<Option<Outcome>>,
}

fn run_replication(cfg: &ExperimentConfig, gen: &dyn Generator, r: usize) -> (ReplicationRecord, Option<Outcome>, PhaseTimings) {
    let seeds = replication_seeds(cfg.seed, r);
    let theta_star = cfg
        .generator
        .theta_star
        .clone()
        .unwrap_or_else(|| gen.bounds().sample_central(THETA_STAR_FRACTION, &mut seeds.theta_star.rng()));
    let mut record = ReplicationRecord {
        replication: r,
        seed: seeds.algorithm,
        theta_star: theta_star.clone(),
        x_obs: Vec::new(),
        mode: None,
        performance: None,
        simulations: 0,
        error: None,
        note: None,
    };
    let x_obs = match make_observation(gen, &theta_star, cfg.observation_repeats, seeds.observation) {
        Ok(x) => x,
        Err(e) => {
            record.error = Some(format!("observation: {e}"));
            return (record, None, PhaseTimings::default());
        }
    };
    record.x_obs = x_obs.clone();
    match run_algorithm(&cfg.algorithm.with_seed(seeds.algorithm), gen, &x_obs) {
        Ok(outcome) => {
            record.mode = outcome.mode.clone();
            record.simulations = outcome.simulations;
            record.note = outcome.note.clone();
            match &outcome.mode {
                Some(m) => record.performance = performance_metric(&theta_star, m).ok(),
                None => record.error = Some("no point estimate".into()),
            }
            let t = outcome.timings;
            (record, Some(outcome), t)
        }
        Err(e) => {
            log::error!("replication {r} failed: {e}");
            record.error = Some(e.to_string());
            (record, None, PhaseTimings::default())
        }
    }
}

/// Run every replication (in parallel), aggregate the scores, and write
/// the result files when `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let gen = cfg.validate()?;
    run_experiment_on(cfg, gen.as_ref())
}

/// [`run_experiment`] with a caller-supplied generator in place of the
/// catalog entry named in `cfg.generator`.
pub fn run_experiment_on(cfg: &ExperimentConfig, gen: &dyn Generator) -> Result<ExperimentResult> {
    cfg.algorithm.validate(gen)?;
    let runs: Vec<(ReplicationRecord, Option<Outcome>, PhaseTimings)> =
        (0..cfg.replications()).into_par_iter().map(|r| run_replication(cfg, gen, r)).collect();
    let mut records = Vec::with_capacity(runs.len());
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut timings = Vec::with_capacity(runs.len());
    for (rec, out, t) in runs {
        records.push(rec);
        outcomes.push(out);
        timings.push(t);
    }
    let scores: Vec<Option<f64>> = records.iter().map(|r| r.performance).collect();
    let performance = Aggregate::from_scores(&scores);
    if performance.failures > 0 {
        log::warn!("{} of {} replications failed", performance.failures, records.len());
    }
    let result = ExperimentResult {
        summary: RunSummary {
            algorithm: cfg.algorithm.label(),
            generator: cfg.generator.name.clone(),
            budget: cfg.algorithm.budget(),
            replications: records,
            performance,
            timings,
        },
        outcomes,
    };
    if let Some(dir) = &cfg.out {
        write_experiment(dir, cfg, &result)?;
    }
    Ok(result)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Write `summary.json`, `particles.csv`, `diagnostics.csv`, the config
/// and network checkpoints into `dir`.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary)? + "\n")?;

    let d = result.summary.replications.first().map_or(0, |r| r.theta_star.len());
    let mut w = csv_writer(&dir.join("particles.csv"))?;
    let mut header = columns(&["replication", "iteration", "particle", "weight"]);
    header.extend((0..d).map(|k| format!("theta_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (r, out) in result.outcomes.iter().enumerate() {
        for p in out.iter().flat_map(|o| &o.particles) {
            let mut row = vec![r.to_string(), p.iteration.to_string(), p.index.to_string(), fmt(p.weight)];
            row.extend(p.theta.iter().map(|v| fmt(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("diagnostics.csv"))?;
    let first = result.outcomes.iter().flatten().next();
    let mut header = vec!["replication".to_string()];
    header.extend(first.map(|o| o.diagnostics.columns.clone()).unwrap_or_default());
    w.write_record(&header).map_err(csv_err)?;
    for (r, out) in result.outcomes.iter().enumerate() {
        for row in out.iter().flat_map(|o| &o.diagnostics.rows) {
            let mut line = vec![r.to_string()];
            line.extend(row.iter().map(|v| fmt(*v)));
            w.write_record(&line).map_err(csv_err)?;
        }
    }
    w.flush()?;

    let nets = dir.join("networks");
    for (r, out) in result.outcomes.iter().enumerate() {
        for (name, net) in out.iter().flat_map(|o| &o.networks) {
            fs::create_dir_all(&nets)?;
            net.save(&nets.join(format!("rep{r:03}_{name}.json")))?;
        }
    }
    Ok(())
}

/// One (algorithm, generator) cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub algorithm: String,
    pub generator: String,
    pub performance: Aggregate,
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub cells: Vec<Cell>,
    /// Parallel to `cells`: highest mean for its generator (ties share).
    pub best: Vec<bool>,
}

/// Flag the best mean per generator; equal means are all flagged.
pub fn compare_table(cells: &[Cell]) -> Result<Table> {
    if cells.is_empty() {
        return Err(Error::Domain("comparison table needs at least one cell".into()));
    }
    let mut top: BTreeMap<&str, f64> = BTreeMap::new();
    for c in cells {
        if let Some(m) = c.performance.mean {
            let e = top.entry(c.generator.as_str()).or_insert(f64::NEG_INFINITY);
            *e = e.max(m);
        }
    }
    let best = cells
        .iter()
        .map(|c| match (c.performance.mean, top.get(c.generator.as_str())) {
            (Some(m), Some(t)) => m == *t,
            _ => false,
        })
        .collect();
    Ok(Table { cells: cells.to_vec(), best })
}

impl Table {
    fn generators(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.generator) {
                out.push(c.generator.clone());
            }
        }
        out
    }

    fn algorithms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.algorithm) {
                out.push(c.algorithm.clone());
            }
        }
        out
    }

    /// Long format, one line per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["generator", "algorithm", "mean", "sd", "successes", "failures", "budget", "best"])
            .map_err(csv_err)?;
        for (c, b) in self.cells.iter().zip(&self.best) {
            let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
            w.write_record([
                c.generator.clone(),
                c.algorithm.clone(),
                opt(c.performance.mean),
                opt(c.performance.sd),
                c.performance.successes.to_string(),
                c.performance.failures.to_string(),
                c.budget.map(|b| b.to_string()).unwrap_or_default(),
                b.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    /// Algorithms down, generators across; the best cell per column is
    /// marked with `*`.
    pub fn to_text(&self) -> String {
        let gens = self.generators();
        let algs = self.algorithms();
        let mut grid = vec![std::iter::once("algorithm".to_string()).chain(gens.iter().cloned()).collect::<Vec<_>>()];
        for a in &algs {
            let mut row = vec![a.clone()];
            for g in &gens {
                let text = self
                    .cells
                    .iter()
                    .zip(&self.best)
                    .find(|(c, _)| &c.algorithm == a && &c.generator == g)
                    .map(|(c, b)| format!("{}{}", c.performance.cell(), if *b { " *" } else { "" }))
                    .unwrap_or_else(|| "-".into());
                row.push(text);
            }
            grid.push(row);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &grid {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Several algorithms on several generators with shared observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub generators: Vec<GeneratorSpec>,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(default = "default_repeats")]
    pub observation_repeats: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Permit algorithms with different simulation budgets in one table.
    #[serde(default)]
    pub allow_unequal_budgets: bool,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentConfig>> {
        if self.generators.is_empty() || self.algorithms.is_empty() {
            return Err(Error::Config("bench needs at least one generator and one algorithm".into()));
        }
        let labels: Vec<String> = self.algorithms.iter().map(|a| a.label()).collect();
        if let Some(dup) = labels.iter().enumerate().find(|(i, l)| labels[..*i].contains(l)) {
            return Err(Error::Config(format!("duplicate algorithm `{}`", dup.1)));
        }
        let budgets: Vec<Option<usize>> = self.algorithms.iter().map(|a| a.budget()).collect();
        if !self.allow_unequal_budgets && budgets.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config(format!(
                "simulation budgets differ across algorithms ({budgets:?}); set allow_unequal_budgets = true to compare anyway"
            )));
        }
        let mut out = Vec::new();
        for g in &self.generators {
            for a in &self.algorithms {
                let cfg = ExperimentConfig {
                    generator: g.clone(),
                    algorithm: a.clone(),
                    replications: self.replications,
                    observation_repeats: self.observation_repeats,
                    out: self.out.as_ref().map(|o| o.join(&g.name).join(a.label())),
                    seed: self.seed,
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// Run a study and write `table.csv` / `table.txt` when `out` is set.
pub fn run_bench(cfg: &BenchConfig) -> Result<(Table, Vec<ExperimentResult>)> {
    let experiments = cfg.experiments()?;
    let mut results = Vec::with_capacity(experiments.len());
    let mut cells = Vec::with_capacity(experiments.len());
    for e in &experiments {
        log::info!("running {} on {}", e.algorithm.label(), e.generator.name);
        let r = run_experiment(e)?;
        cells.push(Cell {
            algorithm: r.summary.algorithm.clone(),
            generator: r.summary.generator.clone(),
            performance: r.summary.performance,
            budget: r.summary.budget,
        });
        results.push(r);
    }
    let table = compare_table(&cells)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.csv"), table.to_csv()?)?;
        fs::write(dir.join("table.txt"), table.to_text())?;
    }
    Ok((table, results))
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Grid resolution per dimension count.
pub fn diagnostic_resolution(d: usize) -> usize {
    if d == 1 { 500 } else { 50 }
}

/// Discriminator scores of fresh simulations at `theta`.
pub fn scores_at(state: &AlfiState, gen: &dyn Generator, theta: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    let stream = SeedStream::new(seed).child("scores");
    (0..n)
        .into_par_iter()
        .map(|j| {
            let x: Summary = sim::simulate(gen, theta, stream.index(j as u64).seed())?;
            state.discriminator.score(&x)
        })
        .collect()
}

/// Kolmogorov-Smirnov distance between the encoder's fitted family at
/// `theta` (pushed back to the discriminator scale) and `n` fresh scores.
pub fn encoder_ks(state: &AlfiState, gen: &dyn Generator, theta: &[f64], n: usize, seed: u64) -> Result<f64> {
    let mut ys = scores_at(state, gen, theta, n, seed)?;
    ys.sort_by(f64::total_cmp);
    let shapes = state.shapes(theta)?;
    let transform = state.transform()?;
    let m = ys.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let f = dist::family_cdf_on_y(&shapes, &transform, *y)?;
        ks = ks.max((f - i as f64 / m).abs()).max(((i + 1) as f64 / m - f).abs());
    }
    Ok(ks)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub d_obs: f64,
    pub theta_star: Vec<f64>,
    pub ks_at_theta_star: Option<f64>,
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

fn write_grid(path: &Path, points: &[Vec<f64>], values: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let d = points.first().map_or(0, |p| p.len());
    let mut header: Vec<String> = (0..d).map(|k| format!("theta_{k}")).collect();
    header.push("value".into());
    w.write_record(&header).map_err(csv_err)?;
    for (p, v) in points.iter().zip(values) {
        let mut row: Vec<String> = p.iter().map(|x| fmt(*x)).collect();
        row.push(fmt(*v));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready CSVs for a trained (or untrained) ALFI state:
/// `grid_discrepancy.csv`, `grid_encoder_mean.csv`, `grid_loglik.csv`
/// (skipped for d > 2), `kde_theta_star.csv` (KDE of fresh discriminator
/// scores at `theta*` against the fitted density), `final_particles.csv`
/// and `diagnostics_summary.json`.
pub fn emit_diagnostics(state: &AlfiState, gen: &dyn Generator, theta_star: &[f64], dir: &Path, seed: u64) -> Result<DiagnosticSummary> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut notes = Vec::new();
    let d = gen.dim();
    if d <= 2 {
        let res = diagnostic_resolution(d);
        let disc = sim::discrepancy_map(gen, &state.x_obs, res, seed)?;
        let points = disc.points();
        write_grid(&dir.join("grid_discrepancy.csv"), &points, &disc.values)?;
        let means: Vec<f64> = points.par_iter().map(|p| Ok(state.shapes(p)?.mean())).collect::<Result<_>>()?;
        write_grid(&dir.join("grid_encoder_mean.csv"), &points, &means)?;
        let ll: Vec<f64> = points.par_iter().map(|p| alfi::estimate_loglik(state, p)).collect::<Result<_>>()?;
        write_grid(&dir.join("grid_loglik.csv"), &points, &ll)?;
        files.extend(["grid_discrepancy.csv", "grid_encoder_mean.csv", "grid_loglik.csv"].map(String::from));
    } else {
        let note = format!("grids skipped for d = {d}");
        log::info!("{note}");
        notes.push(note);
    }

    let ys = scores_at(state, gen, theta_star, 100, seed)?;
    let bw = dist::silverman_bandwidth(&ys).unwrap_or(0.0);
    let bw = if bw > 0.0 { bw } else { 1e-3 };
    let shapes = state.shapes(theta_star)?;
    let transform = state.transform()?;
    let mut w = csv_writer(&dir.join("kde_theta_star.csv"))?;
    w.write_record(["y", "kde", "fitted"]).map_err(csv_err)?;
    for i in 0..200 {
        let y = (i as f64 + 0.5) / 200.0;
        let kde = dist::kde_pdf(&ys, bw, y)?;
        let fitted = dist::family_logpdf(&shapes, &transform, y).map(f64::exp).unwrap_or(f64::NAN);
        w.write_record([fmt(y), fmt(kde), fmt(fitted)]).map_err(csv_err)?;
    }
    w.flush()?;
    files.push("kde_theta_star.csv".into());

    let mut w = csv_writer(&dir.join("final_particles.csv"))?;
    let mut header = vec!["particle".to_string()];
    header.extend((0..d).map(|k| format!("theta_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, p) in state.ensemble.particles.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(|v| fmt(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    files.push("final_particles.csv".into());

    let summary = DiagnosticSummary {
        d_obs: state.d_obs,
        theta_star: theta_star.to_vec(),
        ks_at_theta_star: encoder_ks(state, gen, theta_star, 100, seed).ok(),
        files,
        notes,
    };
    fs::write(dir.join("diagnostics_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Rebuild the ALFI state of replication `r` from a run directory written
/// by [`write_experiment`] and emit its diagnostics into `dir/diag_rep{r}`.
pub fn diagnose_run(dir: &Path, r: usize) -> Result<DiagnosticSummary> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let AlgorithmConfig::Alfi(alfi_cfg) = &cfg.algorithm else {
        return Err(Error::Config(format!("diagnostics need an alfi run, found `{}`", cfg.algorithm.name())));
    };
    let gen = cfg.validate()?;
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let rec = summary
        .replications
        .get(r)
        .ok_or_else(|| Error::Config(format!("run has no replication {r}")))?;
    if rec.x_obs.is_empty() {
        return Err(Error::Config(format!("replication {r} has no observation")));
    }
    let mut state = AlfiState::new(alfi_cfg, gen.bounds(), &rec.x_obs)?;
    let nets = dir.join("networks");
    state.discriminator = Network::load(&nets.join(format!("rep{r:03}_discriminator.json")))?;
    state.encoder = Network::load(&nets.join(format!("rep{r:03}_encoder.json")))?;
    state.refresh_d_obs()?;
    if let Some(ens) = final_ensemble_from_csv(&dir.join("particles.csv"), r, gen.dim())? {
        state.ensemble.particles = ens;
    }
    emit_diagnostics(&state, gen.as_ref(), &rec.theta_star, &dir.join(format!("diag_rep{r:03}")), rec.seed)
}

fn final_ensemble_from_csv(path: &Path, r: usize, d: usize) -> Result<Option<Vec<Vec<f64>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut last = 0usize;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed particles.csv row {rec:?}")))
        };
        if num(0)? as usize != r {
            continue;
        }
        let it = num(1)? as usize;
        last = last.max(it);
        rows.push((it, (0..d).map(|k| num(4 + k)).collect::<Result<_>>()?));
    }
    let ens: Vec<Vec<f64>> = rows.into_iter().filter(|(it, _)| *it == last).map(|(_, t)| t).collect();
    Ok((!ens.is_empty()).then_some(ens))
}

/// Family used by an ALFI algorithm config, if any.
pub fn alfi_family(alg: &AlgorithmConfig) -> Option<Family> {
    match alg {
        AlgorithmConfig::Alfi(c) => Some(c.family),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FnGenerator, ParamBox};

    fn abc_experiment(seed: u64, reps: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
            seed = {seed}
            replications = {reps}
            [generator]
            name = "gaussian_location"
            sigma = 0.1
            [algorithm]
            name = "rejection_abc"
            budget = 2000
            "#
        ))
        .unwrap()
    }

    #[test]
    fn metric_values() {
        assert!((performance_metric(&[0.2], &[0.3]).unwrap() - 0.1f64.ln().abs()).abs() < 1e-12);
        assert!((performance_metric(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
        let a = [0.1, 0.7];
        let b = [0.4, 0.3];
        assert_eq!(performance_metric(&a, &b).unwrap(), performance_metric(&b, &a).unwrap());
        assert!((performance_metric(&a, &b).unwrap() + 0.5f64.ln()).abs() < 1e-12);
        assert!(matches!(performance_metric(&[0.1], &[0.1, 0.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn aggregate_skips_failures() {
        let a = Aggregate::from_scores(&[Some(1.0), None, Some(3.0)]);
        assert_eq!(a.mean, Some(2.0));
        assert!((a.sd.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((a.successes, a.failures), (2, 1));
        assert_eq!(a.cell(), "2.000 ± 1.414");
        let none = Aggregate::from_scores(&[None]);
        assert_eq!(none.mean, None);
        assert_eq!(none.cell(), "failed");
    }

    fn cell(alg: &str, gen: &str, mean: Option<f64>) -> Cell {
        Cell {
            algorithm: alg.into(),
            generator: gen.into(),
            performance: Aggregate { mean, sd: mean.map(|_| 0.1), successes: 5, failures: 0 },
            budget: Some(10_000),
        }
    }

    #[test]
    fn table_flags_best_and_ties() {
        let cells = vec![
            cell("alfi-beta", "quadratic", Some(3.0)),
            cell("mcmc_abc", "quadratic", Some(2.0)),
            cell("alfi-beta", "ma2", Some(1.5)),
            cell("mcmc_abc", "ma2", Some(1.5)),
            cell("alfi-beta", "mg1", None),
            cell("mcmc_abc", "mg1", Some(-0.5)),
        ];
        let t = compare_table(&cells).unwrap();
        assert_eq!(t.best, vec![true, false, true, true, false, true]);
        let csv = t.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().next().unwrap().starts_with("generator,algorithm,mean,sd"));
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("algorithm"));
        assert!(lines[1].contains("3.000 ± 0.100 *"));
        assert!(lines[1].contains("failed"));
        assert_eq!(text.matches(" *").count(), 4);
        assert!(compare_table(&[]).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = abc_experiment(3, 2);
        assert_eq!(cfg.observation_repeats, 100);
        assert_eq!(cfg.algorithm.budget(), Some(2000));
        assert_eq!(cfg.generator.params.get("sigma").and_then(|v| v.as_float()), Some(0.1));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);

        let alfi = ExperimentConfig::from_toml(
            "[generator]\nname = \"quadratic\"\ntheta_star = [0.2]\n[algorithm]\nname = \"alfi\"\nfamily = \"gaussian\"\n",
        )
        .unwrap();
        assert_eq!(alfi.algorithm.label(), "alfi-gaussian");
        assert_eq!(alfi.algorithm.budget(), Some(AlfiConfig::default().t_outer * AlfiConfig::default().n_particles));
        alfi.validate().unwrap();

        for bad in [
            "[generator]\nname = \"quadratic\"\n[algorithm]\nname = \"bolfi\"\n",
            "[generator]\nname = \"quadratic\"\ntheta_star = [1.5]\n[algorithm]\nname = \"rejection_abc\"\n",
            "[generator]\nname = \"nope\"\n[algorithm]\nname = \"rejection_abc\"\n",
            "[generator]\nname = \"quadratic\"\n[algorithm]\nname = \"rejection_abc\"\nbogus = 1\n",
            "[generator]\nname = \"quadratic\"\n[algorithm]\nname = \"alfi\"\nclip = -1.0\n",
        ] {
            let r = ExperimentConfig::from_toml(bad).and_then(|c| c.validate().map(|_| ()));
            assert!(matches!(r, Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn replications_are_reproducible_and_independent() {
        let a = run_experiment(&abc_experiment(7, 3)).unwrap();
        let b = run_experiment(&abc_experiment(7, 3)).unwrap();
        assert_eq!(
            serde_json::to_value(&a.summary.replications).unwrap(),
            serde_json::to_value(&b.summary.replications).unwrap()
        );
        let reps = &a.summary.replications;
        assert_ne!(reps[0].theta_star, reps[1].theta_star);
        for r in reps {
            assert!(r.theta_star.iter().all(|t| (0.1..=0.9).contains(t)));
            assert_eq!(r.simulations, 2000);
            assert!(r.performance.unwrap() > 1.0);
        }
        assert_eq!(a.summary.performance.successes, 3);
    }

    #[test]
    fn failed_replication_is_marked() {
        let gen = FnGenerator::new("half", ParamBox::unit(1), 1, |t: &[f64], _rng: &mut crate::rng::StreamRng| {
            if t[0] > 0.5 { vec![f64::NAN] } else { vec![t[0]] }
        });
        let cfg = abc_experiment(11, 8);
        let r = run_experiment_on(&cfg, &gen).unwrap();
        let failed = r.summary.replications.iter().filter(|x| x.error.is_some()).count();
        let high = r.summary.replications.iter().filter(|x| x.theta_star[0] > 0.5).count();
        assert_eq!(failed, high);
        assert!(failed > 0 && failed < 8);
        assert_eq!(r.summary.performance.failures, failed);
        assert_eq!(r.summary.performance.successes, 8 - failed);
        assert!(r.summary.performance.mean.is_some());
    }

    #[test]
    fn bench_enforces_budget_parity() {
        let text = |extra: &str| {
            format!(
                "{extra}\n[[generators]]\nname = \"quadratic\"\n\
                 [[algorithms]]\nname = \"rejection_abc\"\nbudget = 1000\n\
                 [[algorithms]]\nname = \"mcmc_abc\"\nbudget = 2000\n"
            )
        };
        let strict = BenchConfig::from_toml(&text("")).unwrap();
        assert!(matches!(strict.experiments(), Err(Error::Config(_))));
        let loose = BenchConfig::from_toml(&text("allow_unequal_budgets = true")).unwrap();
        assert_eq!(loose.experiments().unwrap().len(), 2);

        let dup = BenchConfig::from_toml(
            "[[generators]]\nname = \"quadratic\"\n[[algorithms]]\nname = \"smc_abc\"\n[[algorithms]]\nname = \"smc_abc\"\n",
        )
        .unwrap();
        assert!(dup.experiments().is_err());
    }

    #[test]
    fn experiment_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = abc_experiment(5, 2);
        cfg.out = Some(dir.path().to_path_buf());
        run_experiment(&cfg).unwrap();
        for f in ["summary.json", "particles.csv", "diagnostics.csv", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let particles = fs::read_to_string(dir.path().join("particles.csv")).unwrap();
        let mut lines = particles.lines();
        assert_eq!(lines.next().unwrap(), "replication,iteration,particle,weight,theta_0");
        assert_eq!(lines.count(), 2 * 20);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["replications"].as_array().unwrap().len(), 2);
        assert!(summary["timings"].is_array());
        let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(reloaded.algorithm, cfg.algorithm);
    }

    #[test]
    fn diagnostics_from_untrained_states() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AlfiConfig { hidden: vec![8], ..AlfiConfig::default() };
        for (name, rows) in [("quadratic", Some(500)), ("sir", Some(2500)), ("mg1", None)] {
            let gen = build_generator(name, &toml::Table::new()).unwrap();
            let theta = gen.bounds().sample_central(0.5, &mut SeedStream::new(1).rng());
            let x_obs = make_observation(gen.as_ref(), &theta, 5, 2).unwrap();
            let state = AlfiState::new(&cfg, gen.bounds(), &x_obs).unwrap();
            let out = dir.path().join(name);
            let summary = emit_diagnostics(&state, gen.as_ref(), &theta, &out, 3).unwrap();
            assert!(out.join("kde_theta_star.csv").exists());
            assert!(out.join("final_particles.csv").exists());
            match rows {
                Some(n) => {
                    for f in ["grid_discrepancy.csv", "grid_encoder_mean.csv", "grid_loglik.csv"] {
                        let text = fs::read_to_string(out.join(f)).unwrap();
                        assert_eq!(text.lines().count(), n + 1, "{name} {f}");
                    }
                    assert!(summary.notes.is_empty());
                }
                None => {
                    assert!(!out.join("grid_loglik.csv").exists());
                    assert_eq!(summary.notes.len(), 1);
                }
            }
        }
    }
}
