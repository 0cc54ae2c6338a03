use lfi_core::alfi::{self, AlfiConfig};
use lfi_core::bench::*;
use lfi_core::sim::{make_observation, Quadratic};

fn experiment(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

#[test]
fn metric_examples() {
    assert_eq!(performance_metric(&[0.3], &[1.3]).unwrap(), 0.0);
    assert!((performance_metric(&[0.0], &[(-5f64).exp()]).unwrap() - 5.0).abs() < 1e-12);
    let star = [0.4, 0.6, 0.1];
    let hat = [0.4 + (-1f64).exp(), 0.6, 0.1];
    assert!((performance_metric(&star, &hat).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn identity_smoke_run() {
    let r = run_experiment(&experiment(
        "[generator]\nname = \"identity\"\n[algorithm]\nname = \"rejection_abc\"\nbudget = 1000\n",
    ))
    .unwrap();
    assert_eq!(r.summary.replications.len(), 1);
    assert!(r.summary.replications[0].performance.unwrap().is_finite());
}

#[test]
fn aggregate_counts_every_replication() {
    let r = run_experiment(&experiment(
        "seed = 4\nreplications = 10\n[generator]\nname = \"gaussian_location\"\n[algorithm]\nname = \"rejection_abc\"\nbudget = 500\n",
    ))
    .unwrap();
    let scores: Vec<f64> = r.summary.replications.iter().map(|x| x.performance.unwrap()).collect();
    assert_eq!(scores.len(), 10);
    assert_eq!(r.summary.performance.successes, 10);
    let mean = scores.iter().sum::<f64>() / 10.0;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    assert!((r.summary.performance.mean.unwrap() - mean).abs() < 1e-12);
    assert!((r.summary.performance.sd.unwrap() - sd).abs() < 1e-12);
}

#[test]
fn alfi_beta_replications_locate_the_location() {
    let r = run_experiment(&experiment(
        "seed = 5\nreplications = 5\n[generator]\nname = \"gaussian_location\"\nsigma = 0.1\n[algorithm]\nname = \"alfi\"\n",
    ))
    .unwrap();
    assert_eq!(r.summary.algorithm, "alfi-beta");
    assert!(r.summary.replications.iter().all(|x| x.simulations == 10_000));
    assert!(r.summary.performance.mean.unwrap() >= 1.0, "{:?}", r.summary.performance);
}

#[test]
fn table_examples() {
    let cell = |alg: &str, m: f64| Cell {
        algorithm: alg.into(),
        generator: "ma2".into(),
        performance: Aggregate { mean: Some(m), sd: Some(0.0), successes: 1, failures: 0 },
        budget: Some(100),
    };
    assert_eq!(compare_table(&[cell("a", 1.0)]).unwrap().best, vec![true]);
    assert_eq!(compare_table(&[cell("a", 3.0), cell("b", 2.0), cell("c", 1.0)]).unwrap().best, vec![true, false, false]);
    assert_eq!(compare_table(&[cell("a", 2.0), cell("b", 2.0)]).unwrap().best, vec![true, true]);
}

fn local_maxima_above_half(path: &std::path::Path) -> Vec<f64> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let rows: Vec<(f64, f64)> = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    let top = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    // half of the maximum likelihood, on the log scale
    let half = top - 2f64.ln();
    (1..rows.len() - 1)
        .filter(|&i| rows[i].1 > rows[i - 1].1 && rows[i].1 >= rows[i + 1].1 && rows[i].1 >= half)
        .map(|i| rows[i].0)
        .collect()
}

#[test]
fn trained_quadratic_likelihood_grid_is_bimodal() {
    let gen = Quadratic::new(0.01).unwrap();
    let x_obs = make_observation(&gen, &[0.2], 100, 31).unwrap();
    let r = alfi::run(&AlfiConfig { seed: 31, ..AlfiConfig::default() }, &gen, &x_obs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = emit_diagnostics(&r.state, &gen, &[0.2], dir.path(), 32).unwrap();
    assert!(s.ks_at_theta_star.is_some());
    let peaks = local_maxima_above_half(&dir.path().join("grid_loglik.csv"));
    assert_eq!(peaks.len(), 2, "{peaks:?}");
    assert!((peaks[0] + peaks[1] - 1.0).abs() <= 2.0 / 500.0 + 0.05, "{peaks:?}");
    assert!((peaks[0] - 0.2).abs() < 0.05 && (peaks[1] - 0.8).abs() < 0.05, "{peaks:?}");
}
