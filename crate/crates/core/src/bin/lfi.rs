use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lfi_core::bench::{self, BenchConfig, ExperimentConfig};
use lfi_core::Error;

#[derive(Parser)]
#[command(name = "lfi", version, about = "Likelihood-free inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a comparison study and print the table.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write diagnostic grids for an ALFI run directory.
    Diag {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// List generators and algorithms.
    List,
}

macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_toml(&read_config(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out = out;
            }
            cfg.out.get_or_insert_with(|| PathBuf::from("runs").join(format!("{}-{}", cfg.generator.name, cfg.algorithm.label())));
            let result = bench::run_experiment(&cfg)?;
            let p = &result.summary.performance;
            say!("{} on {}: {} ({} ok, {} failed)", result.summary.algorithm, result.summary.generator, p.cell(), p.successes, p.failures);
            say!("results in {}", cfg.out.as_ref().map(|o| o.display().to_string()).unwrap_or_default());
            if p.successes == 0 {
                return Err(Failure::Runtime("every replication failed".into()));
            }
        }
        Command::Bench { config } => {
            let cfg = BenchConfig::from_toml(&read_config(&config)?)?;
            let (table, _) = bench::run_bench(&cfg)?;
            let _ = write!(std::io::stdout(), "{}", table.to_text());
        }
        Command::Diag { run, replication } => {
            let s = bench::diagnose_run(&run, replication)?;
            for f in &s.files {
                say!("wrote {f}");
            }
            for n in &s.notes {
                say!("{n}");
            }
            if let Some(ks) = s.ks_at_theta_star {
                say!("ks at theta* = {ks:.4}");
            }
        }
        Command::List => {
            say!("generators:");
            for (name, about) in lfi_core::sim::GENERATORS {
                say!("  {name:<18} {about}");
            }
            say!("algorithms:");
            for (name, about) in bench::ALGORITHMS {
                say!("  {name:<18} {about}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
