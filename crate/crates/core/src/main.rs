use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use seqdesign::config::{parse_config, parse_strategies};
use seqdesign::harness::{export_csv, run_trials, simulate_truth, ExperimentConfig};
use seqdesign::seed::{tag, Seed};
use seqdesign::selftest::{enkf_selftest, mi_selftest, SelftestCase};

/// Sequential information-theoretic experimental design for ODE models.
#[derive(Debug, Parser)]
#[command(name = "seqdesign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every strategy over repeated trials and write averaged metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base seed; overrides `base_seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Strategies to compare: max-mi, max-entropy, fixed:<i>, random.
        /// Repeat or comma-separate. Overrides `strategies` in the config.
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        /// Overrides `n_trials`.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides `ensemble_size`.
        #[arg(long)]
        ensemble_size: Option<usize>,
    },
    /// Simulate one ground-truth dataset and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the entropy and mutual information estimators against closed forms.
    MiSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the EnKF analysis against the exact Kalman filter.
    EnkfSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = parse_config(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.base_seed = seed;
    }
    eprintln!("seed: {}", cfg.base_seed);
    Ok(cfg)
}

fn report(cases: &[SelftestCase]) -> anyhow::Result<()> {
    for c in cases {
        println!("{c}");
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        bail!("{failed} of {} cases outside tolerance", cases.len());
    }
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("SEQDESIGN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("SEQDESIGN_THREADS must be a non-negative integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            strategies,
            trials,
            ensemble_size,
        } => {
            let mut cfg = load(&config, seed)?;
            if !strategies.is_empty() {
                cfg.strategies = parse_strategies(&strategies.join(","))?;
            }
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            if let Some(n) = ensemble_size {
                cfg.ensemble_size = n;
            }
            cfg.validate()?;
            let results = run_trials(&cfg, &cfg.strategies)?;
            export_csv(&results, &out)?;
            eprintln!(
                "wrote {} strategies x {} stages to {}",
                results.curves.len(),
                cfg.design_space.n_stages() + 1,
                out.display()
            );
        }
        Command::Simulate { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let data = simulate_truth(&cfg, Seed(cfg.base_seed).child(tag::DATASET))?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            data.write_csv(&cfg, BufWriter::new(file))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::MiSelftest { seed } => report(&mi_selftest(Seed(seed))?)?,
        Command::EnkfSelftest { seed } => report(&enkf_selftest(Seed(seed))?)?,
    }
    Ok(())
}

/// Joins the error chain, skipping causes whose text the library error
/// already embeds.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::FAILURE
        }
    }
}
