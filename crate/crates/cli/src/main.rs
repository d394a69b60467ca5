use std::path::PathBuf;
use std::process::ExitCode;

use attnprior_cli::commands;
use attnprior_cli::config::{Overrides, RunConfig};
use attnprior_cli::Result;
use attnprior_lm::config::Preset;
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "attnprior", version, about = "Attention as a latent-noise prior: figures, checks and training runs")]
struct Cli {
    /// Plain-text `key = value` config file with `[section]` headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Margin-penalty weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Largest embedding-noise level of the robustness grid.
    #[arg(long, global = true)]
    sigma_max: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conditional densities, diagonal factors and population validity for
    /// positive and negative coupling.
    TheoryFigures,
    /// Log-density report for an embedding matrix given as CSV (one row per
    /// position).
    Density {
        #[arg(long)]
        input: PathBuf,
    },
    /// Runs every executable invariant; exits 1 if any fails.
    Verify {
        #[arg(long, hide = true)]
        corrupt_a_cache: bool,
    },
    /// Trains one model at the configured margin weight.
    Train,
    /// CE-only versus margin-regularized BPC on the noise grid.
    Robustness,
    /// Degradation across the margin-weight grid.
    LambdaSweep,
}

fn print<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn execute(cli: Cli) -> Result<bool> {
    let flags = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        out: cli.out,
        lambda: cli.lambda,
        sigma_max: cli.sigma_max,
        epochs: cli.epochs,
        corpus: cli.corpus,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::TheoryFigures => print(&commands::theory_figures(&cfg)?),
        Command::Density { input } => print(&commands::density(&cfg, &input)?),
        Command::Verify { corrupt_a_cache } => {
            let r = commands::verify(&cfg, corrupt_a_cache)?;
            for c in &r.checks {
                println!(
                    "{} {:<48} {:<32} discrepancy {:.3e} tolerance {:.1e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.instance,
                    c.discrepancy,
                    c.tolerance
                );
            }
            println!("counterexample marginals {:?}", r.counterexample);
            return Ok(r.pass);
        }
        Command::Train => print(&commands::train(&cfg)?),
        Command::Robustness => print(&commands::robustness(&cfg)?),
        Command::LambdaSweep => print(&commands::lambda_sweep(&cfg)?.1),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ATTNPRIOR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_err() {
            eprintln!("warning: could not configure {n} worker threads");
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
