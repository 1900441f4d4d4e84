use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use glflow::harness::{fit_rate, read_pairs_csv, run_experiment, ExperimentConfig, Summary};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "glflow", version, about = "Anisotropic Ginzburg-Landau flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parse and check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit `value ≈ C ε^p` to a two-column CSV of (ε, value) pairs.
    Rates {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))
}

fn report(s: &Summary) {
    println!("{:?} ({}) in {:.1} s", s.experiment, s.description, s.runtime_seconds);
    for r in &s.runs {
        println!(
            "  eps {:<6} mu {:<5} h {:.3e} steps {:>7} frames {:>3} {:.1} s",
            r.eps, r.mu, r.h, r.steps, r.frames, r.runtime_seconds
        );
    }
    for (name, fit) in &s.rates {
        println!("  rate {name}: exponent {:.4}, constant {:.4e}, residual {:.2e}", fit.exponent, fit.constant, fit.residual);
    }
    for c in &s.checks {
        let v = c.value.map_or("n/a".to_string(), |v| format!("{v:.4e}"));
        println!("  [{}] {}: {} (threshold {:e}) {}", if c.passed { "pass" } else { "FAIL" }, c.name, v, c.threshold, c.detail);
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let summary = run_experiment(&cfg)?;
            report(&summary);
            Ok(summary.passed())
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {:?} ({}), eps {:?}, mu {}, t_end {}",
                cfg.experiment.id,
                cfg.experiment.id.describe(),
                cfg.run.eps,
                cfg.run.mu,
                cfg.run.t_end
            );
            Ok(true)
        }
        Command::Rates { input } => {
            let pairs = read_pairs_csv(&input).with_context(|| format!("reading {}", input.display()))?;
            if pairs.is_empty() {
                bail!("{} has no data rows", input.display());
            }
            let fit = fit_rate(&pairs)?;
            println!("exponent {:.6}", fit.exponent);
            println!("constant {:.6e}", fit.constant);
            println!("residual {:.3e}", fit.residual);
            Ok(true)
        }
    }
}
