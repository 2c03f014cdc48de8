//! `mixlab`: analytic calculator and experiment runner for data-mixture
//! sampling studies.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mixlab::harness::{fsweep_csv, run_experiment, run_gradvar, ExperimentConfig};
use mixlab::{equivalent_weights, temperature_probs, variance_factor, DomainCatalog};

#[derive(Parser)]
#[command(name = "mixlab", version, about = "Data-mixture sampling laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print sampling probabilities, equivalent weights, and the variance
    /// factor for a catalog at one temperature.
    Probs {
        /// Comma-separated domain sizes, e.g. 900,100
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u64>,
        /// Catalog TSV file (id<TAB>name<TAB>size) instead of --sizes
        #[arg(long, conflicts_with = "sizes")]
        catalog: Option<PathBuf>,
        /// Sampling temperature (> 0)
        #[arg(long)]
        tau: f64,
    },
    /// Write a CSV of the variance factor over Zipf catalogs:
    /// one row per (alpha, tau) pair.
    Fsweep {
        /// Comma-separated Zipf exponents, e.g. 0,0.5,1,2
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Number of domains in each catalog
        #[arg(long, default_value_t = 100)]
        domains: usize,
        /// Size of the largest domain
        #[arg(long, default_value_t = 1_000_000)]
        unit: u64,
        /// Comma-separated temperatures, or a range start:end:step
        #[arg(long)]
        taus: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute every arm x seed of an experiment config, writing one run
    /// CSV per run plus a race summary. Exits nonzero if any run diverged.
    Run {
        /// Experiment TOML file
        #[arg(long)]
        config: PathBuf,
        /// Output directory (must not exist)
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the gradient-variance curve declared in the config's
    /// [gradvar] section and write it as CSV.
    Gradvar {
        /// Experiment TOML file
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_taus(text: &str) -> Result<Vec<f64>> {
    if let Some((start, rest)) = text.split_once(':') {
        let (end, step) = rest
            .split_once(':')
            .context("tau range must be start:end:step")?;
        let (start, end, step): (f64, f64, f64) = (start.parse()?, end.parse()?, step.parse()?);
        if step <= 0.0 || end < start {
            bail!("tau range must have positive step and end >= start");
        }
        let mut taus = Vec::new();
        let mut i = 0;
        loop {
            let tau = start + step * i as f64;
            if tau > end + 1e-12 {
                break;
            }
            taus.push(tau);
            i += 1;
        }
        Ok(taus)
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(Into::into))
            .collect()
    }
}

fn cmd_probs(sizes: Vec<u64>, catalog: Option<PathBuf>, tau: f64) -> Result<()> {
    let catalog = match catalog {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            DomainCatalog::from_tsv(&text)?
        }
        None => {
            if sizes.is_empty() {
                bail!("provide --sizes or --catalog");
            }
            DomainCatalog::from_sizes(&sizes)?
        }
    };
    let p = temperature_probs(&catalog, tau)?;
    let w = equivalent_weights(&catalog, tau)?;
    let f = variance_factor(&catalog, tau)?;
    println!("{:<4} {:<16} {:>14} {:>12} {:>12}", "id", "name", "size", "p", "w");
    for (i, d) in catalog.domains().iter().enumerate() {
        println!(
            "{:<4} {:<16} {:>14} {:>12.6} {:>12.6}",
            d.id, d.name, d.size, p.get(i), w.get(i)
        );
    }
    println!("F(tau={tau}) = {f:.6}");
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Probs { sizes, catalog, tau } => cmd_probs(sizes, catalog, tau)?,
        Command::Fsweep { alphas, domains, unit, taus, out } => {
            let taus = parse_taus(&taus)?;
            let csv = fsweep_csv(&alphas, domains, unit, &taus)?;
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::parse_file(&config)?;
            let summary = run_experiment(&cfg, &out)?;
            for cell in &summary.race.cells {
                println!(
                    "{:<20} {:<12} median_steps={:<10} wins={}",
                    cell.arm,
                    cell.domain,
                    cell.median_steps.map_or("never".into(), |s| s.to_string()),
                    cell.wins
                );
            }
            if summary.diverged_runs > 0 {
                bail!("{} run(s) diverged", summary.diverged_runs);
            }
        }
        Command::Gradvar { config, out } => {
            let cfg = ExperimentConfig::parse_file(&config)?;
            let (csv, _) = run_gradvar(&cfg)?;
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
