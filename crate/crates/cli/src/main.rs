use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fal_cli::carbon::{carbon_estimate, CarbonInputs, AMT_INTENSITIES, AMT_SHARES};
use fal_cli::{resolve_out_dir, resolve_seeds, CliError, Experiment, ExperimentConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "fal", version, about = "Few-annotation learning experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for each seed and write CSVs plus summary.json.
    Run {
        experiment: Experiment,
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; replaces the config's seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output directory; overrides $FAL_OUT_DIR and the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Carbon footprint of an annotation campaign in kgCO2eq.
    Carbon {
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = 300.0)]
        watts: f64,
        #[arg(long, value_delimiter = ',', default_values_t = AMT_SHARES)]
        shares: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = AMT_INTENSITIES)]
        intensities: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { experiment, config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = resolve_seeds(&seeds, &cfg.seeds)?;
            let env = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
            let out_dir = resolve_out_dir(out, env, cfg.out_dir.clone());
            let summary = fal_cli::run(experiment, &cfg, &seeds, &out_dir)?;
            for (seed, m) in &summary.per_seed {
                let line: Vec<String> = m.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("seed {seed}: {}", line.join(" "));
            }
            println!("wrote {}", out_dir.display());
        }
        Command::Carbon { hours, watts, shares, intensities } => {
            let c = CarbonInputs { worker_hours: hours, watts_per_worker: watts, shares, intensities };
            let kg = carbon_estimate(&c)?;
            println!("{:.1} kWh x {:.1} gCO2eq/kWh = {kg:.1} kgCO2eq", c.energy_kwh(), c.mean_intensity());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
