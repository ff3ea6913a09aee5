//! Experiment runner for `fal-core`.
//!
//! `fal run <experiment> --config <file>` runs the experiment once per seed and
//! writes `<experiment>_seed<k>.csv` per seed plus a `summary.json`;
//! `fal carbon` evaluates the annotation footprint formula directly.

pub mod carbon;
pub mod config;
pub mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{Experiment, ExperimentConfig};
pub use experiments::{run_seed, run_seeds, Metrics, SeedRun};

/// Environment variable overriding the output directory of the config file.
pub const OUT_DIR_ENV: &str = "FAL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fal_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for anything the user can fix in the inputs, 3 when a run blows up
    /// numerically, 1 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        use fal_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidInput(_) | E::ShapeError(_) | E::InvalidEpisode(_)) => 2,
            CliError::Core(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: Metrics,
    /// Sample standard deviation; zero for a single seed.
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub rng_algorithm: &'static str,
    pub per_seed: BTreeMap<String, Metrics>,
    pub aggregate: Aggregate,
}

impl Summary {
    pub fn new(experiment: Experiment, runs: &[SeedRun]) -> Self {
        let per_seed: BTreeMap<String, Metrics> = runs.iter().map(|r| (r.seed.to_string(), r.metrics.clone())).collect();
        let n = runs.len() as f64;
        let (mut mean, mut std) = (Metrics::new(), Metrics::new());
        if let Some(first) = runs.first() {
            for key in first.metrics.keys() {
                let xs: Vec<f64> = runs.iter().map(|r| r.metrics[key]).collect();
                let m = xs.iter().sum::<f64>() / n;
                let var = if runs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
                mean.insert(key.clone(), m);
                std.insert(key.clone(), var.sqrt());
            }
        }
        Self {
            experiment,
            seeds: runs.iter().map(|r| r.seed).collect(),
            rng_algorithm: fal_core::rng::ALGORITHM_ID,
            per_seed,
            aggregate: Aggregate { mean, std },
        }
    }
}

/// Flag beats environment beats config file.
pub fn resolve_out_dir(flag: Option<PathBuf>, env: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(env).or(file).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Command-line seeds replace the file's list entirely.
pub fn resolve_seeds(flag: &[u64], file: &[u64]) -> Result<Vec<u64>, CliError> {
    let seeds = if flag.is_empty() { file.to_vec() } else { flag.to_vec() };
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds: pass --seed or set `seeds` in the config".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(CliError::Config(format!("seed {dup} listed twice")));
    }
    Ok(seeds)
}

pub fn csv_path(out_dir: &Path, exp: Experiment, seed: u64) -> PathBuf {
    out_dir.join(format!("{}_seed{seed}.csv", exp.name()))
}

pub fn write_outputs(out_dir: &Path, exp: Experiment, runs: &[SeedRun]) -> Result<Summary, CliError> {
    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    for r in runs {
        let p = csv_path(out_dir, exp, r.seed);
        std::fs::write(&p, &r.csv).map_err(|e| io(&p, e))?;
    }
    let summary = Summary::new(exp, runs);
    let p = out_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    Ok(summary)
}

/// Full `run` command: validate, run all seeds, then write everything.
pub fn run(exp: Experiment, cfg: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<Summary, CliError> {
    if let Some(named) = cfg.experiment {
        if named != exp {
            return Err(CliError::Config(format!("config is for `{named}` but `{exp}` was requested")));
        }
    }
    experiments::validate(exp, cfg)?;
    let runs = run_seeds(exp, cfg, seeds)?;
    write_outputs(out_dir, exp, &runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(seed: u64, x: f64) -> SeedRun {
        SeedRun { seed, csv: Vec::new(), metrics: [("x".to_string(), x)].into_iter().collect() }
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let s = Summary::new(Experiment::Carbon, &[fake(1, 1.0), fake(2, 3.0)]);
        assert_eq!(s.aggregate.mean["x"], 2.0);
        assert!((s.aggregate.std["x"] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::new(Experiment::Carbon, &[fake(1, 5.0)]).aggregate.std["x"], 0.0);
    }

    #[test]
    fn summary_schema() {
        let s = Summary::new(Experiment::MamlLinreg, &[fake(7, 1.0)]);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["experiment"], "maml-linreg");
        assert_eq!(v["seeds"], serde_json::json!([7]));
        assert_eq!(v["per_seed"]["7"]["x"], 1.0);
        assert_eq!(v["aggregate"]["mean"]["x"], 1.0);
        assert_eq!(v["rng_algorithm"], fal_core::rng::ALGORITHM_ID);
    }

    #[test]
    fn out_dir_precedence() {
        let p = |s: &str| Some(PathBuf::from(s));
        assert_eq!(resolve_out_dir(p("a"), p("b"), p("c")), PathBuf::from("a"));
        assert_eq!(resolve_out_dir(None, p("b"), p("c")), PathBuf::from("b"));
        assert_eq!(resolve_out_dir(None, None, p("c")), PathBuf::from("c"));
        assert_eq!(resolve_out_dir(None, None, None), PathBuf::from(DEFAULT_OUT_DIR));
    }

    #[test]
    fn seed_resolution() {
        assert_eq!(resolve_seeds(&[3], &[1, 2]).unwrap(), vec![3]);
        assert_eq!(resolve_seeds(&[], &[1, 2]).unwrap(), vec![1, 2]);
        assert!(resolve_seeds(&[], &[]).is_err());
        assert!(resolve_seeds(&[1, 1], &[]).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(fal_core::Error::InvalidInput("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(fal_core::Error::TrainingDiverged { step: 3, loss: f64::NAN }).exit_code(), 3);
    }

    #[test]
    fn mismatched_experiment_is_a_config_error() {
        let cfg = ExperimentConfig::parse("experiment = \"prop44\"").unwrap();
        let dir = std::env::temp_dir();
        assert!(matches!(run(Experiment::Carbon, &cfg, &[1], &dir), Err(CliError::Config(_))));
    }
}
