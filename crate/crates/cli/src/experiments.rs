//! One function per experiment: run a seed, return its CSV and final metrics.

use std::collections::BTreeMap;

use fal_core::meta::{maml_linreg_sim, prop44_example, train_protonet};
use fal_core::rng::Rng;
use fal_core::teachstudent::{run_mtdetr, run_proseco, MtdetrConfig, ProsecoConfig};
use serde::Serialize;

use crate::carbon::{carbon_estimate, CarbonInputs};
use crate::config::{Experiment, ExperimentConfig};
use crate::CliError;

pub type Metrics = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub csv: Vec<u8>,
    pub metrics: Metrics,
}

#[derive(Serialize)]
struct ProtoRow {
    step: usize,
    loss: f64,
    kappa_wn: f64,
    frob_wn: f64,
    accuracy: f64,
    entropy_wn: f64,
}

#[derive(Serialize)]
struct MamlRow {
    iteration: usize,
    kappa: f64,
}

#[derive(Serialize)]
struct Prop44Row {
    epsilon: f64,
    kappa_star: f64,
    kappa_hat: f64,
    kappa_hat_closed: f64,
    residual_star: f64,
    residual_hat: f64,
}

#[derive(Serialize)]
struct ProsecoRow {
    step: usize,
    loss: f64,
    contrast: f64,
    box_loss: f64,
}

#[derive(Serialize)]
struct MtdetrRow {
    step: usize,
    loss: f64,
    sup_loss: f64,
    unsup_loss: f64,
    keep_rate: f64,
    map: Option<f64>,
}

#[derive(Serialize)]
struct CarbonRow {
    worker_hours: f64,
    watts_per_worker: f64,
    energy_kwh: f64,
    mean_intensity: f64,
    kg_co2eq: f64,
}

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> Metrics {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Checks that the experiment's section converts to a valid library config.
pub fn validate(exp: Experiment, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let r = match exp {
        Experiment::Protonet => {
            let c = cfg.protonet.to_core()?;
            c.task.validate()
        }
        Experiment::MamlLinreg => Ok(()),
        Experiment::Prop44 => Ok(()),
        Experiment::Proseco => ProsecoConfig::from(cfg.proseco).validate(),
        Experiment::Mtdetr => MtdetrConfig::from(cfg.mtdetr).validate(),
        Experiment::Carbon => CarbonInputs::from(&cfg.carbon).validate(),
    };
    r.map_err(|e| CliError::Config(e.to_string()))
}

pub fn run_seed(exp: Experiment, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, CliError> {
    let (csv, metrics) = match exp {
        Experiment::Protonet => {
            let log = train_protonet(&cfg.protonet.to_core()?, &Rng::new(seed))?;
            let csv = to_csv(log.records.iter().map(|r| ProtoRow {
                step: r.step,
                loss: r.loss,
                kappa_wn: r.kappa_wn,
                frob_wn: r.frob_wn,
                accuracy: r.accuracy,
                entropy_wn: r.entropy_wn,
            }))?;
            let (a, b) = (log.first(), log.last());
            let m = metrics([
                ("final_loss", b.loss),
                ("final_kappa_wn", b.kappa_wn),
                ("initial_frob_wn", a.frob_wn),
                ("final_frob_wn", b.frob_wn),
                ("frob_growth", b.frob_wn / a.frob_wn),
                ("final_accuracy", b.accuracy),
                ("final_entropy_wn", b.entropy_wn),
            ]);
            (csv, m)
        }
        Experiment::MamlLinreg => {
            let s = &cfg.maml_linreg;
            let traj = maml_linreg_sim(s.iterations, s.alpha, s.beta, s.d, s.task_mode(), &mut Rng::new(seed))?;
            let csv = to_csv(traj.iter().map(|t| MamlRow { iteration: t.iteration, kappa: t.kappa }))?;
            let max_drop = traj
                .windows(2)
                .map(|w| if w[0].kappa == w[1].kappa { 0.0 } else { (w[0].kappa - w[1].kappa).max(0.0) })
                .fold(0.0, f64::max);
            let last = traj.last().map_or(f64::NAN, |t| t.kappa);
            (csv, metrics([("final_kappa", last), ("max_kappa_decrease", max_drop)]))
        }
        Experiment::Prop44 => {
            let s = &cfg.prop44;
            let p = prop44_example(s.epsilon, s.d, s.shift, s.n_samples, &mut Rng::new(seed))?;
            let csv = to_csv([Prop44Row {
                epsilon: s.epsilon,
                kappa_star: p.kappa_star,
                kappa_hat: p.kappa_hat,
                kappa_hat_closed: p.kappa_hat_closed,
                residual_star: p.residual_star,
                residual_hat: p.residual_hat,
            }])?;
            let m = metrics([
                ("kappa_star", p.kappa_star),
                ("kappa_hat", p.kappa_hat),
                ("kappa_hat_closed", p.kappa_hat_closed),
                ("residual_star", p.residual_star),
                ("residual_hat", p.residual_hat),
            ]);
            (csv, m)
        }
        Experiment::Proseco => {
            let run = run_proseco(&cfg.proseco.into(), seed)?;
            let csv = to_csv(run.records.iter().map(|r| ProsecoRow { step: r.step, loss: r.loss, contrast: r.contrast, box_loss: r.box_loss }))?;
            let m = metrics([
                ("initial_loss", run.initial_eval.loss),
                ("final_loss", run.final_eval.loss),
                ("loss_ratio", run.final_eval.loss / run.initial_eval.loss),
                ("final_contrast", run.final_eval.contrast),
                ("final_box_loss", run.final_eval.box_loss),
            ]);
            (csv, m)
        }
        Experiment::Mtdetr => {
            let run = run_mtdetr(&cfg.mtdetr.into(), seed)?;
            let csv = to_csv(run.records.iter().map(|r| MtdetrRow {
                step: r.step,
                loss: r.loss,
                sup_loss: r.sup_loss,
                unsup_loss: r.unsup_loss,
                keep_rate: r.keep_rate,
                map: r.map,
            }))?;
            (csv, metrics([("pretrain_map", run.pretrain_map), ("final_map", run.final_map)]))
        }
        Experiment::Carbon => {
            let c = CarbonInputs::from(&cfg.carbon);
            let kg = carbon_estimate(&c)?;
            let row = CarbonRow {
                worker_hours: c.worker_hours,
                watts_per_worker: c.watts_per_worker,
                energy_kwh: c.energy_kwh(),
                mean_intensity: c.mean_intensity(),
                kg_co2eq: kg,
            };
            let m = metrics([("energy_kwh", row.energy_kwh), ("kg_co2eq", kg)]);
            (to_csv([row])?, m)
        }
    };
    Ok(SeedRun { seed, csv, metrics })
}

/// Runs every seed on its own thread; results come back in seed order.
pub fn run_seeds(exp: Experiment, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SeedRun>, CliError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_seed(exp, cfg, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prop44_metrics() {
        let r = run_seed(Experiment::Prop44, &ExperimentConfig::default(), 3).unwrap();
        assert!((r.metrics["kappa_star"] - 50.0).abs() < 1e-9);
        assert!((r.metrics["kappa_hat"] - 1.0202008).abs() < 1e-6);
        let text = String::from_utf8(r.csv).unwrap();
        assert!(text.starts_with("epsilon,kappa_star,kappa_hat,kappa_hat_closed,residual_star,residual_hat\n"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn csv_columns_and_rows() {
        let cfg = ExperimentConfig::parse("[protonet]\nsteps = 3\n[maml-linreg]\niterations = 4").unwrap();
        let p = String::from_utf8(run_seed(Experiment::Protonet, &cfg, 1).unwrap().csv).unwrap();
        assert!(p.starts_with("step,loss,kappa_wn,frob_wn,accuracy,entropy_wn\n"));
        assert_eq!(p.lines().count(), 1 + 4);
        let m = String::from_utf8(run_seed(Experiment::MamlLinreg, &cfg, 1).unwrap().csv).unwrap();
        assert!(m.starts_with("iteration,kappa\n"));
        assert_eq!(m.lines().count(), 1 + 4);
        assert!(!m.contains('\r'));
    }

    #[test]
    fn mtdetr_map_column_is_blank_between_evaluations() {
        let cfg = ExperimentConfig::parse("[mtdetr]\npretrain_steps = 2\nsteps = 4\neval_every = 2\nn_train_scenes = 40\nn_test_scenes = 4").unwrap();
        let text = String::from_utf8(run_seed(Experiment::Mtdetr, &cfg, 1).unwrap().csv).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "step,loss,sup_loss,unsup_loss,keep_rate,map");
        assert!(rows.iter().skip(1).any(|r| r.ends_with(',')));
        assert!(!rows.last().unwrap().ends_with(','));
    }

    #[test]
    fn parallel_seeds_match_sequential() {
        let cfg = ExperimentConfig::parse("[protonet]\nsteps = 5").unwrap();
        let par = run_seeds(Experiment::Protonet, &cfg, &[4, 2, 9]).unwrap();
        for r in &par {
            assert_eq!(r, &run_seed(Experiment::Protonet, &cfg, r.seed).unwrap());
        }
        assert_eq!(par.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![4, 2, 9]);
    }

    #[test]
    fn validate_rejects_out_of_range_values() {
        let cfg = ExperimentConfig::parse("[mtdetr.flags]\nconfidence_threshold = 1.5").unwrap();
        assert!(matches!(validate(Experiment::Mtdetr, &cfg), Err(CliError::Config(_))));
        let cfg = ExperimentConfig::parse("[carbon]\nshares = [0.5, 0.6, 0.1]").unwrap();
        assert!(matches!(validate(Experiment::Carbon, &cfg), Err(CliError::Config(_))));
        assert!(validate(Experiment::Proseco, &ExperimentConfig::default()).is_ok());
    }
}
