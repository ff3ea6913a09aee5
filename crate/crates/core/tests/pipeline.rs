//! Cross-module checks through the public API only.

use fal_core::geometry::BBox;
use fal_core::losses::ClassLogits;
use fal_core::matching::{hungarian, supervised_cost_matrix, Assignment, CostMatrix, CostWeights};
use fal_core::numerics::{svd, Matrix};
use fal_core::rng::Rng;
use fal_core::spectral::{condition_number, PredictorMatrix};
use fal_core::teachstudent::{detector_forward, ema_update, gen_scene, run_proseco, DetectorParams, ProsecoConfig, SceneConfig};
use fal_core::Error;
use proptest::prelude::*;

fn matrix(r: usize, c: usize, vals: &[f64]) -> Matrix {
    Matrix::new(r, c, vals[..r * c].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn svd_reconstructs(r in 1usize..5, c in 1usize..5, vals in proptest::collection::vec(-3.0f64..3.0, 16)) {
        let m = matrix(r, c, &vals);
        let s = svd(&m).unwrap();
        prop_assert!(s.reconstruct().max_abs_diff(&m) < 1e-10);
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn kappa_scale_and_transpose_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 12), scale in 0.1f64..10.0) {
        let m = matrix(3, 4, &vals);
        let k = match condition_number(&PredictorMatrix::new(m.clone()).unwrap()) {
            Ok(k) => k,
            Err(Error::DegenerateMatrix { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assume!(k < 1e6);
        let ks = condition_number(&PredictorMatrix::new(m.scale(scale)).unwrap()).unwrap();
        let kt = condition_number(&PredictorMatrix::new(m.transpose()).unwrap()).unwrap();
        prop_assert!((ks - k).abs() <= 1e-8 * k);
        prop_assert!((kt - k).abs() <= 1e-8 * k);
    }

    #[test]
    fn hungarian_beats_any_fixed_assignment(seed in 0u64..500, n in 1usize..4, extra in 0usize..3) {
        let mut rng = Rng::new(seed);
        let m = n + extra;
        let sc = SceneConfig::default();
        let targets: Vec<(usize, BBox)> = (0..n)
            .map(|_| (rng.below(sc.n_classes), BBox::new(rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7), 0.2, 0.3).unwrap()))
            .collect();
        let preds: Vec<(ClassLogits, BBox)> = (0..m)
            .map(|_| {
                let b = BBox::new(rng.uniform_range(0.2, 0.8), rng.uniform_range(0.2, 0.8), 0.25, 0.25).unwrap();
                (ClassLogits::new(rng.normal_vec(sc.n_classes + 1, 1.0)).unwrap(), b)
            })
            .collect();
        let c = supervised_cost_matrix(&targets, &preds, &CostWeights::default()).unwrap();
        let best = hungarian(&c).unwrap().total_cost(&c);
        let first_n = Assignment::new((0..n).collect(), m).unwrap().total_cost(&c);
        prop_assert!(best <= first_n + 1e-12);
    }
}

#[test]
fn invalid_inputs_are_typed_errors() {
    assert!(matches!(BBox::new(0.5, 0.5, 0.0, 0.2), Err(Error::InvalidInput(_))));
    assert!(matches!(BBox::new(1.5, 0.5, 0.1, 0.2), Err(Error::InvalidInput(_))));
    assert!(CostMatrix::new(Matrix::zeros(3, 2)).is_err());
    assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    let p = DetectorParams::zeros(4, 2, 3, 5).unwrap();
    let q = DetectorParams::zeros(4, 2, 3, 6).unwrap();
    assert!(matches!(ema_update(&p, &q, 0.5), Err(Error::ShapeError(_))));
    assert!(matches!(ema_update(&p, &p, 1.5), Err(Error::InvalidInput(_))));
}

#[test]
fn ema_endpoints() {
    let mut rng = Rng::new(2);
    let t = DetectorParams::random(4, 2, 3, 5, 1.0, &mut rng).unwrap();
    let s = DetectorParams::random(4, 2, 3, 5, 1.0, &mut rng).unwrap();
    assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
    assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
}

#[test]
fn detector_output_has_one_prediction_per_token() {
    let sc = SceneConfig::default();
    let mut rng = Rng::new(5);
    let scene = gen_scene(&sc, &mut rng).unwrap();
    let p = DetectorParams::random(sc.token_dim, 6, sc.n_classes, sc.n_tokens, 0.1, &mut rng).unwrap();
    let out = detector_forward(&p, &scene.tokens()).unwrap();
    let preds = out.predictions();
    assert_eq!(preds.len(), sc.n_tokens);
    assert!(preds.iter().all(|(l, _)| l.len() == sc.n_classes + 1));
    assert!(out.proposals.iter().all(|q| q.z.len() == 6));
}

#[test]
fn proseco_runs_are_seed_deterministic() {
    let cfg = ProsecoConfig { steps: 8, ..Default::default() };
    let a = run_proseco(&cfg, 11).unwrap();
    let b = run_proseco(&cfg, 11).unwrap();
    let c = run_proseco(&cfg, 12).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.final_eval, b.final_eval);
    assert_ne!(a.records, c.records);
    assert_eq!(a.records.len(), 8);
}
