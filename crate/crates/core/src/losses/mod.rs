//! Loss functions with analytic gradients.
//!
//! Contrastive losses L2-normalize embeddings before any dot product. Gradients
//! are always taken with respect to the raw (unnormalized) inputs.

mod contrastive;
mod detr;

pub use contrastive::{info_nce, info_nce_grad, loc_nce, loc_nce_grad, loc_sce, loc_sce_grad, ContrastGrad};
pub use detr::{
    proseco_loss, proseco_loss_grad, supervised_detr_loss, supervised_detr_loss_grad, unsupervised_detr_loss,
    unsupervised_detr_loss_grad, DetrGrad, ProsecoGrad,
};
pub(crate) use detr::box_terms;

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::BBox;
use crate::numerics::{dot, log_softmax, norm, softmax_unchecked};
use crate::numerics::Matrix;
use crate::spectral::PredictorMatrix;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Class scores over `C` real classes plus the trailing no-object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits(Vec<f64>);

impl ClassLogits {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(invalid("class logits need at least one class plus no-object"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("class logits must be finite"));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the no-object class.
    pub fn no_object(&self) -> usize {
        self.0.len() - 1
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax_unchecked(&self.0, 1.0)
    }

    /// Most likely class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = k;
            }
        }
        best
    }
}

/// Object proposal: embedding and box.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub z: Vec<f64>,
    pub b: BBox,
}

impl Proposal {
    pub fn new(z: Vec<f64>, b: BBox) -> Result<Self> {
        if z.is_empty() || z.iter().any(|x| !x.is_finite()) {
            return Err(invalid("proposal embedding must be non-empty and finite"));
        }
        Ok(Self { z, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub tau_t: f64,
    pub lambda_sce: f64,
    pub delta: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { tau: 0.1, tau_t: 0.07, lambda_sce: 0.5, delta: 0.5 }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite() && self.tau_t > 0.0 && self.tau_t.is_finite()) {
            return Err(invalid("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_sce) {
            return Err(invalid(format!("lambda_sce {} outside [0, 1]", self.lambda_sce)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(invalid(format!("IoU threshold {} outside (0, 1]", self.delta)));
        }
        Ok(())
    }
}

/// Unit vector and original norm.
pub(crate) fn normalize(z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(z);
    if n == 0.0 || !n.is_finite() {
        return Err(invalid("cannot normalize a zero or non-finite embedding"));
    }
    Ok((z.iter().map(|x| x / n).collect(), n))
}

/// Pull a gradient taken at `u = z / |z|` back to `z`.
pub(crate) fn normalize_backward(u: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(u, g);
    u.iter().zip(g).map(|(ui, gi)| (gi - ui * proj) / n).collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("embedding lengths {} and {} differ", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero embedding"));
    }
    Ok(dot(a, b) / (na * nb))
}

fn check_class(logits: &ClassLogits, class: usize) -> Result<()> {
    if class >= logits.len() {
        return Err(invalid(format!("class {class} out of range for {} logits", logits.len())));
    }
    Ok(())
}

/// `-alpha (1 - p_t)^gamma log p_t` over a softmax.
pub fn focal_loss(logits: &ClassLogits, target: usize, gamma: f64, alpha: f64) -> Result<f64> {
    check_class(logits, target)?;
    let logp = log_softmax(&logits.0, 1.0)[target];
    let p = logp.exp();
    Ok(-alpha * (1.0 - p).powf(gamma) * logp)
}

/// Gradient of [`focal_loss`] with respect to the logits.
pub fn focal_loss_grad(logits: &ClassLogits, target: usize, gamma: f64, alpha: f64) -> Result<Vec<f64>> {
    check_class(logits, target)?;
    let logp = log_softmax(&logits.0, 1.0)[target];
    let probs = logits.probs();
    let p = logp.exp();
    let q = 1.0 - p;
    // dL/dlog p_t, using dp/dlog p = p
    let power_term = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p * logp };
    let d_logp = alpha * (power_term - q.powf(gamma));
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, &pk)| d_logp * (if k == target { 1.0 } else { 0.0 } - pk))
        .collect())
}

/// Cross-entropy of the student distribution against the teacher's soft targets.
pub fn soft_cross_entropy(teacher: &ClassLogits, student: &ClassLogits) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(shape(format!("{} teacher vs {} student logits", teacher.len(), student.len())));
    }
    let p = teacher.probs();
    let logq = log_softmax(&student.0, 1.0);
    Ok(-p.iter().zip(&logq).map(|(a, b)| a * b).sum::<f64>())
}

/// Gradients of [`soft_cross_entropy`]: `(d/dteacher, d/dstudent)`.
pub fn soft_cross_entropy_grad(teacher: &ClassLogits, student: &ClassLogits) -> Result<(Vec<f64>, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(shape(format!("{} teacher vs {} student logits", teacher.len(), student.len())));
    }
    let p = teacher.probs();
    let q = student.probs();
    let logq = log_softmax(&student.0, 1.0);
    let mean: f64 = p.iter().zip(&logq).map(|(a, b)| a * b).sum();
    let dt = p.iter().zip(&logq).map(|(pj, lq)| -pj * (lq - mean)).collect();
    let ds = q.iter().zip(&p).map(|(qj, pj)| qj - pj).collect();
    Ok((dt, ds))
}

/// Entropy of the softmax of `logits`.
pub fn entropy(logits: &ClassLogits) -> f64 {
    let lp = log_softmax(&logits.0, 1.0);
    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
}

/// Labelled embedding: vector and class index.
pub type Labeled = (Vec<f64>, usize);

fn n_way_of(support: &[Labeled], query: &[Labeled]) -> Result<usize> {
    if query.is_empty() {
        return Err(Error::InvalidEpisode("query set is empty".into()));
    }
    let n_way = support.iter().chain(query).map(|(_, c)| c + 1).max().unwrap_or(0);
    for c in 0..n_way {
        if !support.iter().any(|(_, l)| *l == c) {
            return Err(Error::InvalidEpisode(format!("class {c} has no support example")));
        }
    }
    let dim = support[0].0.len();
    if support.iter().chain(query).any(|(z, _)| z.len() != dim) {
        return Err(shape("embeddings of different lengths"));
    }
    Ok(n_way)
}

struct ProtoState {
    used: Vec<Vec<f64>>,
    norms: Vec<f64>,
    counts: Vec<usize>,
}

fn build_prototypes(support: &[Labeled], n_way: usize, normalize_rows: bool) -> Result<ProtoState> {
    let dim = support[0].0.len();
    let mut raw = vec![vec![0.0; dim]; n_way];
    let mut counts = vec![0usize; n_way];
    for (z, c) in support {
        counts[*c] += 1;
        for (r, x) in raw[*c].iter_mut().zip(z) {
            *r += x;
        }
    }
    for (r, &n) in raw.iter_mut().zip(&counts) {
        r.iter_mut().for_each(|x| *x /= n as f64);
    }
    let (used, norms) = if normalize_rows {
        let mut used = Vec::with_capacity(n_way);
        let mut norms = Vec::with_capacity(n_way);
        for r in &raw {
            let (u, n) = normalize(r)?;
            used.push(u);
            norms.push(n);
        }
        (used, norms)
    } else {
        (raw, vec![1.0; n_way])
    };
    Ok(ProtoState { used, norms, counts })
}

fn proto_logits(q: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    protos.iter().map(|c| -q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).collect()
}

/// Prototypical loss: mean over queries of `-log softmax(-|q - c|^2)[y]`.
///
/// Returns the loss and the prototype matrix (one row per class), normalized
/// rows when `normalize_protos` is set.
pub fn proto_loss(support: &[Labeled], query: &[Labeled], normalize_protos: bool) -> Result<(f64, PredictorMatrix)> {
    let n_way = n_way_of(support, query)?;
    let st = build_prototypes(support, n_way, normalize_protos)?;
    let mut total = 0.0;
    for (q, y) in query {
        total -= log_softmax(&proto_logits(q, &st.used), 1.0)[*y];
    }
    let w = PredictorMatrix::new(Matrix::from_rows(&st.used)?)?;
    Ok((total / query.len() as f64, w))
}

/// Gradients of [`proto_loss`] with respect to every support and query embedding.
pub struct ProtoGrad {
    pub loss: f64,
    pub support: Vec<Vec<f64>>,
    pub query: Vec<Vec<f64>>,
    /// Gradient with respect to the prototypes actually used in the distances.
    pub prototypes: Vec<Vec<f64>>,
}

pub fn proto_loss_grad(support: &[Labeled], query: &[Labeled], normalize_protos: bool) -> Result<ProtoGrad> {
    let n_way = n_way_of(support, query)?;
    let st = build_prototypes(support, n_way, normalize_protos)?;
    let dim = support[0].0.len();
    let nq = query.len() as f64;
    let mut loss = 0.0;
    let mut dproto = vec![vec![0.0; dim]; n_way];
    let mut dquery = Vec::with_capacity(query.len());
    for (q, y) in query {
        let logits = proto_logits(q, &st.used);
        let lp = log_softmax(&logits, 1.0);
        loss -= lp[*y];
        let mut dq = vec![0.0; dim];
        for c in 0..n_way {
            let g = (lp[c].exp() - if c == *y { 1.0 } else { 0.0 }) / nq;
            for d in 0..dim {
                let diff = q[d] - st.used[c][d];
                dq[d] -= 2.0 * g * diff;
                dproto[c][d] += 2.0 * g * diff;
            }
        }
        dquery.push(dq);
    }
    let draw: Vec<Vec<f64>> = if normalize_protos {
        (0..n_way).map(|c| normalize_backward(&st.used[c], st.norms[c], &dproto[c])).collect()
    } else {
        dproto.clone()
    };
    let dsupport = support
        .iter()
        .map(|(_, c)| draw[*c].iter().map(|g| g / st.counts[*c] as f64).collect())
        .collect();
    Ok(ProtoGrad { loss: loss / nq, support: dsupport, query: dquery, prototypes: dproto })
}

/// Identifies a loss for [`loss_grad`].
#[derive(Debug, Clone)]
pub enum LossInput<'a> {
    Focal { logits: &'a ClassLogits, target: usize, gamma: f64, alpha: f64 },
    SoftCrossEntropy { teacher: &'a ClassLogits, student: &'a ClassLogits },
    InfoNce { z: &'a [Vec<f64>], z_prime: &'a [Vec<f64>], tau: f64 },
    Proto { support: &'a [Labeled], query: &'a [Labeled], normalize: bool },
}

/// Loss value and flattened gradient over the continuous inputs, in the order
/// the inputs appear in the variant.
pub fn loss_grad(input: &LossInput<'_>) -> Result<(f64, Vec<f64>)> {
    match input {
        LossInput::Focal { logits, target, gamma, alpha } => {
            Ok((focal_loss(logits, *target, *gamma, *alpha)?, focal_loss_grad(logits, *target, *gamma, *alpha)?))
        }
        LossInput::SoftCrossEntropy { teacher, student } => {
            let (dt, ds) = soft_cross_entropy_grad(teacher, student)?;
            Ok((soft_cross_entropy(teacher, student)?, dt.into_iter().chain(ds).collect()))
        }
        LossInput::InfoNce { z, z_prime, tau } => {
            let (v, dz, dzp) = info_nce_grad(z, z_prime, *tau)?;
            Ok((v, dz.into_iter().chain(dzp).flatten().collect()))
        }
        LossInput::Proto { support, query, normalize } => {
            let g = proto_loss_grad(support, query, *normalize)?;
            Ok((g.loss, g.support.into_iter().chain(g.query).flatten().collect()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::rng::Rng;

    fn logits(v: &[f64]) -> ClassLogits {
        ClassLogits::new(v.to_vec()).unwrap()
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64]) {
        let scale = fd.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        for (a, f) in analytic.iter().zip(fd) {
            assert!((a - f).abs() <= 1e-5 * scale, "analytic {a} vs numeric {f}");
        }
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(&logits(&[40.0, 0.0, 0.0]), 0, 2.0, 0.25).unwrap() < 1e-30);
        let l = logits(&[0.3, -1.2, 0.7]);
        let ce = -log_softmax(l.as_slice(), 1.0)[2];
        assert!((focal_loss(&l, 2, 0.0, 1.0).unwrap() - ce).abs() < 1e-15);
        // p_t = 0.9 with two logits: ln 9 margin
        let l = logits(&[9f64.ln(), 0.0]);
        let got = focal_loss(&l, 0, 2.0, 1.0).unwrap();
        assert!((got - (-0.01 * 0.9f64.ln())).abs() < 1e-12);
        assert!((got - 0.0010536).abs() < 1e-7);
        assert!(focal_loss(&l, 2, 2.0, 1.0).is_err());
    }

    #[test]
    fn soft_ce_examples() {
        let u = logits(&[0.0, 0.0, 0.0]);
        assert!((soft_cross_entropy(&u, &u).unwrap() - 3f64.ln()).abs() < 1e-15);
        let sharp = logits(&[60.0, 0.0, 0.0]);
        assert!(soft_cross_entropy(&sharp, &sharp).unwrap() < 1e-20);
        let mut rng = Rng::new(4);
        let t = logits(&rng.normal_vec(4, 1.0));
        let s = logits(&rng.normal_vec(4, 1.0));
        let pt: Vec<f64> = t.as_slice().iter().map(|x| x.exp()).collect();
        let zt: f64 = pt.iter().sum();
        let zs: f64 = s.as_slice().iter().map(|x| x.exp()).sum();
        let naive: f64 = -(0..4).map(|k| pt[k] / zt * (s.as_slice()[k].exp() / zs).ln()).sum::<f64>();
        assert!((soft_cross_entropy(&t, &s).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_dominates_entropy() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let t = logits(&rng.normal_vec(5, 2.0));
            let s = logits(&rng.normal_vec(5, 2.0));
            assert!(soft_cross_entropy(&t, &s).unwrap() >= entropy(&t) - 1e-12);
            assert!((soft_cross_entropy(&t, &t).unwrap() - entropy(&t)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_and_soft_ce_gradients() {
        let mut rng = Rng::new(77);
        for _ in 0..10 {
            let v = rng.normal_vec(4, 1.5);
            let target = rng.below(4);
            for (gamma, alpha) in [(2.0, 0.25), (0.0, 1.0), (1.5, 0.5)] {
                let g = focal_loss_grad(&logits(&v), target, gamma, alpha).unwrap();
                let fd = finite_diff_grad(|x| focal_loss(&logits(x), target, gamma, alpha).unwrap(), &v, 1e-6).unwrap();
                assert_grad_close(&g, &fd);
            }
            let t = rng.normal_vec(4, 1.0);
            let s = rng.normal_vec(4, 1.0);
            let (dt, ds) = soft_cross_entropy_grad(&logits(&t), &logits(&s)).unwrap();
            let fdt = finite_diff_grad(|x| soft_cross_entropy(&logits(x), &logits(&s)).unwrap(), &t, 1e-6).unwrap();
            let fds = finite_diff_grad(|x| soft_cross_entropy(&logits(&t), &logits(x)).unwrap(), &s, 1e-6).unwrap();
            assert_grad_close(&dt, &fdt);
            assert_grad_close(&ds, &fds);
            let p = logits(&t).probs();
            let q = logits(&s).probs();
            for k in 0..4 {
                assert!((ds[k] - (q[k] - p[k])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn proto_examples() {
        // query at prototype 0, prototype 1 at squared distance 1
        let support = vec![(vec![0.0, 0.0], 0), (vec![1.0, 0.0], 1)];
        let query = vec![(vec![0.0, 0.0], 0)];
        let (l, w) = proto_loss(&support, &query, false).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        assert_eq!(w.rows(), 2);

        let support = vec![(vec![1.0, 2.0], 0), (vec![1.0, 2.0], 1), (vec![1.0, 2.0], 2)];
        let query = vec![(vec![-3.0, 0.5], 1)];
        assert!((proto_loss(&support, &query, false).unwrap().0 - 3f64.ln()).abs() < 1e-12);

        let support = vec![(vec![1.0, 2.0], 0)];
        let query = vec![(vec![5.0, 5.0], 0)];
        assert_eq!(proto_loss(&support, &query, false).unwrap().0, 0.0);

        let support = vec![(vec![1.0, 2.0], 0)];
        let query = vec![(vec![5.0, 5.0], 1)];
        assert!(matches!(proto_loss(&support, &query, false), Err(Error::InvalidEpisode(_))));
    }

    #[test]
    fn proto_normalized_rows_are_unit() {
        let mut rng = Rng::new(3);
        let support: Vec<Labeled> = (0..10).map(|i| (rng.normal_vec(6, 1.0), i % 5)).collect();
        let query: Vec<Labeled> = (0..5).map(|i| (rng.normal_vec(6, 1.0), i)).collect();
        let (_, w) = proto_loss(&support, &query, true).unwrap();
        for r in 0..5 {
            assert!((norm(w.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn proto_support_order_invariant() {
        let mut rng = Rng::new(10);
        let mut support: Vec<Labeled> = (0..12).map(|i| (rng.normal_vec(4, 1.0), i % 3)).collect();
        let query: Vec<Labeled> = (0..6).map(|i| (rng.normal_vec(4, 1.0), i % 3)).collect();
        let a = proto_loss(&support, &query, false).unwrap().0;
        rng.shuffle(&mut support);
        let b = proto_loss(&support, &query, false).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn proto_gradients() {
        let mut rng = Rng::new(21);
        for normalize_protos in [false, true] {
            for _ in 0..10 {
                let support: Vec<Labeled> = (0..6).map(|i| (rng.normal_vec(3, 1.0), i % 3)).collect();
                let query: Vec<Labeled> = (0..4).map(|i| (rng.normal_vec(3, 1.0), i % 3)).collect();
                let flat: Vec<f64> = support.iter().chain(&query).flat_map(|(z, _)| z.clone()).collect();
                let rebuild = |x: &[f64]| {
                    let mut it = x.chunks(3);
                    let s: Vec<Labeled> = support.iter().map(|(_, c)| (it.next().unwrap().to_vec(), *c)).collect();
                    let q: Vec<Labeled> = query.iter().map(|(_, c)| (it.next().unwrap().to_vec(), *c)).collect();
                    (s, q)
                };
                let fd = finite_diff_grad(
                    |x| {
                        let (s, q) = rebuild(x);
                        proto_loss(&s, &q, normalize_protos).unwrap().0
                    },
                    &flat,
                    1e-6,
                )
                .unwrap();
                let (_, g) = loss_grad(&LossInput::Proto { support: &support, query: &query, normalize: normalize_protos }).unwrap();
                assert_grad_close(&g, &fd);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn focal_nonnegative(v in proptest::collection::vec(-20.0f64..20.0, 2..6), t in 0usize..6) {
                let l = logits(&v);
                let t = t % v.len();
                prop_assert!(focal_loss(&l, t, FOCAL_GAMMA, FOCAL_ALPHA).unwrap() >= 0.0);
            }

            #[test]
            fn gibbs(t in proptest::collection::vec(-5.0f64..5.0, 3), s in proptest::collection::vec(-5.0f64..5.0, 3)) {
                let (t, s) = (logits(&t), logits(&s));
                prop_assert!(soft_cross_entropy(&t, &s).unwrap() >= entropy(&t) - 1e-12);
            }
        }
    }
}
