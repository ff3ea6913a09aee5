//! Episodic few-shot machinery: synthetic tasks, ProtoNet training with a
//! linear encoder, the MAML linear-regression recursion, the two-task
//! counterexample for well-conditioned predictors, IMP inference and the
//! Meta-Curvature gradient transform.

use crate::error::{invalid, shape, Error, Result};
use crate::losses::{normalize, normalize_backward, proto_loss_grad, Labeled};
use crate::numerics::{n_mode_product, norm, svd, Matrix, Tensor3};
use crate::rng::Rng;
use crate::spectral::{condition_number, grad_entropy_regularizer, sv_entropy, PredictorMatrix};

/// Synthetic N-way K-shot task generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskGenConfig {
    pub d: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_spread: f64,
    pub noise_std: f64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self { d: 32, n_way: 5, k_shot: 1, q_queries: 15, class_spread: 1.0, noise_std: 0.05 }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_way == 0 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(invalid("task dimensions and counts must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.class_spread.is_finite() && self.class_spread >= 0.0) {
            return Err(invalid("noise_std and class_spread must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub support: Vec<Labeled>,
    pub query: Vec<Labeled>,
}

pub fn sample_episode(cfg: &TaskGenConfig, rng: &mut Rng) -> Result<Episode> {
    cfg.validate()?;
    let means: Vec<Vec<f64>> = (0..cfg.n_way).map(|_| rng.on_sphere(cfg.d, cfg.class_spread)).collect();
    let draw = |c: usize, rng: &mut Rng| -> Labeled {
        let noise = rng.normal_vec(cfg.d, cfg.noise_std);
        (means[c].iter().zip(noise).map(|(m, e)| m + e).collect(), c)
    };
    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    for c in 0..cfg.n_way {
        for _ in 0..cfg.k_shot {
            support.push(draw(c, rng));
        }
    }
    let mut query = Vec::with_capacity(cfg.n_way * cfg.q_queries);
    for c in 0..cfg.n_way {
        for _ in 0..cfg.q_queries {
            query.push(draw(c, rng));
        }
    }
    Ok(Episode { n_way: cfg.n_way, support, query })
}

/// Linear embedding `x -> phi x` with `phi` of shape `k x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub phi: Matrix,
}

impl LinearEncoder {
    pub fn new(phi: Matrix) -> Result<Self> {
        if phi.is_empty() || !phi.is_finite() {
            return Err(invalid("encoder must be non-empty and finite"));
        }
        Ok(Self { phi })
    }

    pub fn random(k: usize, d: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Self::new(Matrix::new(k, d, rng.normal_vec(k * d, std))?)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.phi.matvec(x)
    }

    fn encode_all(&self, items: &[Labeled]) -> Result<Vec<Labeled>> {
        items.iter().map(|(x, c)| Ok((self.encode(x)?, *c))).collect()
    }
}

/// Class prototypes of the encoded support set, one row per class.
pub fn prototypes(support: &[Labeled], encoder: &LinearEncoder, normalize_rows: bool) -> Result<PredictorMatrix> {
    let n_way = support.iter().map(|(_, c)| c + 1).max().ok_or_else(|| Error::InvalidEpisode("empty support set".into()))?;
    let k = encoder.phi.rows();
    let mut rows = vec![vec![0.0; k]; n_way];
    let mut counts = vec![0usize; n_way];
    for (x, c) in support {
        let z = encoder.encode(x)?;
        counts[*c] += 1;
        rows[*c].iter_mut().zip(z).for_each(|(r, v)| *r += v);
    }
    for (c, row) in rows.iter_mut().enumerate() {
        if counts[c] == 0 {
            return Err(Error::InvalidEpisode(format!("class {c} has no support example")));
        }
        row.iter_mut().for_each(|v| *v /= counts[c] as f64);
        if normalize_rows {
            *row = normalize(row)?.0;
        }
    }
    PredictorMatrix::new(Matrix::from_rows(&rows)?)
}

/// Fraction of queries whose nearest prototype carries the right label.
pub fn nearest_prototype_accuracy(w: &Matrix, query: &[Labeled]) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    let correct = query
        .iter()
        .filter(|(z, y)| {
            let dist = |r: usize| w.row(r).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..w.rows()).min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap()).unwrap();
            best == *y
        })
        .count();
    correct as f64 / query.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProtoVariant {
    Vanilla,
    Normalized,
    /// Normalized prototypes plus `lambda1` times the singular-value entropy term.
    Entropy { lambda1: f64 },
}

impl ProtoVariant {
    fn normalizes(&self) -> bool {
        !matches!(self, ProtoVariant::Vanilla)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoNetConfig {
    pub task: TaskGenConfig,
    /// Embedding dimension `k`.
    pub embed_dim: usize,
    /// Number of gradient steps, each on a batch of episodes.
    pub steps: usize,
    pub batch_episodes: usize,
    pub lr: f64,
    pub init_std: f64,
    pub variant: ProtoVariant,
}

impl Default for ProtoNetConfig {
    fn default() -> Self {
        Self {
            task: TaskGenConfig::default(),
            embed_dim: 16,
            steps: 500,
            batch_episodes: 4,
            lr: 0.1,
            init_std: 0.1,
            variant: ProtoVariant::Vanilla,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub kappa_wn: f64,
    pub frob_wn: f64,
    pub accuracy: f64,
    pub entropy_wn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub encoder: LinearEncoder,
}

impl TrainLog {
    pub fn first(&self) -> &TrainRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &TrainRecord {
        self.records.last().expect("log holds at least the initial record")
    }
}

struct BatchEval {
    loss: f64,
    w: PredictorMatrix,
    accuracy: f64,
}

fn eval_batch(encoder: &LinearEncoder, episodes: &[Episode], normalize_rows: bool) -> Result<BatchEval> {
    let mut rows = Vec::new();
    let mut loss = 0.0;
    let mut acc = 0.0;
    for ep in episodes {
        let s = encoder.encode_all(&ep.support)?;
        let q = encoder.encode_all(&ep.query)?;
        let (l, w) = crate::losses::proto_loss(&s, &q, normalize_rows)?;
        loss += l;
        acc += nearest_prototype_accuracy(&w, &q);
        for r in 0..w.rows() {
            rows.push(w.row(r).to_vec());
        }
    }
    let n = episodes.len() as f64;
    Ok(BatchEval { loss: loss / n, w: PredictorMatrix::new(Matrix::from_rows(&rows)?)?, accuracy: acc / n })
}

fn record(step: usize, loss: f64, ev: &BatchEval) -> Result<TrainRecord> {
    let kappa = match condition_number(&ev.w) {
        Ok(k) => k,
        Err(Error::DegenerateMatrix { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(TrainRecord {
        step,
        loss,
        kappa_wn: kappa,
        frob_wn: ev.w.frobenius_norm(),
        accuracy: ev.accuracy,
        entropy_wn: sv_entropy(&ev.w)?,
    })
}

/// Gradient of the batch objective with respect to the encoder.
fn batch_grad(encoder: &LinearEncoder, episodes: &[Episode], variant: ProtoVariant) -> Result<(f64, Matrix)> {
    let (k, d) = encoder.phi.shape();
    let mut g = Matrix::zeros(k, d);
    let nb = episodes.len() as f64;
    let normalize_rows = variant.normalizes();
    let mut loss = 0.0;
    let outer_add = |g: &mut Matrix, dz: &[f64], x: &[f64], s: f64| {
        for (r, dzr) in dz.iter().enumerate() {
            let row = g.row_mut(r);
            for (c, xc) in x.iter().enumerate() {
                row[c] += s * dzr * xc;
            }
        }
    };

    // stacked prototypes of the batch, for the entropy term
    let mut raw_protos: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut encoded = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let s = encoder.encode_all(&ep.support)?;
        let q = encoder.encode_all(&ep.query)?;
        let pg = proto_loss_grad(&s, &q, normalize_rows)?;
        loss += pg.loss;
        for ((x, _), dz) in ep.support.iter().zip(&pg.support) {
            outer_add(&mut g, dz, x, 1.0 / nb);
        }
        for ((x, _), dz) in ep.query.iter().zip(&pg.query) {
            outer_add(&mut g, dz, x, 1.0 / nb);
        }
        if let ProtoVariant::Entropy { .. } = variant {
            for c in 0..ep.n_way {
                let members: Vec<&Vec<f64>> = s.iter().filter(|(_, l)| *l == c).map(|(z, _)| z).collect();
                let mut mean = vec![0.0; k];
                for z in &members {
                    mean.iter_mut().zip(z.iter()).for_each(|(m, v)| *m += v / members.len() as f64);
                }
                raw_protos.push(normalize(&mean)?);
            }
        }
        encoded.push(s);
    }
    loss /= nb;

    if let ProtoVariant::Entropy { lambda1 } = variant {
        let rows: Vec<Vec<f64>> = raw_protos.iter().map(|(u, _)| u.clone()).collect();
        let w = PredictorMatrix::new(Matrix::from_rows(&rows)?)?;
        loss += lambda1 * sv_entropy(&w)?;
        let gw = grad_entropy_regularizer(&w, lambda1)?;
        let mut row = 0;
        for (ep, s) in episodes.iter().zip(&encoded) {
            for c in 0..ep.n_way {
                let (u, n) = &raw_protos[row];
                let graw = normalize_backward(u, *n, gw.row(row));
                let idx: Vec<usize> = (0..s.len()).filter(|&i| s[i].1 == c).collect();
                for &i in &idx {
                    outer_add(&mut g, &graw, &ep.support[i].0, 1.0 / idx.len() as f64);
                }
                row += 1;
            }
        }
    }
    Ok((loss, g))
}

/// Gradient descent on the prototypical objective with a linear encoder.
///
/// Metrics are measured on a fixed evaluation batch drawn once from its own
/// stream; `W_N` stacks the prototypes of all episodes of that batch. Record
/// 0 holds the metrics at initialization.
pub fn train_protonet(cfg: &ProtoNetConfig, rng: &Rng) -> Result<TrainLog> {
    cfg.task.validate()?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(invalid("learning rate must be positive"));
    }
    if cfg.batch_episodes == 0 || cfg.embed_dim == 0 {
        return Err(invalid("batch size and embedding dimension must be positive"));
    }
    let mut init_rng = rng.split_named("init");
    let mut train_rng = rng.split_named("episodes");
    let mut eval_rng = rng.split_named("eval");
    let mut encoder = LinearEncoder::random(cfg.embed_dim, cfg.task.d, cfg.init_std, &mut init_rng)?;
    let eval_eps: Vec<Episode> =
        (0..cfg.batch_episodes).map(|_| sample_episode(&cfg.task, &mut eval_rng)).collect::<Result<_>>()?;
    let normalize_rows = cfg.variant.normalizes();

    let ev = eval_batch(&encoder, &eval_eps, normalize_rows)?;
    let mut records = vec![record(0, ev.loss, &ev)?];
    for step in 1..=cfg.steps {
        let eps: Vec<Episode> =
            (0..cfg.batch_episodes).map(|_| sample_episode(&cfg.task, &mut train_rng)).collect::<Result<_>>()?;
        let (loss, g) = batch_grad(&encoder, &eps, cfg.variant)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        encoder.phi.axpy(-cfg.lr, &g)?;
        let ev = eval_batch(&encoder, &eval_eps, normalize_rows)?;
        if !ev.loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: ev.loss });
        }
        records.push(record(step, loss, &ev)?);
    }
    Ok(TrainLog { records, encoder })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Iid,
    /// `theta_1`, `theta_2` independent, then `theta_{i+1} = c_i theta_i`
    /// with `c_i ~ U[0.5, 2]`.
    Colinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MamlStep {
    pub iteration: usize,
    /// Rows `w_i` and `w_{i+1}`.
    pub w2: Matrix,
    /// `+inf` when the pair is numerically rank one.
    pub kappa: f64,
}

/// Closed-form MAML meta-update for Gaussian linear regression,
/// `w_t = w_{t-1} - c (w_{t-1} - theta_t)` with `c = beta (1 - alpha)^2`,
/// starting from zero. Emits the last-two-predictor matrix for `i = 1..=iterations`.
pub fn maml_linreg_sim(iterations: usize, alpha: f64, beta: f64, d: usize, mode: TaskMode, rng: &mut Rng) -> Result<Vec<MamlStep>> {
    if d < 2 {
        return Err(invalid("dimension must be at least 2"));
    }
    let c = beta * (1.0 - alpha).powi(2);
    if !(c > 0.0 && c < 2.0) {
        return Err(invalid(format!("step factor beta(1-alpha)^2 = {c} outside (0, 2)")));
    }
    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(iterations + 1);
    for t in 0..=iterations {
        let theta = match mode {
            TaskMode::Colinear if t >= 2 => {
                let s = rng.uniform_range(0.5, 2.0);
                thetas[t - 1].iter().map(|x| s * x).collect()
            }
            _ => rng.normal_vec(d, 1.0),
        };
        thetas.push(theta);
    }
    let mut w = vec![vec![0.0; d]];
    for theta in &thetas {
        let prev = w.last().unwrap();
        let next = prev.iter().zip(theta).map(|(p, t)| p - c * (p - t)).collect();
        w.push(next);
    }
    let mut out = Vec::with_capacity(iterations);
    for i in 1..=iterations {
        let w2 = Matrix::from_rows(&[w[i].clone(), w[i + 1].clone()])?;
        let kappa = match condition_number(&PredictorMatrix::new(w2.clone())?) {
            Ok(k) => k,
            Err(Error::DegenerateMatrix { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        out.push(MamlStep { iteration: i, w2, kappa });
    }
    Ok(out)
}

/// Two-task construction where the optimal predictors are ill-conditioned
/// while an alternative representation fits the same data with nearly
/// orthogonal predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop44 {
    pub phi_star: Matrix,
    pub w_star: Matrix,
    pub phi_hat: Matrix,
    pub w_hat: Matrix,
    pub kappa_star: f64,
    pub kappa_hat: f64,
    /// `kappa_hat` from the closed form.
    pub kappa_hat_closed: f64,
    /// `(task, x, y)` samples.
    pub samples: Vec<(usize, Vec<f64>, f64)>,
    /// Largest `|y - <w_t, Phi^T x>|` over the samples, for each representation.
    pub residual_star: f64,
    pub residual_hat: f64,
}

pub fn prop44_kappa_hat_closed(eps: f64) -> f64 {
    let r = eps * (eps * eps + 4.0).sqrt();
    ((2.0 + eps * eps + r) / (2.0 + eps * eps - r)).sqrt()
}

/// Builds the example for `epsilon` in `(0, 1)` and dimension `d >= 3`,
/// drawing `n_samples` labelled points with second coordinate `shift`.
pub fn prop44_example(epsilon: f64, d: usize, shift: f64, n_samples: usize, rng: &mut Rng) -> Result<Prop44> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if d < 3 {
        return Err(invalid("dimension must be at least 3"));
    }
    let projector = |a: usize, b: usize| Matrix::from_fn(d, 2, |r, c| if (c == 0 && r == a) || (c == 1 && r == b) { 1.0 } else { 0.0 });
    let phi_star = projector(0, 1);
    let phi_hat = projector(1, 2);
    let w_star = Matrix::from_rows(&[vec![1.0, epsilon], vec![1.0, -epsilon]])?;
    let w_hat = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, -epsilon]])?;
    let kappa_star = condition_number(&PredictorMatrix::new(w_star.clone())?)?;
    let kappa_hat = condition_number(&PredictorMatrix::new(w_hat.clone())?)?;
    let k = shift;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let task = rng.below(2);
        let positive = rng.bernoulli(0.5);
        let head = match (task, positive) {
            (0, true) => [1.0 - k * epsilon, k, 1.0],
            (0, false) => [-1.0 - k * epsilon, k, -1.0],
            (_, true) => [1.0 + k * epsilon, k, (k - 1.0) / epsilon],
            (_, false) => [-1.0 + k * epsilon, k, (1.0 + k) / epsilon],
        };
        let mut x = head.to_vec();
        x.extend(rng.normal_vec(d - 3, 1.0));
        samples.push((task, x, if positive { 1.0 } else { -1.0 }));
    }
    let residual = |phi: &Matrix, w: &Matrix| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (t, x, y) in &samples {
            let z = phi.transpose().matvec(x)?;
            let pred: f64 = w.row(*t).iter().zip(&z).map(|(a, b)| a * b).sum();
            worst = worst.max((pred - y).abs());
        }
        Ok(worst)
    };
    let residual_star = residual(&phi_star, &w_star)?;
    let residual_hat = residual(&phi_hat, &w_hat)?;
    Ok(Prop44 {
        kappa_hat_closed: prop44_kappa_hat_closed(epsilon),
        phi_star,
        w_star,
        phi_hat,
        w_hat,
        kappa_star,
        kappa_hat,
        samples,
        residual_star,
        residual_hat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub class: usize,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpResult {
    pub predictions: Vec<usize>,
    pub clusters: Vec<Cluster>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Infinite-mixture-prototype inference on one episode.
///
/// One cluster per class starts at the class mean. A support point whose
/// distance to every cluster of its class exceeds `lambda_thresh` opens a new
/// cluster at itself. Points are then softly assigned within their class with
/// Gaussian weights of width `sigma_cluster`, means are recomputed, and
/// clusters left with less than half a point of mass are dropped. Queries take
/// the class of their closest cluster.
pub fn imp_infer(
    support: &[Labeled],
    query: &[Vec<f64>],
    lambda_thresh: f64,
    sigma_cluster: f64,
    encoder: &LinearEncoder,
) -> Result<ImpResult> {
    if support.is_empty() {
        return Err(Error::InvalidEpisode("empty support set".into()));
    }
    if !(lambda_thresh > 0.0 && sigma_cluster > 0.0) {
        return Err(invalid("lambda_thresh and sigma_cluster must be positive"));
    }
    let s = encoder.encode_all(support)?;
    let protos = prototypes(support, encoder, false)?;
    let mut clusters: Vec<Cluster> = (0..protos.rows()).map(|c| Cluster { class: c, mean: protos.row(c).to_vec() }).collect();

    for (z, c) in &s {
        let nearest = clusters
            .iter()
            .filter(|cl| cl.class == *c)
            .map(|cl| sq_dist(z, &cl.mean).sqrt())
            .fold(f64::INFINITY, f64::min);
        if nearest > lambda_thresh {
            clusters.push(Cluster { class: *c, mean: z.clone() });
        }
    }

    let k = s[0].0.len();
    let mut sums = vec![vec![0.0; k]; clusters.len()];
    let mut mass = vec![0.0; clusters.len()];
    for (z, c) in &s {
        let idx: Vec<usize> = (0..clusters.len()).filter(|&j| clusters[j].class == *c).collect();
        let logits: Vec<f64> = idx.iter().map(|&j| -sq_dist(z, &clusters[j].mean) / (2.0 * sigma_cluster * sigma_cluster)).collect();
        let weights = crate::numerics::softmax(&logits, 1.0)?;
        for (&j, wj) in idx.iter().zip(weights) {
            mass[j] += wj;
            sums[j].iter_mut().zip(z).for_each(|(s, v)| *s += wj * v);
        }
    }
    let clusters: Vec<Cluster> = clusters
        .into_iter()
        .enumerate()
        .filter(|(j, _)| mass[*j] >= 0.5)
        .map(|(j, cl)| Cluster { class: cl.class, mean: sums[j].iter().map(|v| v / mass[j]).collect() })
        .collect();

    let predictions = query
        .iter()
        .map(|x| {
            let z = encoder.encode(x)?;
            let best = clusters
                .iter()
                .min_by(|a, b| sq_dist(&z, &a.mean).partial_cmp(&sq_dist(&z, &b.mean)).unwrap())
                .expect("every class keeps at least one cluster");
            Ok(best.class)
        })
        .collect::<Result<_>>()?;
    Ok(ImpResult { predictions, clusters })
}

/// Meta-Curvature transform `G x_3 M_f x_2 M_i x_1 M_o`.
pub fn mc_transform(g: &Tensor3, m_o: &Matrix, m_i: &Matrix, m_f: &Matrix) -> Result<Tensor3> {
    let (d1, d2, d3) = g.dims();
    for (m, dim, name) in [(m_o, d1, "M_o"), (m_i, d2, "M_i"), (m_f, d3, "M_f")] {
        if m.shape() != (dim, dim) {
            return Err(shape(format!("{name} is {:?}, expected {dim}x{dim}", m.shape())));
        }
    }
    let t = n_mode_product(g, m_f, 3)?;
    let t = n_mode_product(&t, m_i, 2)?;
    n_mode_product(&t, m_o, 1)
}

/// `kappa` of a predictor matrix with degenerate matrices mapped to `+inf`.
pub fn kappa_or_inf(w: &Matrix) -> Result<f64> {
    let s = svd(w)?;
    let sv = &s.singular_values;
    let (max, min) = (sv[0], sv[sv.len() - 1]);
    if max == 0.0 || min <= crate::spectral::DEGENERACY_TOL * max {
        Ok(f64::INFINITY)
    } else {
        Ok(max / min)
    }
}

/// Row norms of a matrix.
pub fn row_norms(w: &Matrix) -> Vec<f64> {
    (0..w.rows()).map(|r| norm(w.row(r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kron, vec as vec3};

    #[test]
    fn episode_shapes_and_determinism() {
        let cfg = TaskGenConfig::default();
        let a = sample_episode(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a.support.len(), 5);
        assert_eq!(a.query.len(), 75);
        assert_eq!(a, sample_episode(&cfg, &mut Rng::new(1)).unwrap());
        let quiet = TaskGenConfig { noise_std: 0.0, k_shot: 3, ..cfg };
        let e = sample_episode(&quiet, &mut Rng::new(2)).unwrap();
        for (x, c) in e.support.iter().chain(&e.query) {
            let first = &e.support.iter().find(|(_, l)| l == c).unwrap().0;
            assert_eq!(x, first);
        }
    }

    #[test]
    fn prototype_examples() {
        let mut rng = Rng::new(3);
        let enc = LinearEncoder::random(4, 6, 1.0, &mut rng).unwrap();
        let support: Vec<Labeled> = (0..3).map(|c| (rng.normal_vec(6, 1.0), c)).collect();
        let w = prototypes(&support, &enc, false).unwrap();
        for (x, c) in &support {
            let z = enc.encode(x).unwrap();
            assert_eq!(w.row(*c), &z[..]);
        }
        let wn = prototypes(&support, &enc, true).unwrap();
        for r in 0..3 {
            assert!((norm(wn.row(r)) - 1.0).abs() < 1e-12);
        }
        let a = rng.normal_vec(6, 1.0);
        let b = rng.normal_vec(6, 1.0);
        let w = prototypes(&[(a.clone(), 0), (b.clone(), 0)], &enc, false).unwrap();
        let (za, zb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
        for i in 0..4 {
            assert!((w[(0, i)] - (za[i] + zb[i]) / 2.0).abs() < 1e-12);
        }
        assert!(matches!(prototypes(&[(a, 1)], &enc, false), Err(Error::InvalidEpisode(_))));
    }

    #[test]
    fn noiseless_separated_episodes_are_solved() {
        let cfg = TaskGenConfig { noise_std: 0.0, class_spread: 3.0, ..Default::default() };
        let mut rng = Rng::new(4);
        let enc = LinearEncoder::new(Matrix::identity(cfg.d)).unwrap();
        for _ in 0..5 {
            let e = sample_episode(&cfg, &mut rng).unwrap();
            let w = prototypes(&e.support, &enc, true).unwrap();
            let q: Vec<Labeled> = e.query.iter().map(|(x, c)| (normalize(x).unwrap().0, *c)).collect();
            assert_eq!(nearest_prototype_accuracy(&w, &q), 1.0);
        }
    }

    #[test]
    fn zero_steps_logs_only_initial_metrics() {
        let cfg = ProtoNetConfig { steps: 0, ..Default::default() };
        let log = train_protonet(&cfg, &Rng::new(1)).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].step, 0);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let task = TaskGenConfig { d: 5, n_way: 3, k_shot: 2, q_queries: 2, ..Default::default() };
        let mut rng = Rng::new(8);
        let eps: Vec<Episode> = (0..2).map(|_| sample_episode(&task, &mut rng).unwrap()).collect();
        for variant in [ProtoVariant::Vanilla, ProtoVariant::Normalized, ProtoVariant::Entropy { lambda1: 0.7 }] {
            let enc = LinearEncoder::random(4, 5, 0.5, &mut rng).unwrap();
            let (_, g) = batch_grad(&enc, &eps, variant).unwrap();
            let fd = crate::numerics::finite_diff_grad(
                |x| {
                    let e = LinearEncoder::new(Matrix::new(4, 5, x.to_vec()).unwrap()).unwrap();
                    batch_grad(&e, &eps, variant).unwrap().0
                },
                enc.phi.as_slice(),
                1e-6,
            )
            .unwrap();
            let scale = fd.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            for (a, f) in g.as_slice().iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-5 * scale, "{variant:?}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn maml_first_step_and_fixed_point() {
        let mut rng = Rng::new(5);
        let (alpha, beta) = (0.1, 0.5);
        let c = beta * (1.0 - alpha) * (1.0 - alpha);
        let mut probe = rng.clone();
        let traj = maml_linreg_sim(3, alpha, beta, 4, TaskMode::Iid, &mut rng).unwrap();
        let theta1 = probe.normal_vec(4, 1.0);
        for j in 0..4 {
            assert!((traj[0].w2[(0, j)] - c * theta1[j]).abs() < 1e-15);
        }
        // c = 1 jumps straight to the task parameter
        let mut rng = Rng::new(6);
        let mut probe = rng.clone();
        let traj = maml_linreg_sim(2, 0.0, 1.0, 3, TaskMode::Iid, &mut rng).unwrap();
        let theta1 = probe.normal_vec(3, 1.0);
        let theta2 = probe.normal_vec(3, 1.0);
        assert_eq!(traj[0].w2.row(0), &theta1[..]);
        assert_eq!(traj[0].w2.row(1), &theta2[..]);
        assert!(maml_linreg_sim(2, 0.0, 2.5, 3, TaskMode::Iid, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn maml_colinear_kappa_never_decreases() {
        for seed in 0..20 {
            let traj = maml_linreg_sim(200, 0.025, 1.0, 5, TaskMode::Colinear, &mut Rng::new(seed)).unwrap();
            for w in traj.windows(2) {
                assert!(w[1].kappa >= w[0].kappa - 1e-9, "seed {seed} at {}: {} < {}", w[1].iteration, w[1].kappa, w[0].kappa);
            }
        }
    }

    #[test]
    fn prop44_values() {
        let mut rng = Rng::new(9);
        let p = prop44_example(0.02, 6, 1.0, 200, &mut rng).unwrap();
        assert!((p.kappa_star - 50.0).abs() < 1e-9);
        assert!((p.kappa_hat - 1.0202008).abs() < 1e-6);
        assert!((p.kappa_hat - p.kappa_hat_closed).abs() < 1e-12);
        assert!(p.residual_star < 1e-12 && p.residual_hat < 1e-12);
        let p = prop44_example(0.3, 3, 2.5, 100, &mut rng).unwrap();
        assert!(p.residual_star < 1e-12 && p.residual_hat < 1e-12);
        let mut prev = (f64::INFINITY, 0.0);
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let p = prop44_example(eps, 4, 1.0, 0, &mut rng).unwrap();
            assert!(p.kappa_hat < prev.0 && p.kappa_star > prev.1);
            prev = (p.kappa_hat, p.kappa_star);
        }
        assert!(prop44_example(1.5, 4, 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn imp_reduces_to_protonet_for_large_threshold() {
        let cfg = TaskGenConfig { k_shot: 3, noise_std: 0.8, ..Default::default() };
        let mut rng = Rng::new(12);
        let enc = LinearEncoder::random(8, cfg.d, 0.3, &mut rng).unwrap();
        let e = sample_episode(&cfg, &mut rng).unwrap();
        let q: Vec<Vec<f64>> = e.query.iter().map(|(x, _)| x.clone()).collect();
        let imp = imp_infer(&e.support, &q, 1e12, 1.0, &enc).unwrap();
        assert_eq!(imp.clusters.len(), 5);
        let w = prototypes(&e.support, &enc, false).unwrap();
        for (x, p) in q.iter().zip(&imp.predictions) {
            let z = enc.encode(x).unwrap();
            let nearest = (0..5).min_by(|&a, &b| sq_dist(&z, w.row(a)).partial_cmp(&sq_dist(&z, w.row(b))).unwrap()).unwrap();
            assert_eq!(*p, nearest);
        }
    }

    #[test]
    fn imp_spawns_clusters() {
        let enc = LinearEncoder::new(Matrix::identity(2)).unwrap();
        let support = vec![(vec![0.0, 0.0], 0), (vec![0.1, 0.0], 0), (vec![5.0, 5.0], 1)];
        let base = imp_infer(&support, &[], 1e9, 1.0, &enc).unwrap().clusters.len();
        let support2 = [support.clone(), vec![(vec![-6.0, 6.0], 1)]].concat();
        // the new point is far from both class means
        let more = imp_infer(&support2, &[], 4.0, 0.5, &enc).unwrap();
        assert!(more.clusters.len() > base);

        // one class made of two distant blobs
        let support = vec![
            (vec![-4.0, 0.0], 0),
            (vec![-4.1, 0.1], 0),
            (vec![4.0, 0.0], 0),
            (vec![4.1, -0.1], 0),
            (vec![0.0, 8.0], 1),
        ];
        let r = imp_infer(&support, &[vec![-3.8, 0.2], vec![3.9, 0.1], vec![0.0, 4.5]], 1.0, 0.5, &enc).unwrap();
        assert_eq!(r.clusters.iter().filter(|c| c.class == 0).count(), 2);
        assert_eq!(r.predictions, vec![0, 0, 1]);
        // plain prototypes misclassify the second query: the class-0 mean sits at the origin
        assert!(imp_infer(&[], &[], 1.0, 1.0, &enc).is_err());
    }

    #[test]
    fn mc_transform_examples() {
        let mut rng = Rng::new(14);
        let g = Tensor3::new((2, 3, 2), rng.normal_vec(12, 1.0)).unwrap();
        let i2 = Matrix::identity(2);
        let i3 = Matrix::identity(3);
        assert_eq!(mc_transform(&g, &i2, &i3, &i2).unwrap(), g);
        let doubled = mc_transform(&g, &i2.scale(2.0), &i3, &i2).unwrap();
        for (a, b) in doubled.as_slice().iter().zip(g.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
        for _ in 0..10 {
            let g = Tensor3::new((2, 3, 2), rng.normal_vec(12, 1.0)).unwrap();
            let mo = Matrix::new(2, 2, rng.normal_vec(4, 1.0)).unwrap();
            let mi = Matrix::new(3, 3, rng.normal_vec(9, 1.0)).unwrap();
            let mf = Matrix::new(2, 2, rng.normal_vec(4, 1.0)).unwrap();
            let lhs = vec3(&mc_transform(&g, &mo, &mi, &mf).unwrap());
            let big = kron(&kron(&mo, &mi).unwrap(), &mf).unwrap();
            let rhs = big.matvec(&vec3(&g)).unwrap();
            let err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
        assert!(matches!(mc_transform(&g, &i3, &i3, &i2), Err(Error::ShapeError(_))));
    }
}
