//! Teacher-student training over synthetic detection scenes.
//!
//! A scene is a set of `n_tokens` feature tokens, one per object plus
//! background fill. The first four channels of a token carry a location code
//! (the logit of the box coordinates, optionally noisy) and the rest carry
//! appearance features: a class mean plus noise for objects, pure noise for
//! background. The detector is a single affine map applied to every token,
//! producing an embedding, a box and class logits, so `N` proposals come out
//! of `N` tokens.

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{iou, nms, BBox, ScoredBox};
use crate::losses::{box_terms, proseco_loss_grad, supervised_detr_loss_grad, ClassLogits, ContrastConfig, DetrGrad, Proposal};
use crate::matching::{box_cost_matrix, hungarian, prop_cost_matrix, supervised_cost_matrix, Assignment, CostMatrix, CostWeights};
use crate::numerics::{log_softmax, Matrix};
use crate::rng::Rng;

/// Number of location channels at the front of every token.
pub const BOX_CHANNELS: usize = 4;
const BOX_MIN: f64 = 1e-9;

/// Constant keep rate of the pretraining teacher.
pub const PROSECO_KEEP_RATE: f64 = 0.999;

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Squash a raw location code into a valid box.
pub fn decode_box(u: [f64; 4]) -> BBox {
    let s = u.map(|x| sigmoid(x).clamp(BOX_MIN, 1.0));
    BBox { cx: s[0], cy: s[1], w: s[2], h: s[3] }
}

/// Inverse of [`decode_box`] away from the clamp.
pub fn encode_box(b: &BBox) -> [f64; 4] {
    b.to_array().map(|x| (x / (1.0 - x)).ln())
}

// ---------------------------------------------------------------------------
// EMA

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_epochs: usize,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self { alpha_start: 0.9996, alpha_end: 1.0, total_epochs: 1 }
    }
}

impl EmaSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, total_epochs: usize) -> Result<Self> {
        let s = Self { alpha_start, alpha_end, total_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end && self.alpha_end <= 1.0) {
            return Err(invalid(format!("keep rates must satisfy 0 <= {} <= {} <= 1", self.alpha_start, self.alpha_end)));
        }
        if self.total_epochs == 0 {
            return Err(invalid("schedule needs at least one epoch"));
        }
        Ok(())
    }
}

/// Half-cosine keep rate from `alpha_start` at `k = 0` to `alpha_end` at `k = K`.
pub fn cosine_keep_rate(k: usize, sched: &EmaSchedule) -> Result<f64> {
    sched.validate()?;
    if k > sched.total_epochs {
        return Err(invalid(format!("epoch {k} beyond schedule length {}", sched.total_epochs)));
    }
    let c = (std::f64::consts::PI * k as f64 / sched.total_epochs as f64).cos();
    Ok(sched.alpha_end - (sched.alpha_end - sched.alpha_start) * (c + 1.0) / 2.0)
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &DetectorParams, student: &DetectorParams, alpha: f64) -> Result<DetectorParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("keep rate {alpha} outside [0, 1]")));
    }
    if teacher.layout() != student.layout() {
        return Err(shape("teacher and student detectors differ in shape"));
    }
    let mix = |t: f64, s: f64| alpha * t + (1.0 - alpha) * s;
    let mut out = teacher.clone();
    for (o, s) in out.weight.as_mut_slice().iter_mut().zip(student.weight.as_slice()) {
        *o = mix(*o, *s);
    }
    for (o, s) in out.bias.iter_mut().zip(&student.bias) {
        *o = mix(*o, *s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scenes

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_classes: usize,
    /// Token dimension `d_f`, location channels included.
    pub token_dim: usize,
    /// Tokens per scene; also the detector's proposal count `N`.
    pub n_tokens: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub class_spread: f64,
    pub feature_noise: f64,
    /// Std of the noise on the location channels of object tokens.
    pub loc_noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Seed of the class means, shared by every scene of a world.
    pub world_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            token_dim: 16,
            n_tokens: 16,
            min_objects: 1,
            max_objects: 3,
            class_spread: 2.0,
            feature_noise: 0.6,
            loc_noise: 0.1,
            min_size: 0.1,
            max_size: 0.4,
            world_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.token_dim <= BOX_CHANNELS || self.n_tokens == 0 {
            return Err(invalid("need at least one class, one token and a feature channel"));
        }
        if self.min_objects > self.max_objects || self.max_objects > self.n_tokens {
            return Err(invalid("object counts must satisfy min <= max <= n_tokens"));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 1.0) {
            return Err(invalid("box sizes must satisfy 0 < min <= max < 1"));
        }
        for v in [self.class_spread, self.feature_noise, self.loc_noise] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid("spread and noise levels must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.token_dim - BOX_CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub background_tokens: Vec<Vec<f64>>,
}

impl Scene {
    /// Object tokens followed by background tokens.
    pub fn tokens(&self) -> Vec<Vec<f64>> {
        self.objects.iter().map(|o| o.feature.clone()).chain(self.background_tokens.iter().cloned()).collect()
    }

    pub fn ground_truth(&self) -> Vec<(usize, BBox)> {
        self.objects.iter().map(|o| (o.class_id, o.bbox)).collect()
    }
}

/// Class means of the appearance channels.
pub fn class_means(cfg: &SceneConfig) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(cfg.world_seed).split_named("class-means");
    (0..cfg.n_classes).map(|_| rng.on_sphere(cfg.feature_dim(), cfg.class_spread)).collect()
}

/// Random box and its location code; the box is decoded from the code so
/// that a detector reproducing the code reproduces the box bit for bit.
fn random_box_code(cfg: &SceneConfig, rng: &mut Rng) -> (BBox, [f64; 4]) {
    let w = rng.uniform_range(cfg.min_size, cfg.max_size);
    let h = rng.uniform_range(cfg.min_size, cfg.max_size);
    let cx = rng.uniform_range(w / 2.0, 1.0 - w / 2.0);
    let cy = rng.uniform_range(h / 2.0, 1.0 - h / 2.0);
    let code = encode_box(&BBox { cx, cy, w, h });
    (decode_box(code), code)
}

fn random_box(cfg: &SceneConfig, rng: &mut Rng) -> BBox {
    random_box_code(cfg, rng).0
}

pub fn gen_scene(cfg: &SceneConfig, rng: &mut Rng) -> Result<Scene> {
    cfg.validate()?;
    let means = class_means(cfg);
    let n_obj = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let fd = cfg.feature_dim();
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class_id = rng.below(cfg.n_classes);
        let (bbox, code) = random_box_code(cfg, rng);
        let mut feature: Vec<f64> = code.iter().map(|u| u + cfg.loc_noise * rng.normal()).collect();
        feature.extend(means[class_id].iter().zip(rng.normal_vec(fd, cfg.feature_noise)).map(|(m, e)| m + e));
        objects.push(SceneObject { class_id, bbox, feature });
    }
    let background_tokens = (n_obj..cfg.n_tokens)
        .map(|_| {
            let mut t = random_box_code(cfg, rng).1.to_vec();
            t.extend(rng.normal_vec(fd, cfg.feature_noise));
            t
        })
        .collect();
    Ok(Scene { objects, background_tokens })
}

const BACKGROUND_TRIES: usize = 10_000;

/// Stand-in for unsupervised region proposals: `k` boxes, a fraction
/// `bg_ratio` of them random background boxes overlapping no object above
/// IoU 0.5, the rest ground-truth boxes cycled in order and jittered.
pub fn region_proposals(scene: &Scene, cfg: &SceneConfig, k: usize, jitter_std: f64, bg_ratio: f64, rng: &mut Rng) -> Result<Vec<BBox>> {
    if k == 0 {
        return Err(invalid("need at least one region proposal"));
    }
    if !(0.0..=1.0).contains(&bg_ratio) || !(jitter_std >= 0.0 && jitter_std.is_finite()) {
        return Err(invalid("bg_ratio must lie in [0, 1] and jitter must be non-negative"));
    }
    let n_bg = if scene.objects.is_empty() { k } else { (k as f64 * bg_ratio).round() as usize };
    let mut out = Vec::with_capacity(k);
    for i in 0..k - n_bg {
        let b = scene.objects[i % scene.objects.len()].bbox;
        if jitter_std == 0.0 {
            out.push(b);
            continue;
        }
        let cx = (b.cx + jitter_std * b.w * rng.normal()).clamp(0.0, 1.0);
        let cy = (b.cy + jitter_std * b.h * rng.normal()).clamp(0.0, 1.0);
        let w = (b.w * (jitter_std * rng.normal()).exp()).clamp(1e-3, 1.0);
        let h = (b.h * (jitter_std * rng.normal()).exp()).clamp(1e-3, 1.0);
        out.push(BBox::new(cx, cy, w, h)?);
    }
    for _ in 0..n_bg {
        let mut found = None;
        for _ in 0..BACKGROUND_TRIES {
            let b = random_box(cfg, rng);
            if scene.objects.iter().all(|o| iou(&b, &o.bbox) < 0.5) {
                found = Some(b);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::NumericalError("could not place a background box".into()))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Views

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Feature-space augmentations. Location channels are left intact, so the
/// two views of a scene share their geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { weak_noise: 0.05, strong_noise: 0.3, mask_prob: 0.1 }
    }
}

fn add_noise(tokens: &mut [Vec<f64>], std: f64, rng: &mut Rng) {
    if std == 0.0 {
        return;
    }
    for t in tokens {
        for x in &mut t[BOX_CHANNELS..] {
            *x += std * rng.normal();
        }
    }
}

pub fn weak_view(tokens: &[Vec<f64>], aug: &AugmentConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out = tokens.to_vec();
    add_noise(&mut out, aug.weak_noise, rng);
    out
}

/// Strong view built on top of an existing weak view.
pub fn strong_from_weak(weak: &[Vec<f64>], aug: &AugmentConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out = weak.to_vec();
    add_noise(&mut out, aug.strong_noise, rng);
    for t in &mut out {
        if rng.bernoulli(aug.mask_prob) {
            t[BOX_CHANNELS..].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}

pub fn augment_view(scene: &Scene, strength: Strength, aug: &AugmentConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let weak = weak_view(&scene.tokens(), aug, rng);
    match strength {
        Strength::Weak => weak,
        Strength::Strong => strong_from_weak(&weak, aug, rng),
    }
}

// ---------------------------------------------------------------------------
// Detector

/// Affine map from a token to `[embedding (k) | box code (4) | logits (C + 1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub n_proposals: usize,
}

impl DetectorParams {
    pub fn zeros(token_dim: usize, embed_dim: usize, n_classes: usize, n_proposals: usize) -> Result<Self> {
        if token_dim == 0 || embed_dim == 0 || n_classes == 0 || n_proposals == 0 {
            return Err(invalid("detector dimensions must be positive"));
        }
        let out = embed_dim + BOX_CHANNELS + n_classes + 1;
        Ok(Self { weight: Matrix::zeros(out, token_dim), bias: vec![0.0; out], embed_dim, n_classes, n_proposals })
    }

    pub fn random(token_dim: usize, embed_dim: usize, n_classes: usize, n_proposals: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(token_dim, embed_dim, n_classes, n_proposals)?;
        let noise = rng.normal_vec(p.weight.rows() * token_dim, std);
        p.weight.as_mut_slice().copy_from_slice(&noise);
        Ok(p)
    }

    /// Random weights with the box head starting as the identity on the
    /// location channels, so every proposal initially reads its own token's box.
    pub fn random_with_location_prior(
        token_dim: usize,
        embed_dim: usize,
        n_classes: usize,
        n_proposals: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = Self::random(token_dim, embed_dim, n_classes, n_proposals, std, rng)?;
        if token_dim < BOX_CHANNELS {
            return Err(invalid("tokens are too short to carry a location code"));
        }
        for q in 0..BOX_CHANNELS {
            p.weight[(embed_dim + q, q)] += 1.0;
        }
        Ok(p)
    }

    pub fn token_dim(&self) -> usize {
        self.weight.cols()
    }

    fn layout(&self) -> (usize, usize, usize, usize) {
        (self.token_dim(), self.embed_dim, self.n_classes, self.n_proposals)
    }

    pub fn n_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(shape(format!("{} values for {} parameters", flat.len(), self.n_params())));
        }
        let nw = self.weight.rows() * self.weight.cols();
        let mut p = self.clone();
        p.weight.as_mut_slice().copy_from_slice(&flat[..nw]);
        p.bias.copy_from_slice(&flat[nw..]);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|x| x.is_finite())
    }

    fn box_row(&self) -> usize {
        self.embed_dim
    }

    fn logit_row(&self) -> usize {
        self.embed_dim + BOX_CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub proposals: Vec<Proposal>,
    pub logits: Vec<ClassLogits>,
    /// Raw location codes before squashing.
    pub box_codes: Vec<[f64; 4]>,
}

impl DetectorOutput {
    pub fn predictions(&self) -> Vec<(ClassLogits, BBox)> {
        self.logits.iter().cloned().zip(self.proposals.iter().map(|p| p.b)).collect()
    }
}

pub fn detector_forward(params: &DetectorParams, tokens: &[Vec<f64>]) -> Result<DetectorOutput> {
    if tokens.len() != params.n_proposals {
        return Err(shape(format!("{} tokens for a detector with {} proposals", tokens.len(), params.n_proposals)));
    }
    let mut out = DetectorOutput {
        proposals: Vec::with_capacity(tokens.len()),
        logits: Vec::with_capacity(tokens.len()),
        box_codes: Vec::with_capacity(tokens.len()),
    };
    for t in tokens {
        if t.len() != params.token_dim() {
            return Err(shape(format!("token of length {} for input dimension {}", t.len(), params.token_dim())));
        }
        let y: Vec<f64> = params.weight.matvec(t)?.iter().zip(&params.bias).map(|(a, b)| a + b).collect();
        let (br, lr) = (params.box_row(), params.logit_row());
        let code = [y[br], y[br + 1], y[br + 2], y[br + 3]];
        out.proposals.push(Proposal::new(y[..params.embed_dim].to_vec(), decode_box(code))?);
        out.logits.push(ClassLogits::new(y[lr..].to_vec())?);
        out.box_codes.push(code);
    }
    Ok(out)
}

/// Upstream gradients with respect to the detector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub z: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub logits: Vec<Vec<f64>>,
}

impl OutputGrad {
    pub fn zeros(params: &DetectorParams) -> Self {
        let n = params.n_proposals;
        Self { z: vec![vec![0.0; params.embed_dim]; n], boxes: vec![[0.0; 4]; n], logits: vec![vec![0.0; params.n_classes + 1]; n] }
    }
}

/// Accumulate `scale` times the parameter gradient into `acc`.
pub fn detector_backward(
    params: &DetectorParams,
    tokens: &[Vec<f64>],
    out: &DetectorOutput,
    g: &OutputGrad,
    scale: f64,
    acc: &mut DetectorParams,
) -> Result<()> {
    if acc.layout() != params.layout() || tokens.len() != out.box_codes.len() || g.z.len() != tokens.len() {
        return Err(shape("gradient buffers do not match the detector"));
    }
    let mut dy = vec![0.0; params.weight.rows()];
    for (n, t) in tokens.iter().enumerate() {
        dy[..params.embed_dim].copy_from_slice(&g.z[n]);
        for q in 0..BOX_CHANNELS {
            let s = sigmoid(out.box_codes[n][q]);
            dy[params.box_row() + q] = g.boxes[n][q] * s * (1.0 - s);
        }
        dy[params.logit_row()..].copy_from_slice(&g.logits[n]);
        for (r, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let d = scale * d;
            acc.bias[r] += d;
            for (w, x) in acc.weight.row_mut(r).iter_mut().zip(t) {
                *w += d * x;
            }
        }
    }
    Ok(())
}

/// Adam optimizer over the flattened detector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &DetectorParams) -> Self {
        let n = params.n_params();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut DetectorParams, grad: &DetectorParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let nw = params.weight.rows() * params.weight.cols();
        let g = grad.weight.as_slice().iter().chain(&grad.bias);
        for (k, gk) in g.enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gk;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gk * gk;
            let upd = self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            if k < nw {
                params.weight.as_mut_slice()[k] -= upd;
            } else {
                params.bias[k - nw] -= upd;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pseudo-labels

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelFlags {
    pub use_nms: bool,
    pub nms_iou: f64,
    pub confidence_threshold: Option<f64>,
    pub hard_labels: bool,
}

impl Default for PseudoLabelFlags {
    fn default() -> Self {
        Self { use_nms: false, nms_iou: 0.7, confidence_threshold: None, hard_labels: false }
    }
}

impl PseudoLabelFlags {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.confidence_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid(format!("confidence threshold {t} outside (0, 1)")));
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(invalid("NMS IoU threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Target class distribution (no-object last) and box.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub target: Vec<f64>,
    pub bbox: BBox,
}

impl PseudoLabel {
    fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.target.iter().enumerate() {
            if v > self.target[best] {
                best = k;
            }
        }
        best
    }

    fn is_object(&self) -> bool {
        self.argmax() != self.target.len() - 1
    }
}

/// Turn teacher outputs into targets. With default flags every proposal is
/// kept with its full softmax distribution. The confidence threshold applies
/// to the largest probability, no-object included.
pub fn pseudo_labels(teacher_out: &[(ClassLogits, BBox)], flags: &PseudoLabelFlags) -> Result<Vec<PseudoLabel>> {
    flags.validate()?;
    let probs: Vec<Vec<f64>> = teacher_out.iter().map(|(l, _)| l.probs()).collect();
    let top = |p: &[f64]| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut keep: Vec<usize> = (0..teacher_out.len()).collect();
    if flags.use_nms {
        let cands: Vec<ScoredBox> = teacher_out
            .iter()
            .zip(&probs)
            .map(|((l, b), p)| ScoredBox { bbox: *b, score: top(p), class_id: l.argmax() })
            .collect();
        keep = nms(&cands, flags.nms_iou)?;
        keep.sort_unstable();
    }
    if let Some(t) = flags.confidence_threshold {
        keep.retain(|&i| top(&probs[i]) >= t);
    }
    Ok(keep
        .into_iter()
        .map(|i| {
            let target = if flags.hard_labels {
                let c = teacher_out[i].0.argmax();
                (0..probs[i].len()).map(|k| if k == c { 1.0 } else { 0.0 }).collect()
            } else {
                probs[i].clone()
            };
            PseudoLabel { target, bbox: teacher_out[i].1 }
        })
        .collect())
}

fn cross_entropy_to(target: &[f64], logits: &ClassLogits) -> (f64, Vec<f64>) {
    let lq = log_softmax(logits.as_slice(), 1.0);
    let loss = -target.iter().zip(&lq).map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l }).sum::<f64>();
    let grad = lq.iter().zip(target).map(|(l, p)| l.exp() - p).collect();
    (loss, grad)
}

/// Matching cost between pseudo-labels and student predictions: the
/// per-pair terms of [`pseudo_label_loss_grad`].
pub fn pseudo_label_cost_matrix(labels: &[PseudoLabel], student: &[(ClassLogits, BBox)], w: &CostWeights) -> Result<CostMatrix> {
    let mut m = Matrix::zeros(labels.len(), student.len());
    for (i, l) in labels.iter().enumerate() {
        for (j, (sl, sb)) in student.iter().enumerate() {
            if sl.len() != l.target.len() {
                return Err(shape("pseudo-label and student class counts differ"));
            }
            let mut c = w.lambda_class * cross_entropy_to(&l.target, sl).0;
            if l.is_object() {
                c += box_terms(&l.bbox, sb, w.lambda_l1, w.lambda_giou).0;
            }
            m[(i, j)] = c;
        }
    }
    CostMatrix::new(m)
}

/// Unsupervised loss for one image. Matched predictions take cross-entropy
/// to the pseudo-label distribution plus box terms when the label's most
/// likely class is an object; predictions left unmatched by filtering are
/// sent to no-object.
pub fn pseudo_label_loss_grad(
    labels: &[PseudoLabel],
    student: &[(ClassLogits, BBox)],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<DetrGrad> {
    if assignment.len() != labels.len() || assignment.n_predictions() != student.len() {
        return Err(shape("assignment does not match pseudo-labels and predictions"));
    }
    let mut g = DetrGrad {
        loss: 0.0,
        logits: student.iter().map(|(l, _)| vec![0.0; l.len()]).collect(),
        boxes: vec![[0.0; 4]; student.len()],
    };
    let inv = assignment.inverse();
    for (p, (sl, sb)) in student.iter().enumerate() {
        let (ce, dl) = match inv[p] {
            Some(i) => {
                let l = &labels[i];
                if l.target.len() != sl.len() {
                    return Err(shape("pseudo-label and student class counts differ"));
                }
                if l.is_object() {
                    let (v, d) = box_terms(&l.bbox, sb, w.lambda_l1, w.lambda_giou);
                    g.loss += v;
                    g.boxes[p] = d;
                }
                cross_entropy_to(&l.target, sl)
            }
            None => {
                let mut t = vec![0.0; sl.len()];
                t[sl.no_object()] = 1.0;
                cross_entropy_to(&t, sl)
            }
        };
        g.loss += w.lambda_class * ce;
        g.logits[p] = dl.iter().map(|x| w.lambda_class * x).collect();
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Detection metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Detections of one scene: each proposal whose best real class beats no-object.
pub fn detect(params: &DetectorParams, tokens: &[Vec<f64>]) -> Result<Vec<Detection>> {
    let out = detector_forward(params, tokens)?;
    Ok(out
        .logits
        .iter()
        .zip(&out.proposals)
        .filter_map(|(l, p)| {
            let pr = l.probs();
            let c = (0..l.no_object()).fold(0, |b, k| if pr[k] > pr[b] { k } else { b });
            (pr[c] > pr[l.no_object()]).then_some(Detection { class_id: c, score: pr[c], bbox: p.b })
        })
        .collect())
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101-point interpolated average precision of one class at one IoU threshold.
fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], class: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|(c, _)| *c == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, d) in dets.iter().enumerate() {
        for (i, det) in d.iter().enumerate() {
            if det.class_id == class {
                ranked.push((s, i));
            }
        }
    }
    ranked.sort_by(|a, b| dets[b.0][b.1].score.partial_cmp(&dets[a.0][a.1].score).expect("finite scores").then(a.cmp(b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    for (s, i) in ranked {
        let det = &dets[s][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (c, b)) in gts[s].iter().enumerate() {
            if *c != class || used[s][j] {
                continue;
            }
            let o = iou(&det.bbox, b);
            if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        if let Some(k) = rec.iter().position(|&x| x >= level - 1e-12) {
            sum += prec[k];
        }
    }
    Some(sum / 101.0)
}

/// AP averaged over classes with ground truth and over the IoU thresholds.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], n_classes: usize, iou_thresholds: &[f64]) -> Result<f64> {
    if dets.is_empty() || dets.len() != gts.len() {
        return Err(invalid("need one detection list per scene and at least one scene"));
    }
    if iou_thresholds.is_empty() {
        return Err(invalid("no IoU thresholds"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..n_classes {
        for &t in iou_thresholds {
            if let Some(ap) = average_precision(dets, gts, c, t) {
                total += ap;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// mAP of a detector over clean scenes.
pub fn evaluate_detector(params: &DetectorParams, scenes: &[Scene], iou_thresholds: &[f64]) -> Result<f64> {
    let dets = scenes.iter().map(|s| detect(params, &s.tokens())).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(Scene::ground_truth).collect();
    evaluate_map(&dets, &gts, params.n_classes, iou_thresholds)
}

// ---------------------------------------------------------------------------
// Contrastive pretraining

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsecoConfig {
    pub scene: SceneConfig,
    pub embed_dim: usize,
    pub batch_scenes: usize,
    /// Region proposals sampled per scene.
    pub k_boxes: usize,
    pub jitter_std: f64,
    pub bg_ratio: f64,
    pub augment: AugmentConfig,
    pub weights: CostWeights,
    pub contrast: ContrastConfig,
    pub lambda_contrast: f64,
    pub keep_rate: f64,
    pub lr: f64,
    pub init_std: f64,
    pub steps: usize,
}

impl Default for ProsecoConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            embed_dim: 8,
            batch_scenes: 4,
            k_boxes: 8,
            jitter_std: 0.05,
            bg_ratio: 0.25,
            augment: AugmentConfig::default(),
            weights: CostWeights::default(),
            contrast: ContrastConfig::default(),
            lambda_contrast: 2.0,
            keep_rate: PROSECO_KEEP_RATE,
            lr: 0.01,
            init_std: 0.05,
            steps: 200,
        }
    }
}

impl ProsecoConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.weights.validate()?;
        self.contrast.validate()?;
        if self.batch_scenes == 0 || self.k_boxes == 0 || self.embed_dim == 0 {
            return Err(invalid("batch size, box count and embedding dimension must be positive"));
        }
        if !(self.lr > 0.0 && (0.0..=1.0).contains(&self.keep_rate)) {
            return Err(invalid("lr must be positive and keep_rate in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub opt: Adam,
}

impl TeacherStudent {
    /// Teacher starts as a copy of the student.
    pub fn new(student: DetectorParams, lr: f64) -> Self {
        Self { teacher: student.clone(), opt: Adam::new(lr, &student), student }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsecoMetrics {
    pub loss: f64,
    pub contrast: f64,
    pub box_loss: f64,
}

/// One batch prepared for the pretraining objective.
pub struct ProsecoBatch {
    pub strong: Vec<Vec<Vec<f64>>>,
    pub teacher: Vec<Vec<Proposal>>,
    pub student: Vec<DetectorOutput>,
    pub ss_boxes: Vec<Vec<BBox>>,
    pub prop_assignments: Vec<Assignment>,
    pub box_assignments: Vec<Assignment>,
}

/// Views, forward passes, region proposals and both matchings for a batch.
pub fn proseco_prepare(state: &TeacherStudent, scenes: &[Scene], cfg: &ProsecoConfig, rng: &mut Rng) -> Result<ProsecoBatch> {
    let mut b = ProsecoBatch {
        strong: Vec::new(),
        teacher: Vec::new(),
        student: Vec::new(),
        ss_boxes: Vec::new(),
        prop_assignments: Vec::new(),
        box_assignments: Vec::new(),
    };
    for scene in scenes {
        let weak = weak_view(&scene.tokens(), &cfg.augment, rng);
        let strong = strong_from_weak(&weak, &cfg.augment, rng);
        let t = detector_forward(&state.teacher, &weak)?.proposals;
        let s = detector_forward(&state.student, &strong)?;
        let ss = region_proposals(scene, &cfg.scene, cfg.k_boxes, cfg.jitter_std, cfg.bg_ratio, rng)?;
        b.prop_assignments.push(hungarian(&prop_cost_matrix(&t, &s.proposals, &cfg.weights)?)?);
        let pred_boxes: Vec<BBox> = s.proposals.iter().map(|p| p.b).collect();
        b.box_assignments.push(hungarian(&box_cost_matrix(&ss, &pred_boxes, &cfg.weights)?)?);
        b.teacher.push(t);
        b.student.push(s);
        b.strong.push(strong);
        b.ss_boxes.push(ss);
    }
    Ok(b)
}

/// Objective value and student parameter gradient for a prepared batch.
pub fn proseco_objective(state: &TeacherStudent, batch: &ProsecoBatch, cfg: &ProsecoConfig) -> Result<(ProsecoMetrics, DetectorParams)> {
    let student_props: Vec<Vec<Proposal>> = batch.student.iter().map(|o| o.proposals.clone()).collect();
    let g = proseco_loss_grad(
        &batch.teacher,
        &student_props,
        &batch.ss_boxes,
        &batch.prop_assignments,
        &batch.box_assignments,
        &cfg.weights,
        &cfg.contrast,
        cfg.lambda_contrast,
    )?;
    let mut acc = DetectorParams::zeros(state.student.token_dim(), state.student.embed_dim, state.student.n_classes, state.student.n_proposals)?;
    for (i, out) in batch.student.iter().enumerate() {
        let mut og = OutputGrad::zeros(&state.student);
        og.z = g.student_z[i].clone();
        og.boxes = g.student_boxes[i].clone();
        detector_backward(&state.student, &batch.strong[i], out, &og, 1.0, &mut acc)?;
    }
    Ok((ProsecoMetrics { loss: g.loss, contrast: g.contrast, box_loss: g.boxes_term }, acc))
}

/// One pretraining step: teacher on the weak view, student on the strong
/// view derived from it, proposal and box matching, a gradient step on the
/// student and an EMA update of the teacher. Returns the pre-step metrics.
pub fn proseco_step(state: &mut TeacherStudent, scenes: &[Scene], cfg: &ProsecoConfig, rng: &mut Rng) -> Result<ProsecoMetrics> {
    let batch = proseco_prepare(state, scenes, cfg, rng)?;
    let (m, grad) = proseco_objective(state, &batch, cfg)?;
    if !m.loss.is_finite() {
        return Err(Error::TrainingDiverged { step: 0, loss: m.loss });
    }
    state.opt.step(&mut state.student, &grad);
    state.teacher = ema_update(&state.teacher, &state.student, cfg.keep_rate)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsecoRecord {
    pub step: usize,
    pub loss: f64,
    pub contrast: f64,
    pub box_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProsecoRun {
    pub records: Vec<ProsecoRecord>,
    /// Objective on a fixed evaluation batch before and after training.
    pub initial_eval: ProsecoMetrics,
    pub final_eval: ProsecoMetrics,
    pub state: TeacherStudent,
}

fn eval_proseco(state: &TeacherStudent, scenes: &[Scene], cfg: &ProsecoConfig, rng: &Rng) -> Result<ProsecoMetrics> {
    let batch = proseco_prepare(state, scenes, cfg, &mut rng.clone())?;
    Ok(proseco_objective(state, &batch, cfg)?.0)
}

pub fn run_proseco(cfg: &ProsecoConfig, seed: u64) -> Result<ProsecoRun> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut init = root.split_named("init");
    let mut scene_rng = root.split_named("scenes");
    let mut step_rng = root.split_named("steps");
    let eval_aug = root.split_named("eval-views");
    let sc = &cfg.scene;
    let mut state = TeacherStudent::new(DetectorParams::random(sc.token_dim, cfg.embed_dim, sc.n_classes, sc.n_tokens, cfg.init_std, &mut init)?, cfg.lr);
    let mut eval_rng = root.split_named("eval-scenes");
    let eval_scenes = (0..cfg.batch_scenes).map(|_| gen_scene(sc, &mut eval_rng)).collect::<Result<Vec<_>>>()?;
    let initial_eval = eval_proseco(&state, &eval_scenes, cfg, &eval_aug)?;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scenes = (0..cfg.batch_scenes).map(|_| gen_scene(sc, &mut scene_rng)).collect::<Result<Vec<_>>>()?;
        let m = proseco_step(&mut state, &scenes, cfg, &mut step_rng).map_err(|e| match e {
            Error::TrainingDiverged { loss, .. } => Error::TrainingDiverged { step, loss },
            e => e,
        })?;
        records.push(ProsecoRecord { step, loss: m.loss, contrast: m.contrast, box_loss: m.box_loss });
    }
    let final_eval = eval_proseco(&state, &eval_scenes, cfg, &eval_aug)?;
    Ok(ProsecoRun { records, initial_eval, final_eval, state })
}

// ---------------------------------------------------------------------------
// Semi-supervised detection

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtdetrConfig {
    pub scene: SceneConfig,
    pub embed_dim: usize,
    pub n_train_scenes: usize,
    pub labeled_fraction: f64,
    pub n_test_scenes: usize,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub init_std: f64,
    pub weights: CostWeights,
    pub lambda_u: f64,
    pub flags: PseudoLabelFlags,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub augment: AugmentConfig,
    /// Test-set mAP is logged every this many steps.
    pub eval_every: usize,
}

impl Default for MtdetrConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            embed_dim: 8,
            n_train_scenes: 200,
            labeled_fraction: 0.05,
            n_test_scenes: 50,
            pretrain_steps: 300,
            steps: 500,
            batch_labeled: 4,
            batch_unlabeled: 4,
            lr: 0.003,
            init_std: 0.01,
            weights: CostWeights::default(),
            lambda_u: 4.0,
            flags: PseudoLabelFlags::default(),
            alpha_start: 0.9996,
            alpha_end: 1.0,
            augment: AugmentConfig::default(),
            eval_every: 50,
        }
    }
}

impl MtdetrConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.weights.validate()?;
        self.flags.validate()?;
        EmaSchedule::new(self.alpha_start, self.alpha_end, self.steps.max(1))?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(invalid("labeled_fraction must lie in (0, 1]"));
        }
        if self.n_labeled() == 0 || self.n_test_scenes == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(invalid("need labeled scenes, test scenes and non-empty batches"));
        }
        if !(self.lr > 0.0 && self.lambda_u >= 0.0 && self.eval_every > 0) {
            return Err(invalid("lr and eval_every must be positive and lambda_u non-negative"));
        }
        Ok(())
    }

    pub fn n_labeled(&self) -> usize {
        (self.n_train_scenes as f64 * self.labeled_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtdetrMetrics {
    pub loss: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub keep_rate: f64,
}

fn zeros_like(p: &DetectorParams) -> DetectorParams {
    DetectorParams { weight: Matrix::zeros(p.weight.rows(), p.weight.cols()), bias: vec![0.0; p.bias.len()], ..p.clone() }
}

/// Mean supervised set loss over `scenes` (weak views) accumulated into `acc`.
fn supervised_branch(params: &DetectorParams, scenes: &[Scene], w: &CostWeights, aug: &AugmentConfig, rng: &mut Rng, acc: &mut DetectorParams) -> Result<f64> {
    let nl = scenes.len() as f64;
    let mut total = 0.0;
    for scene in scenes {
        let view = weak_view(&scene.tokens(), aug, rng);
        let out = detector_forward(params, &view)?;
        let preds = out.predictions();
        let gt = scene.ground_truth();
        let a = hungarian(&supervised_cost_matrix(&gt, &preds, w)?)?;
        let g = supervised_detr_loss_grad(&gt, &preds, &a, w)?;
        total += g.loss;
        let og = OutputGrad { z: vec![vec![0.0; params.embed_dim]; preds.len()], boxes: g.boxes, logits: g.logits };
        detector_backward(params, &view, &out, &og, 1.0 / nl, acc)?;
    }
    Ok(total / nl)
}

fn unsupervised_branch(
    state: &TeacherStudent,
    scenes: &[Scene],
    flags: &PseudoLabelFlags,
    w: &CostWeights,
    aug: &AugmentConfig,
    scale: f64,
    rng: &mut Rng,
    acc: &mut DetectorParams,
) -> Result<f64> {
    let nu = scenes.len() as f64;
    let mut total = 0.0;
    for scene in scenes {
        let weak = weak_view(&scene.tokens(), aug, rng);
        let strong = strong_from_weak(&weak, aug, rng);
        let labels = pseudo_labels(&detector_forward(&state.teacher, &weak)?.predictions(), flags)?;
        let out = detector_forward(&state.student, &strong)?;
        let preds = out.predictions();
        let a = hungarian(&pseudo_label_cost_matrix(&labels, &preds, w)?)?;
        let g = pseudo_label_loss_grad(&labels, &preds, &a, w)?;
        total += g.loss;
        let og = OutputGrad { z: vec![vec![0.0; state.student.embed_dim]; preds.len()], boxes: g.boxes, logits: g.logits };
        detector_backward(&state.student, &strong, &out, &og, scale / nu, acc)?;
    }
    Ok(total / nu)
}

/// Supervised-only step, used for the pre-finetuning stage.
pub fn supervised_step(params: &mut DetectorParams, opt: &mut Adam, labeled: &[Scene], cfg: &MtdetrConfig, rng: &mut Rng) -> Result<f64> {
    let mut acc = zeros_like(params);
    let loss = supervised_branch(params, labeled, &cfg.weights, &cfg.augment, rng, &mut acc)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { step: 0, loss });
    }
    opt.step(params, &acc);
    Ok(loss)
}

/// One semi-supervised step: supervised loss on labeled weak views plus
/// `lambda_u` times the pseudo-label loss of the student's strong views
/// against the teacher's weak views, then an EMA update with the cosine
/// keep rate of `epoch`. `labeled_rng` and `unlabeled_rng` are separate so
/// that `lambda_u = 0` reproduces supervised-only training exactly.
#[allow(clippy::too_many_arguments)]
pub fn mtdetr_step(
    state: &mut TeacherStudent,
    labeled: &[Scene],
    unlabeled: &[Scene],
    flags: &PseudoLabelFlags,
    lambda_u: f64,
    epoch: usize,
    sched: &EmaSchedule,
    cfg: &MtdetrConfig,
    labeled_rng: &mut Rng,
    unlabeled_rng: &mut Rng,
) -> Result<MtdetrMetrics> {
    if !(lambda_u >= 0.0 && lambda_u.is_finite()) {
        return Err(invalid("lambda_u must be non-negative"));
    }
    let keep_rate = cosine_keep_rate(epoch, sched)?;
    let mut acc = zeros_like(&state.student);
    let sup = supervised_branch(&state.student, labeled, &cfg.weights, &cfg.augment, labeled_rng, &mut acc)?;
    let unsup = if unlabeled.is_empty() {
        0.0
    } else {
        unsupervised_branch(state, unlabeled, flags, &cfg.weights, &cfg.augment, lambda_u, unlabeled_rng, &mut acc)?
    };
    let loss = sup + lambda_u * unsup;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { step: epoch, loss });
    }
    state.opt.step(&mut state.student, &acc);
    state.teacher = ema_update(&state.teacher, &state.student, keep_rate)?;
    Ok(MtdetrMetrics { loss, sup_loss: sup, unsup_loss: unsup, keep_rate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtdetrRecord {
    pub step: usize,
    pub loss: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub keep_rate: f64,
    /// Student mAP on the test scenes, logged every `eval_every` steps and at the end.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtdetrRun {
    pub records: Vec<MtdetrRecord>,
    /// Test mAP right after supervised pre-finetuning.
    pub pretrain_map: f64,
    pub final_map: f64,
    pub state: TeacherStudent,
}

fn pick(pool: &[Scene], n: usize, rng: &mut Rng) -> Vec<Scene> {
    (0..n).map(|_| pool[rng.below(pool.len())].clone()).collect()
}

/// Pre-finetune on the labeled split, then run the teacher-student loop and
/// track the student's test mAP.
pub fn run_mtdetr(cfg: &MtdetrConfig, seed: u64) -> Result<MtdetrRun> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let sc = &cfg.scene;
    let mut scene_rng = root.split_named("scenes");
    let train = (0..cfg.n_train_scenes).map(|_| gen_scene(sc, &mut scene_rng)).collect::<Result<Vec<_>>>()?;
    let mut test_rng = root.split_named("test-scenes");
    let test = (0..cfg.n_test_scenes).map(|_| gen_scene(sc, &mut test_rng)).collect::<Result<Vec<_>>>()?;
    let (labeled, unlabeled) = train.split_at(cfg.n_labeled());
    let thresholds = coco_iou_thresholds();

    let mut student = DetectorParams::random_with_location_prior(sc.token_dim, cfg.embed_dim, sc.n_classes, sc.n_tokens, cfg.init_std, &mut root.split_named("init"))?;
    let mut opt = Adam::new(cfg.lr, &student);
    let mut pre_batches = root.split_named("pretrain-batches");
    let mut pre_aug = root.split_named("pretrain-views");
    for step in 0..cfg.pretrain_steps {
        let batch = pick(labeled, cfg.batch_labeled, &mut pre_batches);
        supervised_step(&mut student, &mut opt, &batch, cfg, &mut pre_aug).map_err(|e| match e {
            Error::TrainingDiverged { loss, .. } => Error::TrainingDiverged { step, loss },
            e => e,
        })?;
    }
    let pretrain_map = evaluate_detector(&student, &test, &thresholds)?;

    let mut state = TeacherStudent { teacher: student.clone(), student, opt };
    let sched = EmaSchedule::new(cfg.alpha_start, cfg.alpha_end, cfg.steps.max(1))?;
    let mut lab_batches = root.split_named("labeled-batches");
    let mut unl_batches = root.split_named("unlabeled-batches");
    let mut lab_aug = root.split_named("labeled-views");
    let mut unl_aug = root.split_named("unlabeled-views");
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lb = pick(labeled, cfg.batch_labeled, &mut lab_batches);
        let ub = if unlabeled.is_empty() { Vec::new() } else { pick(unlabeled, cfg.batch_unlabeled, &mut unl_batches) };
        let m = mtdetr_step(&mut state, &lb, &ub, &cfg.flags, cfg.lambda_u, step, &sched, cfg, &mut lab_aug, &mut unl_aug)?;
        let map = if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            Some(evaluate_detector(&state.student, &test, &thresholds)?)
        } else {
            None
        };
        records.push(MtdetrRecord { step, loss: m.loss, sup_loss: m.sup_loss, unsup_loss: m.unsup_loss, keep_rate: m.keep_rate, map });
    }
    let final_map = match records.last().and_then(|r| r.map) {
        Some(m) => m,
        None => pretrain_map,
    };
    Ok(MtdetrRun { records, pretrain_map, final_map, state })
}
