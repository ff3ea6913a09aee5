//! Set-prediction losses: supervised and pseudo-labelled DETR objectives and
//! the ProSeCo pretraining objective.

use super::{
    focal_loss, focal_loss_grad, loc_sce_grad, soft_cross_entropy, soft_cross_entropy_grad, ClassLogits, ContrastConfig,
    Proposal, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::error::{invalid, shape, Result};
use crate::geometry::{giou, grad_giou, grad_l1_box_loss, l1_box_loss, BBox};
use crate::matching::{Assignment, CostWeights};

/// Gradients of a detection loss with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DetrGrad {
    pub loss: f64,
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
}

impl DetrGrad {
    fn zeros(preds: &[(ClassLogits, BBox)]) -> Self {
        Self { loss: 0.0, logits: preds.iter().map(|(l, _)| vec![0.0; l.len()]).collect(), boxes: vec![[0.0; 4]; preds.len()] }
    }
}

/// Box terms `l1 * |t - p|_1 + g * (1 - giou(t, p))` and their gradient in `p`.
pub(crate) fn box_terms(t: &BBox, p: &BBox, l1: f64, g: f64) -> (f64, [f64; 4]) {
    // global minimum; zero is a valid subgradient and avoids rounding noise
    if t == p {
        return (0.0, [0.0; 4]);
    }
    let v = l1 * l1_box_loss(t, p) + g * (1.0 - giou(t, p));
    let dl1 = grad_l1_box_loss(p, t);
    let (_, dg) = grad_giou(t, p);
    let mut d = [0.0; 4];
    for k in 0..4 {
        d[k] = l1 * dl1[k] - g * dg[k];
    }
    (v, d)
}

fn check_assignment(n_targets: usize, n_preds: usize, a: &Assignment) -> Result<()> {
    if a.len() != n_targets || a.n_predictions() != n_preds {
        return Err(shape(format!(
            "assignment for {} targets / {} predictions used with {n_targets} / {n_preds}",
            a.len(),
            a.n_predictions()
        )));
    }
    Ok(())
}

/// Supervised set loss for one image. Matched predictions get focal, L1 and
/// GIoU terms; unmatched predictions are pushed toward no-object by the focal
/// term alone.
pub fn supervised_detr_loss(
    targets: &[(usize, BBox)],
    predictions: &[(ClassLogits, BBox)],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<f64> {
    Ok(supervised_detr_loss_grad(targets, predictions, assignment, w)?.loss)
}

pub fn supervised_detr_loss_grad(
    targets: &[(usize, BBox)],
    predictions: &[(ClassLogits, BBox)],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<DetrGrad> {
    check_assignment(targets.len(), predictions.len(), assignment)?;
    let inv = assignment.inverse();
    let mut g = DetrGrad::zeros(predictions);
    for (p, (logits, pb)) in predictions.iter().enumerate() {
        let class = match inv[p] {
            Some(t) => {
                let (class, tb) = &targets[t];
                if *class >= logits.no_object() {
                    return Err(invalid(format!("target class {class} is not a real class")));
                }
                let (v, d) = box_terms(tb, pb, w.lambda_l1, w.lambda_giou);
                g.loss += v;
                g.boxes[p] = d;
                *class
            }
            None => logits.no_object(),
        };
        g.loss += w.lambda_class * focal_loss(logits, class, FOCAL_GAMMA, FOCAL_ALPHA)?;
        let dl = focal_loss_grad(logits, class, FOCAL_GAMMA, FOCAL_ALPHA)?;
        g.logits[p] = dl.iter().map(|x| w.lambda_class * x).collect();
    }
    Ok(g)
}

/// Pseudo-label loss for one image: soft cross-entropy against the teacher
/// distribution, plus box terms wherever the teacher's most likely class is a
/// real object.
pub fn unsupervised_detr_loss(
    pseudo_labels: &[(ClassLogits, BBox)],
    student: &[(ClassLogits, BBox)],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<f64> {
    Ok(unsupervised_detr_loss_grad(pseudo_labels, student, assignment, w)?.loss)
}

/// Gradient of [`unsupervised_detr_loss`] with respect to the student outputs.
pub fn unsupervised_detr_loss_grad(
    pseudo_labels: &[(ClassLogits, BBox)],
    student: &[(ClassLogits, BBox)],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<DetrGrad> {
    check_assignment(pseudo_labels.len(), student.len(), assignment)?;
    let mut g = DetrGrad::zeros(student);
    for (j, (tl, tb)) in pseudo_labels.iter().enumerate() {
        let p = assignment.get(j);
        let (sl, sb) = &student[p];
        g.loss += w.lambda_class * soft_cross_entropy(tl, sl)?;
        let (_, ds) = soft_cross_entropy_grad(tl, sl)?;
        g.logits[p] = ds.iter().map(|x| w.lambda_class * x).collect();
        if tl.argmax() != tl.no_object() {
            let (v, d) = box_terms(tb, sb, w.lambda_l1, w.lambda_giou);
            g.loss += v;
            g.boxes[p] = d;
        }
    }
    Ok(g)
}

/// ProSeCo objective gradients with respect to the student embeddings and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsecoGrad {
    pub loss: f64,
    pub contrast: f64,
    pub boxes_term: f64,
    pub student_z: Vec<Vec<Vec<f64>>>,
    pub student_boxes: Vec<Vec<[f64; 4]>>,
}

#[allow(clippy::too_many_arguments)]
pub fn proseco_loss(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    ss_boxes: &[Vec<BBox>],
    prop_assignments: &[Assignment],
    box_assignments: &[Assignment],
    w: &CostWeights,
    cfg: &ContrastConfig,
    lambda_contrast: f64,
) -> Result<f64> {
    Ok(proseco_loss_grad(teacher, student, ss_boxes, prop_assignments, box_assignments, w, cfg, lambda_contrast)?.loss)
}

/// `lambda_contrast * LocSCE + 1/(N_b K) * sum of box terms` against the
/// sampled boxes, `box_assignments[i]` mapping sampled box `j` to a student
/// prediction.
#[allow(clippy::too_many_arguments)]
pub fn proseco_loss_grad(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    ss_boxes: &[Vec<BBox>],
    prop_assignments: &[Assignment],
    box_assignments: &[Assignment],
    w: &CostWeights,
    cfg: &ContrastConfig,
    lambda_contrast: f64,
) -> Result<ProsecoGrad> {
    if !(lambda_contrast >= 0.0 && lambda_contrast.is_finite()) {
        return Err(invalid("lambda_contrast must be non-negative"));
    }
    let nb = student.len();
    if ss_boxes.len() != nb || box_assignments.len() != nb {
        return Err(shape("sampled boxes and box assignments must cover every image"));
    }
    let k = ss_boxes.first().map_or(0, |b| b.len());
    if k == 0 || ss_boxes.iter().any(|b| b.len() != k) {
        return Err(shape("every image needs the same non-zero number of sampled boxes"));
    }
    let c = loc_sce_grad(teacher, student, prop_assignments, cfg)?;
    let scale = (nb * k) as f64;
    let mut boxes_term = 0.0;
    let mut student_boxes = Vec::with_capacity(nb);
    for i in 0..nb {
        check_assignment(k, student[i].len(), &box_assignments[i])?;
        let mut gb = vec![[0.0; 4]; student[i].len()];
        for (j, sb) in ss_boxes[i].iter().enumerate() {
            let p = box_assignments[i].get(j);
            let (v, d) = box_terms(sb, &student[i][p].b, w.lambda_coord, w.lambda_giou);
            boxes_term += v;
            for q in 0..4 {
                gb[p][q] += d[q] / scale;
            }
        }
        student_boxes.push(gb);
    }
    boxes_term /= scale;
    let student_z = c
        .student
        .iter()
        .map(|img| img.iter().map(|g| g.iter().map(|x| lambda_contrast * x).collect()).collect())
        .collect();
    Ok(ProsecoGrad {
        loss: lambda_contrast * c.loss + boxes_term,
        contrast: c.loss,
        boxes_term,
        student_z,
        student_boxes,
    })
}
