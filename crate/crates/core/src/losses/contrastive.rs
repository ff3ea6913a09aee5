//! InfoNCE and the localization-aware contrastive losses between teacher
//! proposals and student predictions.

use super::{normalize, normalize_backward, ContrastConfig, Proposal};
use crate::error::{invalid, shape, Result};
use crate::geometry::iou;
use crate::matching::Assignment;
use crate::numerics::{dot, log_softmax, softmax_unchecked};

/// InfoNCE over positive pairs `(z_i, z'_i)` with every `z'_j` as a candidate.
pub fn info_nce(z: &[Vec<f64>], z_prime: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(info_nce_grad(z, z_prime, tau)?.0)
}

/// InfoNCE value and gradients with respect to `z` and `z_prime`.
pub fn info_nce_grad(z: &[Vec<f64>], z_prime: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if z.is_empty() || z.len() != z_prime.len() {
        return Err(shape(format!("InfoNCE batches of {} and {} embeddings", z.len(), z_prime.len())));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid("temperature must be positive"));
    }
    let dim = z[0].len();
    if z.iter().chain(z_prime).any(|v| v.len() != dim) {
        return Err(shape("embeddings of different lengths"));
    }
    let a: Vec<(Vec<f64>, f64)> = z.iter().map(|v| normalize(v)).collect::<Result<_>>()?;
    let b: Vec<(Vec<f64>, f64)> = z_prime.iter().map(|v| normalize(v)).collect::<Result<_>>()?;
    let n = z.len();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut ga = vec![vec![0.0; dim]; n];
    let mut gb = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let logits: Vec<f64> = b.iter().map(|(bj, _)| dot(&a[i].0, bj) / tau).collect();
        let lq = log_softmax(&logits, 1.0);
        loss -= lq[i];
        for j in 0..n {
            let d = (lq[j].exp() - if i == j { 1.0 } else { 0.0 }) / (nf * tau);
            for k in 0..dim {
                ga[i][k] += d * b[j].0[k];
                gb[j][k] += d * a[i].0[k];
            }
        }
    }
    let dz = ga.iter().zip(&a).map(|(g, (u, nrm))| normalize_backward(u, *nrm, g)).collect();
    let dzp = gb.iter().zip(&b).map(|(g, (u, nrm))| normalize_backward(u, *nrm, g)).collect();
    Ok((loss / nf, dz, dzp))
}

/// Loss value with gradients for every teacher and student embedding,
/// indexed `[image][proposal][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastGrad {
    pub loss: f64,
    pub teacher: Vec<Vec<Vec<f64>>>,
    pub student: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Target {
    /// One-hot/IoU positives mixed with teacher relations.
    Sce,
    /// IoU positives only.
    Nce,
}

struct Flat {
    t: Vec<(Vec<f64>, f64)>,
    s: Vec<(Vec<f64>, f64)>,
    /// image of each teacher proposal
    t_img: Vec<usize>,
    t_off: Vec<usize>,
    s_off: Vec<usize>,
    /// flattened student index matched to each teacher proposal
    matched: Vec<usize>,
    per_image: usize,
}

fn flatten(teacher: &[Vec<Proposal>], student: &[Vec<Proposal>], assignments: &[Assignment]) -> Result<Flat> {
    let nb = teacher.len();
    if nb == 0 || student.len() != nb || assignments.len() != nb {
        return Err(shape(format!(
            "{} teacher images, {} student images, {} assignments",
            nb,
            student.len(),
            assignments.len()
        )));
    }
    let per_image = teacher[0].len();
    if per_image == 0 || teacher.iter().any(|t| t.len() != per_image) {
        return Err(shape("every image needs the same non-zero number of teacher proposals"));
    }
    if nb * per_image < 2 {
        return Err(invalid("teacher relations need at least two proposals in the batch"));
    }
    let dim = teacher[0][0].z.len();
    let mut f = Flat {
        t: Vec::new(),
        s: Vec::new(),
        t_img: Vec::new(),
        t_off: Vec::new(),
        s_off: Vec::new(),
        matched: Vec::new(),
        per_image,
    };
    for i in 0..nb {
        let a = &assignments[i];
        if a.len() != per_image || a.n_predictions() != student[i].len() {
            return Err(shape(format!("assignment of image {i} does not fit its proposals")));
        }
        f.t_off.push(f.t.len());
        f.s_off.push(f.s.len());
        for (j, p) in teacher[i].iter().enumerate() {
            if p.z.len() != dim {
                return Err(shape("embeddings of different lengths"));
            }
            f.t.push(normalize(&p.z)?);
            f.t_img.push(i);
            f.matched.push(f.s_off[i] + a.get(j));
        }
        for p in &student[i] {
            if p.z.len() != dim {
                return Err(shape("embeddings of different lengths"));
            }
            f.s.push(normalize(&p.z)?);
        }
    }
    Ok(f)
}

fn contrast(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    assignments: &[Assignment],
    cfg: &ContrastConfig,
    target: Target,
) -> Result<ContrastGrad> {
    cfg.validate()?;
    let f = flatten(teacher, student, assignments)?;
    let na = f.t.len();
    let ns = f.s.len();
    let dim = f.t[0].0.len();
    let scale = na as f64;
    let lambda = if target == Target::Sce { cfg.lambda_sce } else { 1.0 };

    let mut gt = vec![vec![0.0; dim]; na];
    let mut gs = vec![vec![0.0; dim]; ns];
    let mut loss = 0.0;
    for a in 0..na {
        let img = f.t_img[a];
        let j = a - f.t_off[img];
        let logits: Vec<f64> = f.s.iter().map(|(s, _)| dot(&f.t[a].0, s) / cfg.tau).collect();
        let lq = log_softmax(&logits, 1.0);

        // teacher-teacher relations over every other proposal in the batch
        let rel = if target == Target::Sce {
            let others: Vec<usize> = (0..na).filter(|&b| b != a).collect();
            let r: Vec<f64> = others.iter().map(|&b| dot(&f.t[a].0, &f.t[b].0) / cfg.tau_t).collect();
            let p = softmax_unchecked(&r, 1.0);
            let mut full = vec![0.0; na];
            for (&b, pb) in others.iter().zip(p) {
                full[b] = pb;
            }
            Some(full)
        } else {
            None
        };

        let mut w = vec![0.0; na];
        for m in 0..f.per_image {
            let b = f.t_off[img] + m;
            if iou(&teacher[img][j].b, &teacher[img][m].b) >= cfg.delta {
                w[b] += lambda;
            }
        }
        if let Some(p) = &rel {
            for b in 0..na {
                w[b] += (1.0 - lambda) * p[b];
            }
        }

        let mut y = vec![0.0; ns];
        let mut total_w = 0.0;
        for b in 0..na {
            if w[b] != 0.0 {
                loss -= w[b] * lq[f.matched[b]];
                y[f.matched[b]] += w[b];
                total_w += w[b];
            }
        }

        for s in 0..ns {
            let d = (total_w * lq[s].exp() - y[s]) / (scale * cfg.tau);
            if d == 0.0 {
                continue;
            }
            for k in 0..dim {
                gt[a][k] += d * f.s[s].0[k];
                gs[s][k] += d * f.t[a].0[k];
            }
        }

        if let Some(p) = &rel {
            let g: Vec<f64> = (0..na).map(|b| -(1.0 - lambda) * lq[f.matched[b]] / scale).collect();
            let mean: f64 = (0..na).map(|b| p[b] * g[b]).sum();
            for b in 0..na {
                if b == a {
                    continue;
                }
                let dr = p[b] * (g[b] - mean) / cfg.tau_t;
                for k in 0..dim {
                    gt[a][k] += dr * f.t[b].0[k];
                    gt[b][k] += dr * f.t[a].0[k];
                }
            }
        }
    }

    let mut gteacher = Vec::with_capacity(teacher.len());
    let mut gstudent = Vec::with_capacity(student.len());
    for i in 0..teacher.len() {
        gteacher.push(
            (0..teacher[i].len())
                .map(|j| {
                    let a = f.t_off[i] + j;
                    normalize_backward(&f.t[a].0, f.t[a].1, &gt[a])
                })
                .collect(),
        );
        gstudent.push(
            (0..student[i].len())
                .map(|l| {
                    let s = f.s_off[i] + l;
                    normalize_backward(&f.s[s].0, f.s[s].1, &gs[s])
                })
                .collect(),
        );
    }
    Ok(ContrastGrad { loss: loss / scale, teacher: gteacher, student: gstudent })
}

/// Localized SCE between teacher proposals and student predictions.
///
/// `assignments[i]` maps teacher proposal `j` of image `i` to its student
/// prediction. Teacher relations exclude only the self pair.
pub fn loc_sce(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    assignments: &[Assignment],
    cfg: &ContrastConfig,
) -> Result<f64> {
    Ok(contrast(teacher, student, assignments, cfg, Target::Sce)?.loss)
}

pub fn loc_sce_grad(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    assignments: &[Assignment],
    cfg: &ContrastConfig,
) -> Result<ContrastGrad> {
    contrast(teacher, student, assignments, cfg, Target::Sce)
}

/// Localized InfoNCE: every same-image proposal overlapping above `delta`
/// counts as a positive. Pairs below the threshold contribute nothing.
pub fn loc_nce(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    assignments: &[Assignment],
    cfg: &ContrastConfig,
) -> Result<f64> {
    Ok(contrast(teacher, student, assignments, cfg, Target::Nce)?.loss)
}

pub fn loc_nce_grad(
    teacher: &[Vec<Proposal>],
    student: &[Vec<Proposal>],
    assignments: &[Assignment],
    cfg: &ContrastConfig,
) -> Result<ContrastGrad> {
    contrast(teacher, student, assignments, cfg, Target::Nce)
}
