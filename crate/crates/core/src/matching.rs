//! Bipartite matching between targets and predictions, and the matching costs
//! used by the detectors.

use crate::error::{invalid, shape, Result};
use crate::geometry::{giou, l1_box_loss, BBox};
use crate::losses::{cosine_similarity, focal_loss, ClassLogits, Proposal, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::numerics::Matrix;

/// Targets x predictions cost matrix, targets <= predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(invalid("cost matrix entries must be finite"));
        }
        if m.rows() > m.cols() {
            return Err(shape(format!("{} targets but only {} predictions", m.rows(), m.cols())));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_targets(&self) -> usize {
        self.0.rows()
    }

    pub fn n_predictions(&self) -> usize {
        self.0.cols()
    }
}

/// Injective map from target index to prediction index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    sigma: Vec<usize>,
    n_predictions: usize,
}

impl Assignment {
    pub fn new(sigma: Vec<usize>, n_predictions: usize) -> Result<Self> {
        let mut seen = vec![false; n_predictions];
        for &p in &sigma {
            if p >= n_predictions {
                return Err(invalid(format!("prediction index {p} out of range {n_predictions}")));
            }
            if seen[p] {
                return Err(invalid(format!("prediction {p} assigned twice")));
            }
            seen[p] = true;
        }
        Ok(Self { sigma, n_predictions })
    }

    pub fn identity(n: usize) -> Self {
        Self { sigma: (0..n).collect(), n_predictions: n }
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn get(&self, target: usize) -> usize {
        self.sigma[target]
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn n_predictions(&self) -> usize {
        self.n_predictions
    }

    /// Prediction index -> matched target, `None` for unmatched predictions.
    pub fn inverse(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.n_predictions];
        for (t, &p) in self.sigma.iter().enumerate() {
            inv[p] = Some(t);
        }
        inv
    }

    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.sigma.iter().enumerate().map(|(t, &p)| c.0[(t, p)]).sum()
    }
}

/// Weights of the matching costs and of the detection losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub lambda_class: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_sim: f64,
    pub lambda_coord: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { lambda_class: 2.0, lambda_l1: 5.0, lambda_giou: 2.0, lambda_sim: 2.0, lambda_coord: 5.0 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_class, self.lambda_l1, self.lambda_giou, self.lambda_sim, self.lambda_coord];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("cost weights must be finite and non-negative: {self:?}")))
        }
    }

    pub fn zero() -> Self {
        Self { lambda_class: 0.0, lambda_l1: 0.0, lambda_giou: 0.0, lambda_sim: 0.0, lambda_coord: 0.0 }
    }
}

struct Solution {
    cols: Vec<usize>,
    total: f64,
    /// row potentials, 1-based
    u: Vec<f64>,
    /// column potentials, 1-based
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method for `n <= m`, with the optimal
/// dual potentials.
fn solve(cost: &[Vec<f64>], m: usize) -> Solution {
    let n = cost.len();
    if n == 0 {
        return Solution { cols: Vec::new(), total: 0.0, u: vec![0.0], v: vec![0.0; m + 1] };
    }
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            rows[owner[j] - 1] = j - 1;
        }
    }
    let total = rows.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Solution { cols: rows, total, u, v }
}

/// Minimum-cost assignment of every target to a distinct prediction.
///
/// Extra predictions behave as if matched to zero-cost dummy targets. Among
/// optimal assignments the lexicographically smallest `sigma` is returned:
/// targets are fixed one at a time to the smallest prediction that still
/// admits an optimal completion. Only edges that are tight under the optimal
/// potentials can belong to an optimal assignment, so other candidates are
/// skipped without re-solving.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let (n, m) = c.0.shape();
    if n > m {
        return Err(shape(format!("{n} targets but only {m} predictions")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| c.0.row(i).to_vec()).collect();
    let full = solve(&rows, m);
    let best = full.total;
    let scale = c.0.as_slice().iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-11 * scale * (n.max(1) as f64);
    let tight_tol = 1e-9 * scale;

    let mut current = full.cols.clone();
    let mut sigma = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..m).collect();
    let mut acc = 0.0;
    for t in 0..n {
        let mut chosen = None;
        for (pos, &p) in free.iter().enumerate() {
            if p == current[t] {
                chosen = Some(pos);
                break;
            }
            if rows[t][p] - full.u[t + 1] - full.v[p + 1] > tight_tol {
                continue;
            }
            let cols: Vec<usize> = free.iter().copied().filter(|&q| q != p).collect();
            let sub: Vec<Vec<f64>> = rows[t + 1..].iter().map(|r| cols.iter().map(|&q| r[q]).collect()).collect();
            let rest = solve(&sub, cols.len());
            if acc + rows[t][p] + rest.total <= best + tol {
                for (k, &col) in rest.cols.iter().enumerate() {
                    current[t + 1 + k] = cols[col];
                }
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("current completion keeps its own column free");
        let p = free.remove(pos);
        acc += rows[t][p];
        sigma.push(p);
    }
    Assignment::new(sigma, m)
}

/// DETR matching cost between a labelled target and a prediction.
pub fn supervised_match_cost(
    target: (usize, &BBox),
    pred: (&ClassLogits, &BBox),
    w: &CostWeights,
) -> Result<f64> {
    let (class, tb) = target;
    let (logits, pb) = pred;
    if class >= logits.no_object() {
        return Err(invalid(format!("target class {class} must be a real class, not no-object")));
    }
    let focal = focal_loss(logits, class, FOCAL_GAMMA, FOCAL_ALPHA)?;
    Ok(w.lambda_class * focal + w.lambda_l1 * l1_box_loss(tb, pb) + w.lambda_giou * (1.0 - giou(tb, pb)))
}

/// Cost between a teacher and a student proposal: feature attraction plus box terms.
pub fn prop_match_cost(teacher: &Proposal, student: &Proposal, w: &CostWeights) -> Result<f64> {
    let cos = cosine_similarity(&teacher.z, &student.z)?;
    Ok(-w.lambda_sim * cos + w.lambda_coord * l1_box_loss(&teacher.b, &student.b) + w.lambda_giou * (1.0 - giou(&teacher.b, &student.b)))
}

pub fn box_match_cost(ss_box: &BBox, pred_box: &BBox, w: &CostWeights) -> f64 {
    w.lambda_coord * l1_box_loss(ss_box, pred_box) + w.lambda_giou * (1.0 - giou(ss_box, pred_box))
}

pub fn supervised_cost_matrix(targets: &[(usize, BBox)], preds: &[(ClassLogits, BBox)], w: &CostWeights) -> Result<CostMatrix> {
    let mut m = Matrix::zeros(targets.len(), preds.len());
    for (t, (class, tb)) in targets.iter().enumerate() {
        for (p, (logits, pb)) in preds.iter().enumerate() {
            m[(t, p)] = supervised_match_cost((*class, tb), (logits, pb), w)?;
        }
    }
    CostMatrix::new(m)
}

pub fn prop_cost_matrix(teacher: &[Proposal], student: &[Proposal], w: &CostWeights) -> Result<CostMatrix> {
    let mut m = Matrix::zeros(teacher.len(), student.len());
    for (t, tp) in teacher.iter().enumerate() {
        for (s, sp) in student.iter().enumerate() {
            m[(t, s)] = prop_match_cost(tp, sp, w)?;
        }
    }
    CostMatrix::new(m)
}

pub fn box_cost_matrix(ss_boxes: &[BBox], pred_boxes: &[BBox], w: &CostWeights) -> Result<CostMatrix> {
    CostMatrix::new(Matrix::from_fn(ss_boxes.len(), pred_boxes.len(), |t, p| box_match_cost(&ss_boxes[t], &pred_boxes[p], w)))
}
