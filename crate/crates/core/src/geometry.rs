//! Axis-aligned boxes in normalized `(cx, cy, w, h)` form.

use crate::error::{invalid, Result};
use crate::numerics::Matrix;

/// Normalized box: centre in `[0, 1]^2`, extents in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(invalid("box coordinates must be finite"));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(invalid(format!("box centre ({cx}, {cy}) outside [0, 1]")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(invalid(format!("box extents ({w}, {h}) must lie in (0, 1]")));
        }
        Ok(b)
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Detection candidate for NMS and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

struct Overlap {
    inter: f64,
    union: f64,
    enclose: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from corners so that identical boxes give an IoU of exactly 1
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Overlap { inter, union, enclose }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// Generalized IoU: `IoU - (|C| - |A u B|) / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union - (o.enclose - o.union) / o.enclose
}

pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

/// Symmetric IoU matrix with unit diagonal.
pub fn pairwise_iou(boxes: &[BBox]) -> Matrix {
    let n = boxes.len();
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = iou(&boxes[i], &boxes[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `||a - b||_1` over `(cx, cy, w, h)`.
pub fn l1_box_loss(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Subgradient of the L1 box loss with respect to `a` (the one for `b` is its negation); 0 at ties.
pub fn grad_l1_box_loss(a: &BBox, b: &BBox) -> [f64; 4] {
    let (aa, bb) = (a.to_array(), b.to_array());
    let mut g = [0.0; 4];
    for i in 0..4 {
        let d = aa[i] - bb[i];
        g[i] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    g
}

/// Gradient of `giou(a, b)` with respect to the `(cx, cy, w, h)` of both boxes.
///
/// At ties between corners (where min/max switch) the first box wins, giving
/// a one-sided derivative.
pub fn grad_giou(a: &BBox, b: &BBox) -> ([f64; 4], [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    // partials over [ax1, ay1, ax2, ay2, bx1, by1, bx2, by2]
    let mut d_inter = [0.0; 8];
    let mut d_enc = [0.0; 8];
    let mut d_area = [0.0; 8];

    let (aw, ah, bw, bh) = (ax2 - ax1, ay2 - ay1, bx2 - bx1, by2 - by1);
    d_area[0] = -ah;
    d_area[2] = ah;
    d_area[1] = -aw;
    d_area[3] = aw;
    d_area[4] = -bh;
    d_area[6] = bh;
    d_area[5] = -bw;
    d_area[7] = bw;

    // intersection extent along one axis: (index of lo/hi for a and b)
    let axis = |alo: f64, ahi: f64, blo: f64, bhi: f64, ia: (usize, usize), ib: (usize, usize)| {
        let lo_from_a = alo >= blo;
        let hi_from_a = ahi <= bhi;
        let ext = ahi.min(bhi) - alo.max(blo);
        let mut d = [0.0; 8];
        if ext > 0.0 {
            d[if hi_from_a { ia.1 } else { ib.1 }] += 1.0;
            d[if lo_from_a { ia.0 } else { ib.0 }] -= 1.0;
        }
        (ext.max(0.0), d)
    };
    let (iw, d_iw) = axis(ax1, ax2, bx1, bx2, (0, 2), (4, 6));
    let (ih, d_ih) = axis(ay1, ay2, by1, by2, (1, 3), (5, 7));
    for k in 0..8 {
        d_inter[k] = ih * d_iw[k] + iw * d_ih[k];
    }

    let enc_axis = |alo: f64, ahi: f64, blo: f64, bhi: f64, ia: (usize, usize), ib: (usize, usize)| {
        let mut d = [0.0; 8];
        d[if ahi >= bhi { ia.1 } else { ib.1 }] += 1.0;
        d[if alo <= blo { ia.0 } else { ib.0 }] -= 1.0;
        (ahi.max(bhi) - alo.min(blo), d)
    };
    let (cw, d_cw) = enc_axis(ax1, ax2, bx1, bx2, (0, 2), (4, 6));
    let (ch, d_ch) = enc_axis(ay1, ay2, by1, by2, (1, 3), (5, 7));
    for k in 0..8 {
        d_enc[k] = ch * d_cw[k] + cw * d_ch[k];
    }

    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    let enc = cw * ch;
    let mut d = [0.0; 8];
    for k in 0..8 {
        let d_union = d_area[k] - d_inter[k];
        d[k] = d_inter[k] / union + d_union * (1.0 / enc - inter / (union * union)) - d_enc[k] * union / (enc * enc);
    }
    let to_center = |c: &[f64]| [c[0] + c[2], c[1] + c[3], (c[2] - c[0]) / 2.0, (c[3] - c[1]) / 2.0];
    (to_center(&d[0..4]), to_center(&d[4..8]))
}

/// Class-aware greedy NMS. Returns kept indices in descending score order
/// (ties broken by original index).
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Result<Vec<usize>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(invalid(format!("NMS threshold must be in (0, 1], got {iou_threshold}")));
    }
    if candidates.iter().any(|c| !c.score.is_finite()) {
        return Err(invalid("NMS scores must be finite"));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| candidates[j].score.partial_cmp(&candidates[i].score).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            candidates[k].class_id == c.class_id && iou(&candidates[k].bbox, &c.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::rng::Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn random_box(rng: &mut Rng) -> BBox {
        b(rng.uniform_range(0.2, 0.8), rng.uniform_range(0.2, 0.8), rng.uniform_range(0.05, 0.5), rng.uniform_range(0.05, 0.5))
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, -0.1).is_err());
        assert!(BBox::new(1.5, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.1, 0.1, 0.1, 0.1), &b(0.9, 0.9, 0.1, 0.1)), 0.0);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.5, 0.5, 0.5, 0.5);
        assert_eq!(giou(&a, &a), 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        let expected = 1.0 / 7.0 - (0.5625 - 0.4375) / 0.5625;
        assert!((giou(&a, &c) - expected).abs() < 1e-12);
        assert!((giou(&a, &c) + 0.079365).abs() < 1e-6);
        let far = giou(&b(0.0, 0.0, 1e-4, 1e-4), &b(1.0, 1.0, 1e-4, 1e-4));
        assert!(far > -1.0 && far < -0.9999);
    }

    #[test]
    fn pairwise_matches_single_calls() {
        assert_eq!(pairwise_iou(&[b(0.5, 0.5, 0.2, 0.2)]), Matrix::identity(1));
        let two = pairwise_iou(&[b(0.1, 0.1, 0.1, 0.1), b(0.9, 0.9, 0.1, 0.1)]);
        assert_eq!(two, Matrix::identity(2));
        let mut rng = Rng::new(13);
        let boxes: Vec<BBox> = (0..3).map(|_| random_box(&mut rng)).collect();
        let m = pairwise_iou(&boxes);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { iou(&boxes[i], &boxes[j]) };
                assert_eq!(m[(i, j)], expect);
            }
        }
    }

    #[test]
    fn l1_examples() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        assert_eq!(l1_box_loss(&a, &a), 0.0);
        assert!((l1_box_loss(&a, &b(0.6, 0.5, 0.2, 0.2)) - 0.1).abs() < 1e-12);
        assert!((l1_box_loss(&a, &b(0.55, 0.55, 0.25, 0.25)) - 0.2).abs() < 1e-12);
        assert_eq!(grad_l1_box_loss(&a, &a), [0.0; 4]);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let a = random_box(&mut rng);
            let c = random_box(&mut rng);
            let x: Vec<f64> = a.to_array().iter().chain(c.to_array().iter()).copied().collect();
            let f = |v: &[f64]| {
                let p = BBox { cx: v[0], cy: v[1], w: v[2], h: v[3] };
                let q = BBox { cx: v[4], cy: v[5], w: v[6], h: v[7] };
                giou(&p, &q)
            };
            let fd = finite_diff_grad(f, &x, 1e-7).unwrap();
            let (ga, gb) = grad_giou(&a, &c);
            for k in 0..4 {
                assert!((ga[k] - fd[k]).abs() < 1e-6, "a[{k}] {} vs {}", ga[k], fd[k]);
                assert!((gb[k] - fd[4 + k]).abs() < 1e-6, "b[{k}] {} vs {}", gb[k], fd[4 + k]);
            }
        }
    }

    /// Reference NMS: for each box decide by scanning all higher-ranked kept boxes.
    fn brute_force_nms(c: &[ScoredBox], thr: f64) -> Vec<usize> {
        let n = c.len();
        let ranks_before = |i: usize, j: usize| c[j].score > c[i].score || (c[j].score == c[i].score && j < i);
        let mut keep = vec![false; n];
        // process in rank order by repeatedly selecting the best unprocessed
        let mut done = vec![false; n];
        let mut out = Vec::new();
        for _ in 0..n {
            let mut best = None;
            for i in 0..n {
                if done[i] {
                    continue;
                }
                if (0..n).all(|j| j == i || done[j] || !ranks_before(i, j)) {
                    best = Some(i);
                    break;
                }
            }
            let i = best.unwrap();
            done[i] = true;
            let ok = (0..n).all(|j| !keep[j] || c[j].class_id != c[i].class_id || iou(&c[j].bbox, &c[i].bbox) < thr);
            if ok {
                keep[i] = true;
                out.push(i);
            }
        }
        out
    }

    #[test]
    fn nms_examples() {
        let bx = b(0.5, 0.5, 0.2, 0.2);
        let c = [ScoredBox { bbox: bx, score: 0.8, class_id: 0 }, ScoredBox { bbox: bx, score: 0.9, class_id: 0 }];
        assert_eq!(nms(&c, 0.5).unwrap(), vec![1]);
        let c = [
            ScoredBox { bbox: b(0.1, 0.1, 0.1, 0.1), score: 0.8, class_id: 0 },
            ScoredBox { bbox: b(0.9, 0.9, 0.1, 0.1), score: 0.9, class_id: 0 },
        ];
        assert_eq!(nms(&c, 0.5).unwrap(), vec![1, 0]);
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let c: Vec<ScoredBox> = (0..5)
                .map(|_| ScoredBox { bbox: random_box(&mut rng), score: rng.uniform(), class_id: rng.below(2) })
                .collect();
            assert_eq!(nms(&c, 0.3).unwrap(), brute_force_nms(&c, 0.3));
        }
        assert!(nms(&c, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0.0f64..=1.0, 0.0f64..=1.0, 0.01f64..=1.0, 0.01f64..=1.0).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
        }

        proptest! {
            #[test]
            fn iou_giou_properties(a in arb_box(), c in arb_box()) {
                let i = iou(&a, &c);
                prop_assert!((0.0..=1.0).contains(&i));
                prop_assert!((i - iou(&c, &a)).abs() < 1e-12);
                let g = giou(&a, &c);
                prop_assert!(g <= i + 1e-12);
                prop_assert!(g > -1.0);
                prop_assert!((g - giou(&c, &a)).abs() < 1e-12);
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
                prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn pairwise_symmetric(boxes in proptest::collection::vec(arb_box(), 1..6)) {
                let m = pairwise_iou(&boxes);
                for i in 0..boxes.len() {
                    prop_assert_eq!(m[(i, i)], 1.0);
                    for j in 0..boxes.len() {
                        prop_assert_eq!(m[(i, j)], m[(j, i)]);
                    }
                }
            }

            #[test]
            fn nms_subset_sorted(boxes in proptest::collection::vec((arb_box(), 0.0f64..1.0, 0usize..3), 0..8), thr in 0.05f64..1.0) {
                let c: Vec<ScoredBox> = boxes.into_iter().map(|(bbox, score, class_id)| ScoredBox { bbox, score, class_id }).collect();
                let kept = nms(&c, thr).unwrap();
                prop_assert!(kept.iter().all(|&k| k < c.len()));
                prop_assert!(kept.windows(2).all(|w| c[w[0]].score >= c[w[1]].score));
                let mut dedup = kept.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), kept.len());
            }

            #[test]
            fn nms_threshold_one_keeps_distinct(boxes in proptest::collection::vec((arb_box(), 0.0f64..1.0), 0..8)) {
                let c: Vec<ScoredBox> = boxes.into_iter().map(|(bbox, score)| ScoredBox { bbox, score, class_id: 0 }).collect();
                let distinct = (0..c.len()).all(|i| (0..i).all(|j| iou(&c[i].bbox, &c[j].bbox) < 1.0));
                if distinct {
                    prop_assert_eq!(nms(&c, 1.0).unwrap().len(), c.len());
                }
            }
        }
    }
}
