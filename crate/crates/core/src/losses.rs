//! Attack-side losses: IoU, per-box detection score, attack loss, smoothness
//! loss, and their gradients where the optimization path needs them.

use ndarray::Array3;

use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-6;
/// Index of the vehicle class in per-box class confidence vectors.
pub const CAR_CLASS: usize = 0;
pub const NUM_CLASSES: usize = 2;

/// Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_with_grad(a, b).0
}

/// IoU plus its gradient with respect to the first box's coordinates
/// (x1, y1, x2, y2). The gradient is the one-sided derivative 0 at the
/// disjoint boundary.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let area_a = a.area();
    let area_b = b.area();
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let val = inter / union;
    // d inter / d (a coords)
    let di = [
        if a.x1 > b.x1 { -ih } else { 0.0 },
        if a.y1 > b.y1 { -iw } else { 0.0 },
        if a.x2 < b.x2 { ih } else { 0.0 },
        if a.y2 < b.y2 { iw } else { 0.0 },
    ];
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let da = [-ah, -aw, ah, aw];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        grad[k] = (di[k] * union - inter * du) / (union * union);
    }
    (val, grad)
}

/// Detector output boxes with per-box objectness and class confidences.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
    /// Per-box [car, background] confidences in [0,1].
    pub class_conf: Vec<[f64; NUM_CLASSES]>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Ranking confidence for evaluation: car class confidence x objectness.
    pub fn confidence(&self, i: usize) -> f64 {
        self.class_conf[i][CAR_CLASS] * self.objectness[i]
    }
}

/// Per-box H_d = IoU(box, gt) * car confidence * objectness. Boxes that do
/// not intersect the ground truth score exactly 0.
pub fn detection_score(dets: &DetectionSet, gt: &BBox) -> Vec<f64> {
    (0..dets.len())
        .map(|i| iou(&dets.boxes[i], gt) * dets.class_conf[i][CAR_CLASS] * dets.objectness[i])
        .collect()
}

/// Which detection boxes participate in the attack loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttackLossVariant {
    /// Every decoded box feeds the max.
    AllBoxes,
    /// Only boxes whose area contains the ground-truth center (an
    /// FCA-style restriction, used for the ablation).
    GtCenterBox,
}

/// -log(1 - max H_d), with max over the empty set defined as 0.
pub fn attack_loss(dets: &DetectionSet, gt: &BBox) -> f64 {
    attack_loss_variant(dets, gt, AttackLossVariant::AllBoxes).loss
}

/// Loss plus the pieces needed to push gradient into the argmax box.
#[derive(Debug, Clone, Copy)]
pub struct AttackLossGrad {
    pub loss: f64,
    pub max_hd: f64,
    /// Index of the argmax box, if any box scored above zero.
    pub box_index: Option<usize>,
    /// d loss / d (x1, y1, x2, y2) of the argmax box.
    pub d_box: [f64; 4],
    /// d loss / d car confidence of the argmax box.
    pub d_car: f64,
    /// d loss / d objectness of the argmax box.
    pub d_obj: f64,
}

pub fn attack_loss_variant(
    dets: &DetectionSet,
    gt: &BBox,
    variant: AttackLossVariant,
) -> AttackLossGrad {
    let (gcx, gcy) = gt.center();
    let mut best: Option<(usize, f64, f64, [f64; 4])> = None; // (idx, hd, iou, diou)
    for i in 0..dets.len() {
        if variant == AttackLossVariant::GtCenterBox && !dets.boxes[i].contains(gcx, gcy) {
            continue;
        }
        let (iou_val, diou) = iou_with_grad(&dets.boxes[i], gt);
        let hd = iou_val * dets.class_conf[i][CAR_CLASS] * dets.objectness[i];
        if best.map_or(true, |(_, bh, _, _)| hd > bh) {
            best = Some((i, hd, iou_val, diou));
        }
    }
    match best {
        None => AttackLossGrad {
            loss: 0.0,
            max_hd: 0.0,
            box_index: None,
            d_box: [0.0; 4],
            d_car: 0.0,
            d_obj: 0.0,
        },
        Some((idx, hd_raw, iou_val, diou)) => {
            let hd = hd_raw.min(1.0 - LOG_EPS);
            let loss = -(1.0 - hd).ln();
            let pass = if hd_raw < 1.0 - LOG_EPS { 1.0 } else { 0.0 };
            let dl_dhd = pass / (1.0 - hd);
            let car = dets.class_conf[idx][CAR_CLASS];
            let obj = dets.objectness[idx];
            let mut d_box = [0.0; 4];
            for k in 0..4 {
                d_box[k] = dl_dhd * car * obj * diou[k];
            }
            AttackLossGrad {
                loss,
                max_hd: hd_raw,
                box_index: Some(idx),
                d_box,
                d_car: dl_dhd * iou_val * obj,
                d_obj: dl_dhd * iou_val * car,
            }
        }
    }
}

/// Sum of squared horizontal and vertical neighbor differences over all
/// channels.
pub fn smooth_loss(x: &Array3<f64>) -> f64 {
    let (h, w, c) = x.dim();
    let mut acc = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x[[y, xx, ch]];
                if y + 1 < h {
                    let d = v - x[[y + 1, xx, ch]];
                    acc += d * d;
                }
                if xx + 1 < w {
                    let d = v - x[[y, xx + 1, ch]];
                    acc += d * d;
                }
            }
        }
    }
    acc
}

/// Gradient of `smooth_loss`.
pub fn smooth_loss_grad(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut g = Array3::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x[[y, xx, ch]];
                if y + 1 < h {
                    let d = 2.0 * (v - x[[y + 1, xx, ch]]);
                    g[[y, xx, ch]] += d;
                    g[[y + 1, xx, ch]] -= d;
                }
                if xx + 1 < w {
                    let d = 2.0 * (v - x[[y, xx + 1, ch]]);
                    g[[y, xx, ch]] += d;
                    g[[y, xx + 1, ch]] -= d;
                }
            }
        }
    }
    g
}

/// alpha * l_atk + beta * l_sm.
pub fn total_loss(l_atk: f64, l_sm: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidInput(format!(
            "loss weights must be nonnegative, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(alpha * l_atk + beta * l_sm)
}

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(boxes: Vec<BBox>, obj: Vec<f64>, car: Vec<f64>) -> DetectionSet {
        let class_conf = car.iter().map(|&c| [c, 1.0 - c]).collect();
        DetectionSet {
            boxes,
            objectness: obj,
            class_conf,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        // degenerate box contributes zero overlap, not an error
        let z = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&a, &z), 0.0);
    }

    #[test]
    fn iou_gradient_matches_finite_differences() {
        let g = BBox::new(2.0, 3.0, 10.0, 9.0);
        let a = BBox::new(4.0, 1.0, 12.0, 8.0);
        let (_, grad) = iou_with_grad(&a, &g);
        let h = 1e-6;
        for k in 0..4 {
            let perturb = |delta: f64| {
                let mut b = a;
                match k {
                    0 => b.x1 += delta,
                    1 => b.y1 += delta,
                    2 => b.x2 += delta,
                    _ => b.y2 += delta,
                }
                iou(&b, &g)
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6, "coord {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn detection_score_examples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // disjoint box scores 0 regardless of confidences
        let d = det(
            vec![BBox::new(20.0, 20.0, 30.0, 30.0)],
            vec![1.0],
            vec![1.0],
        );
        assert_eq!(detection_score(&d, &gt), vec![0.0]);
        // IoU 0.5 x 0.8 x 0.9 = 0.36
        let half = BBox::new(0.0, 0.0, 5.0, 10.0);
        let d = det(vec![half], vec![0.9], vec![0.8]);
        let s = detection_score(&d, &gt);
        assert!((s[0] - 0.36).abs() < 1e-12);
        // empty set -> empty scores
        let d = det(vec![], vec![], vec![]);
        assert!(detection_score(&d, &gt).is_empty());
    }

    #[test]
    fn attack_loss_examples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let empty = det(vec![], vec![], vec![]);
        assert_eq!(attack_loss(&empty, &gt), 0.0);
        // max H_d = 0.5 -> -log(0.5)
        let d = det(vec![gt], vec![0.5], vec![1.0]);
        assert!((attack_loss(&d, &gt) - 0.6931).abs() < 1e-4);
        // max H_d = 0.36 -> -log(0.64)
        let half = BBox::new(0.0, 0.0, 5.0, 10.0);
        let d = det(vec![half], vec![0.9], vec![0.8]);
        assert!((attack_loss(&d, &gt) - 0.4463).abs() < 1e-4);
    }

    #[test]
    fn attack_loss_center_box_variant_restricts() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // high-scoring box that overlaps but misses the gt center
        let off = BBox::new(6.0, 6.0, 14.0, 14.0);
        // low-scoring box containing the center
        let on = BBox::new(1.0, 1.0, 9.0, 9.0);
        let d = det(vec![off, on], vec![0.9, 0.1], vec![0.9, 0.1]);
        let all = attack_loss_variant(&d, &gt, AttackLossVariant::AllBoxes);
        let center = attack_loss_variant(&d, &gt, AttackLossVariant::GtCenterBox);
        assert_eq!(center.box_index, Some(1));
        assert!(all.max_hd > center.max_hd);
    }

    #[test]
    fn smooth_loss_examples() {
        let c = Array3::from_elem((5, 7, 3), 0.42);
        assert_eq!(smooth_loss(&c), 0.0);
        let mut x = Array3::zeros((1, 2, 1));
        x[[0, 1, 0]] = 1.0;
        assert_eq!(smooth_loss(&x), 1.0);
        let mut x = Array3::zeros((2, 2, 1));
        x[[0, 1, 0]] = 1.0;
        x[[1, 1, 0]] = 1.0;
        assert_eq!(smooth_loss(&x), 2.0);
    }

    #[test]
    fn smooth_loss_grad_matches_finite_differences() {
        let x = Array3::from_shape_fn((4, 3, 2), |(y, xx, c)| {
            ((y * 3 + xx) as f64 * 0.13 + c as f64 * 0.07).sin()
        });
        let g = smooth_loss_grad(&x);
        let h = 1e-6;
        for idx in [(0, 0, 0), (2, 1, 1), (3, 2, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (smooth_loss(&xp) - smooth_loss(&xm)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 100.0, 1.0, 1e-4).unwrap(), 0.51);
        assert_eq!(total_loss(0.7, 9999.0, 1.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(1.0, 1.0, -1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariance(scale in 0.1f64..50.0,
                            x1 in 0.0f64..20.0, y1 in 0.0f64..20.0,
                            w in 0.5f64..20.0, h in 0.5f64..20.0,
                            gx in 0.0f64..20.0, gy in 0.0f64..20.0,
                            gw in 0.5f64..20.0, gh in 0.5f64..20.0,
                            obj in 0.0f64..1.0, car in 0.0f64..1.0) {
            let a = BBox::new(x1, y1, x1 + w, y1 + h);
            let g = BBox::new(gx, gy, gx + gw, gy + gh);
            let s = |b: &BBox| BBox::new(b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale);
            prop_assert!((iou(&a, &g) - iou(&s(&a), &s(&g))).abs() < 1e-9);
            let d = det(vec![a], vec![obj], vec![car]);
            let ds = det(vec![s(&a)], vec![obj], vec![car]);
            let v1 = detection_score(&d, &g)[0];
            let v2 = detection_score(&ds, &s(&g))[0];
            prop_assert!((v1 - v2).abs() < 1e-9);
            prop_assert!((attack_loss(&d, &g) - attack_loss(&ds, &s(&g))).abs() < 1e-9);
        }

        #[test]
        fn hd_in_unit_interval_and_loss_monotone(
            x1 in 0.0f64..20.0, y1 in 0.0f64..20.0,
            w in 0.5f64..20.0, h in 0.5f64..20.0,
            obj in 0.0f64..1.0, car in 0.0f64..1.0) {
            let gt = BBox::new(5.0, 5.0, 15.0, 15.0);
            let a = BBox::new(x1, y1, x1 + w, y1 + h);
            let d = det(vec![a], vec![obj], vec![car]);
            let hd = detection_score(&d, &gt)[0];
            prop_assert!((0.0..=1.0).contains(&hd));
            let loss = attack_loss(&d, &gt);
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, hd == 0.0);
        }

        #[test]
        fn smooth_loss_transpose_invariant(vals in proptest::collection::vec(0.0f64..1.0, 12)) {
            let x = Array3::from_shape_vec((3, 4, 1), vals).unwrap();
            let xt = Array3::from_shape_fn((4, 3, 1), |(y, xx, c)| x[[xx, y, c]]);
            prop_assert!((smooth_loss(&x) - smooth_loss(&xt)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_box_gives_hd_one() {
        let gt = BBox::new(2.0, 2.0, 8.0, 8.0);
        let d = det(vec![gt], vec![1.0], vec![1.0]);
        assert_eq!(detection_score(&d, &gt), vec![1.0]);
    }
}
