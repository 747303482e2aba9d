//! Grid-cell toy detector: the frozen white-box detector the camouflage is
//! optimized against.
//!
//! A small stride-2 conv stack maps an H x W image to an (H/8) x (W/8) grid;
//! every cell decodes to one box with objectness and two class scores
//! (car, background). The full decode is differentiable in the input image,
//! and no NMS runs inside the loss path; evaluation applies NMS separately.

use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::environment::WeatherParams;
use crate::error::{Error, Result};
use crate::eval::{ap_at_05, nms, EvalRecord};
use crate::losses::{AttackLossGrad, BBox, DetectionSet};
use crate::mesh_render::CameraPose;
use crate::nn::{self, relu, relu_backward, sigmoid, Adam, Conv2d, Conv2dGrad};

/// Channels per grid cell: 4 box terms, objectness, car, background.
pub const CELL_CHANNELS: usize = 7;
/// Input-to-grid downsampling factor.
pub const GRID_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub c4: Conv2d,
    pub head: Conv2d,
}

pub struct DetCache {
    x: Array3<f64>,
    a1p: Array3<f64>,
    a1: Array3<f64>,
    a2p: Array3<f64>,
    a2: Array3<f64>,
    a3p: Array3<f64>,
    a3: Array3<f64>,
    a4p: Array3<f64>,
    a4: Array3<f64>,
    /// (S, S, 7) raw cell outputs before activations.
    pub raw: Array3<f64>,
}

pub struct DetGrads {
    pub c1: Conv2dGrad,
    pub c2: Conv2dGrad,
    pub c3: Conv2dGrad,
    pub c4: Conv2dGrad,
    pub head: Conv2dGrad,
}

impl ToyDetector {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        ToyDetector {
            c1: Conv2d::new(3, 3, 3, 16, 2, 1, r),
            c2: Conv2d::new(3, 3, 16, 32, 2, 1, r),
            c3: Conv2d::new(3, 3, 32, 48, 2, 1, r),
            // grid-resolution conv widens the receptive field well past a
            // single cell before the per-cell head
            c4: Conv2d::new(3, 3, 48, 64, 1, 1, r),
            head: Conv2d::new(1, 1, 64, CELL_CHANNELS, 1, 0, r),
        }
    }

    pub fn forward_cached(&self, image: &Array3<f64>) -> Result<DetCache> {
        let (h, w, c) = image.dim();
        if c != 3 || h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("(k*{GRID_STRIDE}, k*{GRID_STRIDE}, 3)"),
                got: format!("{:?}", image.dim()),
            });
        }
        let a1p = self.c1.forward(image);
        let a1 = relu(&a1p);
        let a2p = self.c2.forward(&a1);
        let a2 = relu(&a2p);
        let a3p = self.c3.forward(&a2);
        let a3 = relu(&a3p);
        let a4p = self.c4.forward(&a3);
        let a4 = relu(&a4p);
        let raw = self.head.forward(&a4);
        Ok(DetCache {
            x: image.clone(),
            a1p,
            a1,
            a2p,
            a2,
            a3p,
            a3,
            a4p,
            a4,
            raw,
        })
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<DetectionSet> {
        let (h, w, _) = image.dim();
        Ok(decode(&self.forward_cached(image)?.raw, (h, w)))
    }

    /// Backward from raw-output gradients; returns the input-image gradient.
    pub fn backward(&self, cache: &DetCache, d_raw: &Array3<f64>) -> (Array3<f64>, DetGrads) {
        let (da4, g_head) = self.head.backward(&cache.a4, d_raw);
        let da4p = relu_backward(&cache.a4p, &da4);
        let (da3, g_c4) = self.c4.backward(&cache.a3, &da4p);
        let da3p = relu_backward(&cache.a3p, &da3);
        let (da2, g_c3) = self.c3.backward(&cache.a2, &da3p);
        let da2p = relu_backward(&cache.a2p, &da2);
        let (da1, g_c2) = self.c2.backward(&cache.a1, &da2p);
        let da1p = relu_backward(&cache.a1p, &da1);
        let (dx, g_c1) = self.c1.backward(&cache.x, &da1p);
        (
            dx,
            DetGrads {
                c1: g_c1,
                c2: g_c2,
                c3: g_c3,
                c4: g_c4,
                head: g_head,
            },
        )
    }

    fn convs(&self) -> [&Conv2d; 5] {
        [&self.c1, &self.c2, &self.c3, &self.c4, &self.head]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d; 5] {
        [&mut self.c1, &mut self.c2, &mut self.c3, &mut self.c4, &mut self.head]
    }

    pub fn adam_step(&mut self, grads: &DetGrads, adam: &mut Adam) {
        let gs = [&grads.c1, &grads.c2, &grads.c3, &grads.c4, &grads.head];
        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(10);
        for (conv, g) in self.convs_mut().into_iter().zip(gs) {
            pairs.push((conv.w.as_slice_mut().unwrap(), g.w.as_slice().unwrap()));
            pairs.push((conv.b.as_slice_mut().unwrap(), g.b.as_slice().unwrap()));
        }
        adam.step(&mut pairs);
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut header = serde_json::json!({
            "arch": "toy-grid-detector",
            "cell_channels": CELL_CHANNELS,
            "grid_stride": GRID_STRIDE,
            "format_version": nn::CKPT_VERSION,
        });
        if let (Some(obj), Some(src)) = (header.as_object_mut(), extra.as_object()) {
            for (k, v) in src {
                obj.insert(k.clone(), v.clone());
            }
        }
        let mut tensors = Vec::new();
        for conv in self.convs() {
            nn::conv_tensors(conv, &mut tensors);
        }
        nn::save_checkpoint(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::load_checkpoint(path)?;
        if ck.header["arch"] != "toy-grid-detector" {
            return Err(Error::Format(format!(
                "checkpoint at {} is not a detector checkpoint",
                path.display()
            )));
        }
        let mut net = ToyDetector::new(0);
        let mut cursor = 0;
        for conv in net.convs_mut() {
            nn::conv_from_tensors(conv, &ck.tensors, &mut cursor)?;
        }
        Ok(net)
    }
}

/// Decodes every grid cell (row-major) to a box plus scores.
pub fn decode(raw: &Array3<f64>, image_size: (usize, usize)) -> DetectionSet {
    let (s_h, s_w, _) = raw.dim();
    let (h, w) = image_size;
    let mut out = DetectionSet::default();
    for i in 0..s_h {
        for j in 0..s_w {
            let sx = sigmoid(raw[[i, j, 0]]);
            let sy = sigmoid(raw[[i, j, 1]]);
            let bw = sigmoid(raw[[i, j, 2]]);
            let bh = sigmoid(raw[[i, j, 3]]);
            let cx = (j as f64 + sx) / s_w as f64 * w as f64;
            let cy = (i as f64 + sy) / s_h as f64 * h as f64;
            let bw_px = bw * w as f64;
            let bh_px = bh * h as f64;
            out.boxes.push(BBox::new(
                cx - bw_px / 2.0,
                cy - bh_px / 2.0,
                cx + bw_px / 2.0,
                cy + bh_px / 2.0,
            ));
            out.objectness.push(sigmoid(raw[[i, j, 4]]));
            out.class_conf
                .push([sigmoid(raw[[i, j, 5]]), sigmoid(raw[[i, j, 6]])]);
        }
    }
    out
}

/// Adjoint of `decode` restricted to the argmax box of the attack loss.
pub fn attack_raw_gradient(
    raw: &Array3<f64>,
    image_size: (usize, usize),
    alg: &AttackLossGrad,
) -> Array3<f64> {
    let (s_h, s_w, c) = raw.dim();
    let mut d_raw = Array3::zeros((s_h, s_w, c));
    let Some(idx) = alg.box_index else {
        return d_raw;
    };
    let (h, w) = image_size;
    let (i, j) = (idx / s_w, idx % s_w);
    let sx = sigmoid(raw[[i, j, 0]]);
    let sy = sigmoid(raw[[i, j, 1]]);
    let bw = sigmoid(raw[[i, j, 2]]);
    let bh = sigmoid(raw[[i, j, 3]]);
    let obj = sigmoid(raw[[i, j, 4]]);
    let car = sigmoid(raw[[i, j, 5]]);
    let d_cx = alg.d_box[0] + alg.d_box[2];
    let d_cy = alg.d_box[1] + alg.d_box[3];
    let d_w = (alg.d_box[2] - alg.d_box[0]) / 2.0;
    let d_h = (alg.d_box[3] - alg.d_box[1]) / 2.0;
    d_raw[[i, j, 0]] = d_cx * (w as f64 / s_w as f64) * sx * (1.0 - sx);
    d_raw[[i, j, 1]] = d_cy * (h as f64 / s_h as f64) * sy * (1.0 - sy);
    d_raw[[i, j, 2]] = d_w * w as f64 * bw * (1.0 - bw);
    d_raw[[i, j, 3]] = d_h * h as f64 * bh * (1.0 - bh);
    d_raw[[i, j, 4]] = alg.d_obj * obj * (1.0 - obj);
    d_raw[[i, j, 5]] = alg.d_car * car * (1.0 - car);
    d_raw
}

/// Benign training sample for the detector.
#[derive(Debug, Clone)]
pub struct DetSample {
    pub id: String,
    pub image: Array3<f64>,
    pub gt: BBox,
    pub pose: CameraPose,
    pub weather: WeatherParams,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainDetectorConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Required AP@0.5 on the held-out benign set.
    pub ap_threshold: f64,
    pub lambda_noobj: f64,
    pub lambda_box: f64,
}

impl Default for TrainDetectorConfig {
    fn default() -> Self {
        TrainDetectorConfig {
            learning_rate: 3e-3,
            epochs: 48,
            seed: 0,
            ap_threshold: 0.60,
            lambda_noobj: 0.1,
            lambda_box: 5.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainDetectorReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_ap: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
}

/// YOLO-style per-cell targets: the cell containing the gt center predicts
/// the box, everything else is penalized toward zero objectness.
fn detection_loss_raw_grad(
    raw: &Array3<f64>,
    gt: &BBox,
    image_size: (usize, usize),
    config: &TrainDetectorConfig,
) -> (f64, Array3<f64>) {
    let (s_h, s_w, c) = raw.dim();
    let (h, w) = image_size;
    let (gcx, gcy) = gt.center();
    let rj = ((gcx / w as f64 * s_w as f64).floor() as i64).clamp(0, s_w as i64 - 1) as usize;
    let ri = ((gcy / h as f64 * s_h as f64).floor() as i64).clamp(0, s_h as i64 - 1) as usize;
    let mut d_raw = Array3::zeros((s_h, s_w, c));
    let mut loss = 0.0;
    let eps = 1e-12;
    for i in 0..s_h {
        for j in 0..s_w {
            let obj = sigmoid(raw[[i, j, 4]]);
            let responsible = i == ri && j == rj;
            // the positive cell gets full weight and its objectness target is
            // the current box IoU, so confidence tracks localization quality;
            // every other cell is pushed toward zero objectness with weight
            // lambda_noobj, which is what prunes near-miss boxes at eval time
            let (target, weight) = if responsible {
                let sx = sigmoid(raw[[i, j, 0]]);
                let sy = sigmoid(raw[[i, j, 1]]);
                let bw = sigmoid(raw[[i, j, 2]]) * w as f64;
                let bh = sigmoid(raw[[i, j, 3]]) * h as f64;
                let cx = (j as f64 + sx) / s_w as f64 * w as f64;
                let cy = (i as f64 + sy) / s_h as f64 * h as f64;
                let pred = BBox::new(
                    cx - bw / 2.0,
                    cy - bh / 2.0,
                    cx + bw / 2.0,
                    cy + bh / 2.0,
                );
                // treated as a constant target, no gradient through the IoU
                (crate::losses::iou(&pred, gt), 1.0)
            } else {
                (0.0, config.lambda_noobj)
            };
            loss -=
                weight * (target * (obj + eps).ln() + (1.0 - target) * (1.0 - obj + eps).ln());
            d_raw[[i, j, 4]] = weight * (obj - target);
            if responsible {
                // box regression on the sigmoid outputs
                let tx = gcx / w as f64 * s_w as f64 - rj as f64;
                let ty = gcy / h as f64 * s_h as f64 - ri as f64;
                let tw = (gt.x2 - gt.x1) / w as f64;
                let th = (gt.y2 - gt.y1) / h as f64;
                let targets = [tx, ty, tw, th];
                for (k, &t) in targets.iter().enumerate() {
                    let p = sigmoid(raw[[i, j, k]]);
                    loss += config.lambda_box * (p - t) * (p - t);
                    d_raw[[i, j, k]] = config.lambda_box * 2.0 * (p - t) * p * (1.0 - p);
                }
                // class scores: car = 1, background = 0
                for (k, t) in [(5usize, 1.0f64), (6, 0.0)] {
                    let p = sigmoid(raw[[i, j, k]]);
                    loss -= t * (p + eps).ln() + (1.0 - t) * (1.0 - p + eps).ln();
                    d_raw[[i, j, k]] = p - t;
                }
            }
        }
    }
    (loss, d_raw)
}

/// AP@0.5 of the detector over benign samples, NMS applied.
pub fn benign_ap(net: &ToyDetector, samples: &[DetSample]) -> Result<f64> {
    let records = eval_records(net, samples)?;
    ap_at_05(&records)
}

pub fn eval_records(net: &ToyDetector, samples: &[DetSample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            let dets = net.forward(&s.image)?;
            Ok(EvalRecord {
                sample_id: s.id.clone(),
                pose: s.pose,
                weather: s.weather,
                detections: nms(&dets),
                gt: s.gt,
            })
        })
        .collect()
}

/// Trains the detector on benign samples; returns the epoch checkpoint with
/// the best held-out AP, which must reach `config.ap_threshold`.
pub fn train_toy_detector(
    train: &[DetSample],
    val: &[DetSample],
    config: &TrainDetectorConfig,
) -> Result<(ToyDetector, TrainDetectorReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("empty detector training or val set".into()));
    }
    let mut net = ToyDetector::new(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd373c7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainDetectorReport {
        epoch_loss: Vec::new(),
        epoch_val_ap: Vec::new(),
        best_epoch: 0,
        best_val_ap: 0.0,
    };
    let mut best: Option<(ToyDetector, usize, f64)> = None;
    for epoch in 0..config.epochs {
        // two-step decay: coarse fit at full rate, then two refinement
        // phases; checkpoint selection almost always lands after the
        // second step, where epoch-to-epoch variance is small
        adam.lr = if epoch * 4 >= config.epochs * 3 {
            config.learning_rate * 0.09
        } else if epoch * 2 >= config.epochs {
            config.learning_rate * 0.3
        } else {
            config.learning_rate
        };
        crate::environment::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let sample = &train[i];
            let (h, w, _) = sample.image.dim();
            let cache = net.forward_cached(&sample.image)?;
            let (loss, d_raw) = detection_loss_raw_grad(&cache.raw, &sample.gt, (h, w), config);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "detector loss not finite at epoch {epoch}, sample {}",
                    sample.id
                )));
            }
            epoch_loss += loss;
            let (_, grads) = net.backward(&cache, &d_raw);
            net.adam_step(&grads, &mut adam);
        }
        report.epoch_loss.push(epoch_loss / train.len() as f64);
        let ap = benign_ap(&net, val)?;
        report.epoch_val_ap.push(ap);
        // checkpoints are picked only from the final low-rate phase; val AP
        // spikes during the high-rate phases do not generalize
        let selectable = epoch * 4 >= config.epochs * 3 || epoch + 1 == config.epochs;
        if selectable && best.as_ref().map_or(true, |(_, _, b)| ap > *b) {
            best = Some((net.clone(), epoch, ap));
        }
    }
    let (best_net, best_epoch, best_ap) = best.unwrap();
    report.best_epoch = best_epoch;
    report.best_val_ap = best_ap;
    if best_ap < config.ap_threshold {
        return Err(Error::TrainingFailure(format!(
            "benign AP@0.5 {best_ap:.4} below required {:.2} after {} epochs",
            config.ap_threshold, config.epochs
        )));
    }
    Ok((best_net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{attack_loss_variant, AttackLossVariant};
    use crate::mesh_render::uniform01;

    #[test]
    fn grid_decode_count() {
        let net = ToyDetector::new(1);
        let img = Array3::zeros((64, 64, 3));
        let dets = net.forward(&img).unwrap();
        assert_eq!(dets.len(), 64); // S = 8 grid
        for b in &dets.boxes {
            assert!(b.x1 < b.x2 && b.y1 < b.y2);
        }
    }

    #[test]
    fn zero_weights_give_uniform_cells() {
        let mut net = ToyDetector::new(1);
        for conv in net.convs_mut() {
            conv.w.fill(0.0);
            conv.b.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array3::from_shape_fn((32, 32, 3), |_| uniform01(&mut rng));
        let dets = net.forward(&img).unwrap();
        for i in 1..dets.len() {
            assert_eq!(dets.objectness[i], dets.objectness[0]);
            assert_eq!(dets.class_conf[i], dets.class_conf[0]);
        }
    }

    #[test]
    fn resolution_mismatch_is_error() {
        let net = ToyDetector::new(1);
        assert!(net.forward(&Array3::zeros((30, 30, 3))).is_err());
    }

    #[test]
    fn attack_gradient_matches_finite_differences() {
        let net = ToyDetector::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Array3::from_shape_fn((32, 32, 3), |_| uniform01(&mut rng));
        let gt = BBox::new(8.0, 8.0, 24.0, 24.0);
        let loss_of = |image: &Array3<f64>| {
            let dets = net.forward(image).unwrap();
            attack_loss_variant(&dets, &gt, AttackLossVariant::AllBoxes).loss
        };
        let cache = net.forward_cached(&img).unwrap();
        let dets = decode(&cache.raw, (32, 32));
        let alg = attack_loss_variant(&dets, &gt, AttackLossVariant::AllBoxes);
        let d_raw = attack_raw_gradient(&cache.raw, (32, 32), &alg);
        let (d_img, _) = net.backward(&cache, &d_raw);
        assert!(alg.box_index.is_some(), "attack loss saw no scoring box");
        // gradient support is the receptive field of the argmax cell; check
        // the strongest entries rather than random pixels
        let mut candidates: Vec<((usize, usize, usize), f64)> = d_img
            .indexed_iter()
            .map(|(idx, &v)| (idx, v.abs()))
            .filter(|(_, a)| *a > 1e-6)
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        assert!(candidates.len() >= 5, "too few informative pixels");
        let h = 1e-5;
        for &((y, x, c), _) in candidates.iter().take(8) {
            let mut ip = img.clone();
            ip[[y, x, c]] += h;
            let mut im = img.clone();
            im[[y, x, c]] -= h;
            let fd = (loss_of(&ip) - loss_of(&im)) / (2.0 * h);
            let analytic = d_img[[y, x, c]];
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(rel < 1e-3, "at ({y},{x},{c}): fd {fd} vs {analytic}");
        }
    }

    #[test]
    fn detector_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.ckpt");
        let net = ToyDetector::new(7);
        net.save(&p, serde_json::json!({"seed": 7})).unwrap();
        assert_eq!(ToyDetector::load(&p).unwrap(), net);
    }

    #[test]
    fn inference_is_deterministic() {
        let net = ToyDetector::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Array3::from_shape_fn((32, 32, 3), |_| uniform01(&mut rng));
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.objectness, b.objectness);
    }
}
