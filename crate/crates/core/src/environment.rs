//! Environment path: analytic weather oracle, environment feature extractor
//! (EFE), multiply-add fusion, and EFE training.
//!
//! The oracle applies Lambertian shading and exponential fog inside the
//! vehicle silhouette and is the ground truth the EFE learns to mimic. The
//! EFE maps a masked reference image of the unpainted vehicle to two
//! per-pixel maps (multiplicative, additive) that transfer those environment
//! effects onto any rasterized texture.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh_render::{uniform01, RenderOutput};
use crate::nn::{
    self, relu, relu_backward, sigmoid, softplus, upsample2, upsample2_backward, Adam, Conv2d,
    Conv2dGrad,
};

pub const BCE_EPS: f64 = 1e-6;
pub const FOG_EXTINCTION: f64 = 0.004; // per meter per density unit
pub const FOG_COLOR: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeatherParams {
    pub sun_altitude_deg: f64,
    pub fog_density: f64,
}

impl WeatherParams {
    pub fn new(sun_altitude_deg: f64, fog_density: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&sun_altitude_deg) {
            return Err(Error::InvalidInput(format!(
                "sun altitude {sun_altitude_deg} outside [-90, 90]"
            )));
        }
        if !(0.0..=100.0).contains(&fog_density) {
            return Err(Error::InvalidInput(format!(
                "fog density {fog_density} outside [0, 100]"
            )));
        }
        Ok(WeatherParams {
            sun_altitude_deg,
            fog_density,
        })
    }
}

pub const DEFAULT_SUN_AZIMUTH_DEG: f64 = 45.0;

/// Lambertian shading plus exponential fog, inside the silhouette only.
pub fn env_oracle(
    render: &RenderOutput,
    weather: &WeatherParams,
    sun_azimuth_deg: f64,
) -> Array3<f64> {
    let (h, w, _) = render.color.dim();
    let alt = weather.sun_altitude_deg.to_radians();
    let az = sun_azimuth_deg.to_radians();
    let sun = [alt.cos() * az.cos(), alt.cos() * az.sin(), alt.sin()];
    let ambient = 0.15 + 0.35 * alt.sin().clamp(0.0, 1.0);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            if render.silhouette[[y, x]] == 0.0 {
                continue;
            }
            let n = [
                render.normals[[y, x, 0]],
                render.normals[[y, x, 1]],
                render.normals[[y, x, 2]],
            ];
            let ndots = (n[0] * sun[0] + n[1] * sun[1] + n[2] * sun[2]).max(0.0);
            let shade = ambient + (1.0 - ambient) * ndots;
            let t = (-render.depth[[y, x]] * weather.fog_density * FOG_EXTINCTION).exp();
            for c in 0..3 {
                out[[y, x, c]] = render.color[[y, x, c]] * shade * t + FOG_COLOR * (1.0 - t);
            }
        }
    }
    out
}

/// The two EFE output maps.
#[derive(Debug, Clone)]
pub struct EnvFeatureMaps {
    /// Nonnegative multiplicative map, H x W x 3.
    pub mul_map: Array3<f64>,
    /// Additive map in [0,1], H x W x 3.
    pub add_map: Array3<f64>,
}

/// x_ren = clamp(x_nr ⊙ mul + add, 0, 1) ⊙ silhouette.
pub fn fuse(x_nr: &Array3<f64>, ef: &EnvFeatureMaps, silhouette: &Array2<f64>) -> Result<Array3<f64>> {
    let dim = x_nr.dim();
    if ef.mul_map.dim() != dim || ef.add_map.dim() != dim || silhouette.dim() != (dim.0, dim.1) {
        return Err(Error::ShapeMismatch {
            expected: format!("{dim:?}"),
            got: format!(
                "mul {:?}, add {:?}, sil {:?}",
                ef.mul_map.dim(),
                ef.add_map.dim(),
                silhouette.dim()
            ),
        });
    }
    let (h, w, _) = dim;
    let mut out = Array3::zeros(dim);
    for y in 0..h {
        for x in 0..w {
            let s = silhouette[[y, x]];
            for c in 0..3 {
                out[[y, x, c]] = (x_nr[[y, x, c]] * ef.mul_map[[y, x, c]]
                    + ef.add_map[[y, x, c]])
                .clamp(0.0, 1.0)
                    * s;
            }
        }
    }
    Ok(out)
}

/// Gradients of `fuse` with respect to x_nr and the two maps, given upstream
/// d/dx_ren. The clamp passes gradient only on the open interval (0,1).
pub fn fuse_backward(
    x_nr: &Array3<f64>,
    ef: &EnvFeatureMaps,
    silhouette: &Array2<f64>,
    upstream: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let (h, w, _) = x_nr.dim();
    let mut d_xnr = Array3::zeros(x_nr.dim());
    let mut d_mul = Array3::zeros(x_nr.dim());
    let mut d_add = Array3::zeros(x_nr.dim());
    for y in 0..h {
        for x in 0..w {
            let s = silhouette[[y, x]];
            if s == 0.0 {
                continue;
            }
            for c in 0..3 {
                let pre = x_nr[[y, x, c]] * ef.mul_map[[y, x, c]] + ef.add_map[[y, x, c]];
                if pre <= 0.0 || pre >= 1.0 {
                    continue;
                }
                let g = upstream[[y, x, c]] * s;
                d_xnr[[y, x, c]] = g * ef.mul_map[[y, x, c]];
                d_mul[[y, x, c]] = g * x_nr[[y, x, c]];
                d_add[[y, x, c]] = g;
            }
        }
    }
    (d_xnr, d_mul, d_add)
}

/// Weighted BCE of Eq-style form: W * mean(-[tg log x̂ + (1-tg) log(1-x̂)]),
/// W = (h*w)/s with s the vehicle pixel count.
pub fn efe_loss(
    x_ren: &Array3<f64>,
    tg: &Array3<f64>,
    s: usize,
    image_size: (usize, usize),
) -> Result<f64> {
    if s == 0 {
        return Err(Error::DegenerateSample("vehicle pixel count is zero".into()));
    }
    if x_ren.dim() != tg.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", tg.dim()),
            got: format!("{:?}", x_ren.dim()),
        });
    }
    let (h, w) = image_size;
    let weight = (h * w) as f64 / s as f64;
    let n = x_ren.len() as f64;
    let mut acc = 0.0;
    for (&p, &t) in x_ren.iter().zip(tg.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(weight * acc / n)
}

/// d(efe_loss)/d(x_ren).
pub fn efe_loss_backward(
    x_ren: &Array3<f64>,
    tg: &Array3<f64>,
    s: usize,
    image_size: (usize, usize),
) -> Array3<f64> {
    let (h, w) = image_size;
    let weight = (h * w) as f64 / s as f64;
    let n = x_ren.len() as f64;
    let mut grad = Array3::zeros(x_ren.dim());
    for ((g, &p), &t) in grad.iter_mut().zip(x_ren.iter()).zip(tg.iter()) {
        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            continue; // clamped inside the log
        }
        *g = weight / n * (-t / p + (1.0 - t) / (1.0 - p));
    }
    grad
}

/// Three-level encoder-decoder with additive skip connections.
/// Output head splits into softplus (mul) and sigmoid (add) activations.
#[derive(Debug, Clone, PartialEq)]
pub struct EfeNet {
    pub e1a: Conv2d,
    pub e1b: Conv2d,
    pub d1: Conv2d,
    pub e2b: Conv2d,
    pub d2: Conv2d,
    pub e3b: Conv2d,
    pub u1: Conv2d,
    pub u2: Conv2d,
    pub head: Conv2d,
}

pub const EFE_CHANNELS: [usize; 3] = [16, 32, 64];

pub struct EfeCache {
    x: Array3<f64>,
    a1p: Array3<f64>,
    a1: Array3<f64>,
    a2p: Array3<f64>,
    a2: Array3<f64>,
    b1p: Array3<f64>,
    b1: Array3<f64>,
    b2p: Array3<f64>,
    b2: Array3<f64>,
    c1p: Array3<f64>,
    c1: Array3<f64>,
    c2p: Array3<f64>,
    uu: Array3<f64>,
    u1p: Array3<f64>,
    vv: Array3<f64>,
    u2p: Array3<f64>,
    u2o: Array3<f64>,
    pub head_out: Array3<f64>,
}

pub struct EfeGrads {
    pub e1a: Conv2dGrad,
    pub e1b: Conv2dGrad,
    pub d1: Conv2dGrad,
    pub e2b: Conv2dGrad,
    pub d2: Conv2dGrad,
    pub e3b: Conv2dGrad,
    pub u1: Conv2dGrad,
    pub u2: Conv2dGrad,
    pub head: Conv2dGrad,
}

impl EfeNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = EFE_CHANNELS;
        let r = &mut rng;
        EfeNet {
            e1a: Conv2d::new(3, 3, 3, c1, 1, 1, r),
            e1b: Conv2d::new(3, 3, c1, c1, 1, 1, r),
            d1: Conv2d::new(3, 3, c1, c2, 2, 1, r),
            e2b: Conv2d::new(3, 3, c2, c2, 1, 1, r),
            d2: Conv2d::new(3, 3, c2, c3, 2, 1, r),
            e3b: Conv2d::new(3, 3, c3, c3, 1, 1, r),
            u1: Conv2d::new(3, 3, c3, c2, 1, 1, r),
            u2: Conv2d::new(3, 3, c2, c1, 1, 1, r),
            head: Conv2d::new(3, 3, c1, 6, 1, 1, r),
        }
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> Result<EfeCache> {
        let (h, w, c) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(H, W, 3)".into(),
                got: format!("{:?}", x.dim()),
            });
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "EFE input size ({h}, {w}) must be divisible by 4"
            )));
        }
        let a1p = self.e1a.forward(x);
        let a1 = relu(&a1p);
        let a2p = self.e1b.forward(&a1);
        let a2 = relu(&a2p);
        let b1p = self.d1.forward(&a2);
        let b1 = relu(&b1p);
        let b2p = self.e2b.forward(&b1);
        let b2 = relu(&b2p);
        let c1p = self.d2.forward(&b2);
        let c1 = relu(&c1p);
        let c2p = self.e3b.forward(&c1);
        let c2 = relu(&c2p);
        let uu = upsample2(&c2);
        let u1p = self.u1.forward(&uu) + &b2;
        let u1o = relu(&u1p);
        let vv = upsample2(&u1o);
        let u2p = self.u2.forward(&vv) + &a2;
        let u2o = relu(&u2p);
        let head_out = self.head.forward(&u2o);
        Ok(EfeCache {
            x: x.clone(),
            a1p,
            a1,
            a2p,
            a2,
            b1p,
            b1,
            b2p,
            b2,
            c1p,
            c1,
            c2p,
            uu,
            u1p,
            vv,
            u2p,
            u2o,
            head_out,
        })
    }

    /// Activations applied to the 6-channel head output.
    pub fn maps_from_head(head_out: &Array3<f64>) -> EnvFeatureMaps {
        let (h, w, _) = head_out.dim();
        let mul_map = Array3::from_shape_fn((h, w, 3), |(y, x, c)| softplus(head_out[[y, x, c]]));
        let add_map =
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| sigmoid(head_out[[y, x, c + 3]]));
        EnvFeatureMaps { mul_map, add_map }
    }

    pub fn forward(&self, x_ref: &Array3<f64>) -> Result<EnvFeatureMaps> {
        Ok(Self::maps_from_head(&self.forward_cached(x_ref)?.head_out))
    }

    /// Backward from gradients on the two maps down to all conv parameters.
    pub fn backward(
        &self,
        cache: &EfeCache,
        maps: &EnvFeatureMaps,
        d_mul: &Array3<f64>,
        d_add: &Array3<f64>,
    ) -> EfeGrads {
        let (h, w, _) = cache.head_out.dim();
        let mut dh = Array3::zeros((h, w, 6));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    // d softplus = sigmoid(pre); d sigmoid = a(1-a)
                    dh[[y, x, c]] = d_mul[[y, x, c]] * sigmoid(cache.head_out[[y, x, c]]);
                    let a = maps.add_map[[y, x, c]];
                    dh[[y, x, c + 3]] = d_add[[y, x, c]] * a * (1.0 - a);
                }
            }
        }
        let (du2o, g_head) = self.head.backward(&cache.u2o, &dh);
        let du2p = relu_backward(&cache.u2p, &du2o);
        let (dvv, g_u2) = self.u2.backward(&cache.vv, &du2p);
        let du1o = upsample2_backward(&dvv);
        let du1p = relu_backward(&cache.u1p, &du1o);
        let (duu, g_u1) = self.u1.backward(&cache.uu, &du1p);
        let dc2 = upsample2_backward(&duu);
        let dc2p = relu_backward(&cache.c2p, &dc2);
        let (dc1, g_e3b) = self.e3b.backward(&cache.c1, &dc2p);
        let dc1p = relu_backward(&cache.c1p, &dc1);
        let (db2, g_d2) = self.d2.backward(&cache.b2, &dc1p);
        let db2 = db2 + &du1p; // skip connection
        let db2p = relu_backward(&cache.b2p, &db2);
        let (db1, g_e2b) = self.e2b.backward(&cache.b1, &db2p);
        let db1p = relu_backward(&cache.b1p, &db1);
        let (da2, g_d1) = self.d1.backward(&cache.a2, &db1p);
        let da2 = da2 + &du2p; // skip connection
        let da2p = relu_backward(&cache.a2p, &da2);
        let (da1, g_e1b) = self.e1b.backward(&cache.a1, &da2p);
        let da1p = relu_backward(&cache.a1p, &da1);
        let (_, g_e1a) = self.e1a.backward(&cache.x, &da1p);
        EfeGrads {
            e1a: g_e1a,
            e1b: g_e1b,
            d1: g_d1,
            e2b: g_e2b,
            d2: g_d2,
            e3b: g_e3b,
            u1: g_u1,
            u2: g_u2,
            head: g_head,
        }
    }

    fn convs(&self) -> [&Conv2d; 9] {
        [
            &self.e1a, &self.e1b, &self.d1, &self.e2b, &self.d2, &self.e3b, &self.u1, &self.u2,
            &self.head,
        ]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d; 9] {
        [
            &mut self.e1a,
            &mut self.e1b,
            &mut self.d1,
            &mut self.e2b,
            &mut self.d2,
            &mut self.e3b,
            &mut self.u1,
            &mut self.u2,
            &mut self.head,
        ]
    }

    pub fn adam_step(&mut self, grads: &EfeGrads, adam: &mut Adam) {
        let gs = [
            &grads.e1a, &grads.e1b, &grads.d1, &grads.e2b, &grads.d2, &grads.e3b, &grads.u1,
            &grads.u2, &grads.head,
        ];
        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(18);
        for (conv, g) in self.convs_mut().into_iter().zip(gs) {
            pairs.push((conv.w.as_slice_mut().unwrap(), g.w.as_slice().unwrap()));
            pairs.push((conv.b.as_slice_mut().unwrap(), g.b.as_slice().unwrap()));
        }
        adam.step(&mut pairs);
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut header = serde_json::json!({
            "arch": "efe-encdec3",
            "channels": EFE_CHANNELS,
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
        if ck.header["arch"] != "efe-encdec3" {
            return Err(Error::Format(format!(
                "checkpoint at {} is not an EFE checkpoint",
                path.display()
            )));
        }
        let mut net = EfeNet::new(0);
        let mut cursor = 0;
        for conv in net.convs_mut() {
            nn::conv_from_tensors(conv, &ck.tensors, &mut cursor)?;
        }
        Ok(net)
    }
}

/// In-memory EFE training sample.
#[derive(Debug, Clone)]
pub struct EfeSample {
    /// Masked reference image of the unpainted vehicle (network input).
    pub x_ref: Array3<f64>,
    /// Rasterized preset-color vehicle at the same pose.
    pub x_nr: Array3<f64>,
    /// Vehicle silhouette.
    pub silhouette: Array2<f64>,
    /// Oracle-rendered colored vehicle, cut out at the vehicle region.
    pub tg: Array3<f64>,
    /// Vehicle pixel count (s > 0).
    pub s: usize,
    /// Camera distance, used for per-distance-bucket reporting.
    pub distance: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainEfeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub use_weight: bool,
    pub seed: u64,
}

impl Default for TrainEfeConfig {
    fn default() -> Self {
        TrainEfeConfig {
            learning_rate: 0.005,
            epochs: 12,
            use_weight: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainEfeReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_test_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_test_loss: f64,
}

fn sample_loss_weight(sample: &EfeSample, use_weight: bool) -> usize {
    let (h, w, _) = sample.x_ref.dim();
    if use_weight {
        sample.s
    } else {
        h * w // W = 1
    }
}

fn forward_sample(net: &EfeNet, sample: &EfeSample) -> Result<(EfeCache, EnvFeatureMaps, Array3<f64>)> {
    let cache = net.forward_cached(&sample.x_ref)?;
    let maps = EfeNet::maps_from_head(&cache.head_out);
    let x_ren = fuse(&sample.x_nr, &maps, &sample.silhouette)?;
    Ok((cache, maps, x_ren))
}

/// Mean test-set loss under the configured weighting.
pub fn test_loss(net: &EfeNet, samples: &[EfeSample], use_weight: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty EFE test set".into()));
    }
    let mut acc = 0.0;
    for sample in samples {
        let (h, w, _) = sample.x_ref.dim();
        let (_, _, x_ren) = forward_sample(net, sample)?;
        acc += efe_loss(&x_ren, &sample.tg, sample_loss_weight(sample, use_weight), (h, w))?;
    }
    Ok(acc / samples.len() as f64)
}

/// Mean absolute error inside the vehicle region, optionally restricted to
/// samples in one camera-distance bucket.
pub fn vehicle_mae(net: &EfeNet, samples: &[EfeSample], distance: Option<f64>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for sample in samples {
        if let Some(d) = distance {
            if (sample.distance - d).abs() > 1e-9 {
                continue;
            }
        }
        let (_, _, x_ren) = forward_sample(net, sample)?;
        let (h, w, _) = x_ren.dim();
        for y in 0..h {
            for x in 0..w {
                if sample.silhouette[[y, x]] == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    num += (x_ren[[y, x, c]] - sample.tg[[y, x, c]]).abs();
                    den += 1.0;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateSample(
            "no vehicle pixels in MAE evaluation".into(),
        ));
    }
    Ok(num / den)
}

/// Trains the EFE against oracle targets; returns the checkpoint with the
/// lowest test-set loss across epochs.
pub fn train_efe(
    train: &[EfeSample],
    test: &[EfeSample],
    config: &TrainEfeConfig,
) -> Result<(EfeNet, TrainEfeReport)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty EFE training set".into()));
    }
    let mut net = EfeNet::new(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_efe);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(EfeNet, usize, f64)> = None;
    let mut report = TrainEfeReport {
        epoch_train_loss: Vec::new(),
        epoch_test_loss: Vec::new(),
        best_epoch: 0,
        best_test_loss: f64::INFINITY,
    };
    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let sample = &train[i];
            let (h, w, _) = sample.x_ref.dim();
            let s_eff = sample_loss_weight(sample, config.use_weight);
            let (cache, maps, x_ren) = forward_sample(&net, sample)?;
            let loss = efe_loss(&x_ren, &sample.tg, s_eff, (h, w))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "EFE training loss not finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            let d_xren = efe_loss_backward(&x_ren, &sample.tg, s_eff, (h, w));
            let (_, d_mul, d_add) =
                fuse_backward(&sample.x_nr, &maps, &sample.silhouette, &d_xren);
            let grads = net.backward(&cache, &maps, &d_mul, &d_add);
            net.adam_step(&grads, &mut adam);
        }
        report.epoch_train_loss.push(epoch_loss / train.len() as f64);
        let tl = if test.is_empty() {
            epoch_loss / train.len() as f64
        } else {
            test_loss(&net, test, config.use_weight)?
        };
        report.epoch_test_loss.push(tl);
        if best.as_ref().map_or(true, |(_, _, b)| tl < *b) {
            best = Some((net.clone(), epoch, tl));
        }
    }
    let (best_net, best_epoch, best_loss) = best.unwrap();
    report.best_epoch = best_epoch;
    report.best_test_loss = best_loss;
    Ok((best_net, report))
}

/// Fisher-Yates with our own uniform draw so the permutation only depends on
/// the stream, not on rand's distribution internals.
pub fn shuffle(order: &mut [usize], rng: &mut impl RngCore) {
    for i in (1..order.len()).rev() {
        let j = (uniform01(rng) * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_render::{rasterize, CameraPose, Mesh, TextureMap};
    use ndarray::arr2;

    fn quad_render() -> RenderOutput {
        // unit quad facing +x, rendered head-on
        let mesh = Mesh {
            vertices: vec![
                [0.0, -1.0, -1.0],
                [0.0, 1.0, -1.0],
                [0.0, 1.0, 1.0],
                [0.0, -1.0, 1.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            face_uvs: vec![
                [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            ],
        };
        let tex = TextureMap::solid(4, 4, [0.8, 0.5, 0.2]);
        let pose = CameraPose::new(0.0, 0.0, 5.0);
        rasterize(&mesh, &tex, &pose, (16, 16)).unwrap()
    }

    #[test]
    fn oracle_identity_configuration() {
        // overhead geometry facing the sun, no fog
        let mut render = quad_render();
        // force normals parallel to an altitude-90 sun
        for y in 0..16 {
            for x in 0..16 {
                if render.silhouette[[y, x]] == 1.0 {
                    render.normals[[y, x, 0]] = 0.0;
                    render.normals[[y, x, 1]] = 0.0;
                    render.normals[[y, x, 2]] = 1.0;
                }
            }
        }
        let weather = WeatherParams::new(90.0, 0.0).unwrap();
        let out = env_oracle(&render, &weather, DEFAULT_SUN_AZIMUTH_DEG);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    assert!((out[[y, x, c]] - render.color[[y, x, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_dense_fog_limit() {
        // far view so the transmittance is essentially zero: depth 20 m at
        // density 100 gives t = exp(-8)
        let mesh = Mesh {
            vertices: vec![
                [0.0, -1.0, -1.0],
                [0.0, 1.0, -1.0],
                [0.0, 1.0, 1.0],
                [0.0, -1.0, 1.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            face_uvs: vec![
                [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            ],
        };
        let tex = TextureMap::solid(4, 4, [0.8, 0.5, 0.2]);
        let pose = CameraPose::new(0.0, 0.0, 20.0);
        let render = rasterize(&mesh, &tex, &pose, (16, 16)).unwrap();
        assert!(render.silhouette.iter().any(|&v| v == 1.0));
        let weather = WeatherParams::new(30.0, 100.0).unwrap();
        let out = env_oracle(&render, &weather, DEFAULT_SUN_AZIMUTH_DEG);
        for y in 0..16 {
            for x in 0..16 {
                if render.silhouette[[y, x]] == 1.0 {
                    for c in 0..3 {
                        assert!((out[[y, x, c]] - FOG_COLOR).abs() < 0.05);
                    }
                } else {
                    assert_eq!(out[[y, x, 0]], 0.0);
                }
            }
        }
    }

    #[test]
    fn oracle_blend_factor_matches_formula() {
        // depth 10 m, density 25 -> t = exp(-1)
        let t = (-10.0 * 25.0 * FOG_EXTINCTION).exp();
        assert!((t - (-1.0f64).exp()).abs() < 1e-12);
        assert!((t - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn fuse_examples() {
        let sil = arr2(&[[1.0]]);
        let x_nr = Array3::from_elem((1, 1, 3), 0.5);
        let ef = EnvFeatureMaps {
            mul_map: Array3::from_elem((1, 1, 3), 0.4),
            add_map: Array3::from_elem((1, 1, 3), 0.1),
        };
        let out = fuse(&x_nr, &ef, &sil).unwrap();
        assert!((out[[0, 0, 0]] - 0.3).abs() < 1e-12);

        // identity fusion
        let ef_id = EnvFeatureMaps {
            mul_map: Array3::ones((1, 1, 3)),
            add_map: Array3::zeros((1, 1, 3)),
        };
        let out = fuse(&x_nr, &ef_id, &sil).unwrap();
        assert_eq!(out, x_nr);

        // clamp rule
        let ef_hot = EnvFeatureMaps {
            mul_map: Array3::from_elem((1, 1, 3), 1.5),
            add_map: Array3::from_elem((1, 1, 3), 0.2),
        };
        let ones = Array3::ones((1, 1, 3));
        let out = fuse(&ones, &ef_hot, &sil).unwrap();
        assert_eq!(out[[0, 0, 0]], 1.0);
    }

    #[test]
    fn efe_loss_examples() {
        // W = (10*10)/25 = 4
        let x = Array3::from_elem((10, 10, 3), 1.0 - BCE_EPS);
        let tg = x.clone();
        let loss = efe_loss(&x, &tg, 25, (10, 10)).unwrap();
        assert!(loss.abs() < 1e-4);
        // single pixel, tg=1, x=0.5 -> -log(0.5)
        let x = Array3::from_elem((1, 1, 3), 0.5);
        let tg = Array3::ones((1, 1, 3));
        let loss = efe_loss(&x, &tg, 1, (1, 1)).unwrap();
        assert!((loss - (-0.5f64.ln())).abs() < 1e-9);
        assert!((loss - 0.6931).abs() < 1e-4);
        // s = 0 is degenerate
        assert!(matches!(
            efe_loss(&x, &tg, 0, (1, 1)),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn efe_loss_weight_cancels_zero_background_padding() {
        // doubling background area doubles W and halves the per-pixel mean
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut small = Array3::zeros((2, 2, 3));
        for v in small.iter_mut() {
            *v = uniform01(&mut rng) * 0.8 + 0.1;
        }
        let tg_small = small.clone();
        let s = 4;
        let l_small = efe_loss(&small, &tg_small, s, (2, 2)).unwrap();
        // embed into a 2x4 image padded with zero background
        let mut big = Array3::zeros((2, 4, 3));
        let mut tg_big = Array3::zeros((2, 4, 3));
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    big[[y, x, c]] = small[[y, x, c]];
                    tg_big[[y, x, c]] = tg_small[[y, x, c]];
                }
            }
        }
        let l_big = efe_loss(&big, &tg_big, s, (2, 4)).unwrap();
        // doubled W times halved mean leaves the product unchanged, up to the
        // epsilon-clamped background term: l_big = l_small + (-ln(1 - eps))
        let bg_term = -(1.0f64 - BCE_EPS).ln();
        assert!((l_big - (l_small + bg_term)).abs() < 1e-9);
        // and the product W * mean is unchanged up to the epsilon background term
        assert!((l_big - l_small).abs() < 1e-4);
    }

    #[test]
    fn efe_forward_is_total_and_deterministic() {
        let net = EfeNet::new(42);
        let x = Array3::zeros((16, 16, 3));
        let m1 = net.forward(&x).unwrap();
        let m2 = net.forward(&x).unwrap();
        assert!(m1.mul_map.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(m1.add_map.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m1.mul_map, m2.mul_map);
        assert_eq!(m1.add_map, m2.add_map);
        // resolution mismatch
        let bad = Array3::zeros((10, 10, 3));
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn efe_net_gradients_match_finite_differences() {
        // full net on a tiny input; checks the whole backward chain
        let net = EfeNet::new(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_ref = Array3::from_shape_fn((8, 8, 3), |_| uniform01(&mut rng) * 0.5);
        let x_nr = Array3::from_shape_fn((8, 8, 3), |_| uniform01(&mut rng) * 0.5 + 0.2);
        let sil = Array2::ones((8, 8));
        let tg = Array3::from_shape_fn((8, 8, 3), |_| uniform01(&mut rng) * 0.6 + 0.2);
        let s = 64;
        let loss_of = |n: &EfeNet| {
            let maps = n.forward(&x_ref).unwrap();
            let x_ren = fuse(&x_nr, &maps, &sil).unwrap();
            efe_loss(&x_ren, &tg, s, (8, 8)).unwrap()
        };
        let cache = net.forward_cached(&x_ref).unwrap();
        let maps = EfeNet::maps_from_head(&cache.head_out);
        let x_ren = fuse(&x_nr, &maps, &sil).unwrap();
        let d_xren = efe_loss_backward(&x_ren, &tg, s, (8, 8));
        let (_, d_mul, d_add) = fuse_backward(&x_nr, &maps, &sil, &d_xren);
        let grads = net.backward(&cache, &maps, &d_mul, &d_add);
        let h = 1e-6;
        let checks: [(usize, (usize, usize, usize, usize)); 3] =
            [(0, (0, 0, 0, 0)), (4, (1, 1, 3, 7)), (8, (2, 2, 5, 1))];
        for (conv_idx, widx) in checks {
            let analytic = match conv_idx {
                0 => grads.e1a.w[widx],
                4 => grads.d2.w[widx],
                8 => grads.head.w[widx],
                _ => unreachable!(),
            };
            let mut np = net.clone();
            let mut nm = net.clone();
            {
                let cs = np.convs_mut();
                cs[conv_idx].w[widx] += h;
            }
            {
                let cs = nm.convs_mut();
                cs[conv_idx].w[widx] -= h;
            }
            let fd = (loss_of(&np) - loss_of(&nm)) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-3,
                "conv {conv_idx} weight {widx:?}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn efe_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("efe.ckpt");
        let net = EfeNet::new(9);
        net.save(&p, serde_json::json!({"seed": 9})).unwrap();
        let back = EfeNet::load(&p).unwrap();
        assert_eq!(net, back);
    }
}
