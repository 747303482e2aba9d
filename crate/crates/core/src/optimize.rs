//! Adversarial texture optimization.
//!
//! Both networks are frozen here; the only trainable parameter is the UV
//! texture. Everything that does not depend on the texture is precomputed
//! once per scene: the rasterization sample map, the background plate, and
//! the EFE feature maps (the EFE input is the fixed reference image). Each
//! step then only shades, fuses, composites, runs the detector forward and
//! backward, and scatters the image gradient back into texel space.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{GeometryCache, SceneSample};
use crate::detect::{attack_raw_gradient, decode, ToyDetector};
use crate::environment::{fuse, fuse_backward, EfeNet, EnvFeatureMaps};
use crate::error::{Error, Result};
use crate::losses::{
    attack_loss_variant, smooth_loss, smooth_loss_grad, total_loss, AttackLossVariant, BBox,
    DEFAULT_ALPHA, DEFAULT_BETA,
};
use crate::mesh_render::{uniform01, Mesh, SampleMap, TextureMap};
use crate::nn::Adam;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub texture_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Half-width of the uniform texel noise applied per scene during
    /// optimization. Expectation-over-transformation trick: the attack must
    /// survive small texture perturbations, which stops it from overfitting
    /// the EFE rendering path and improves transfer to the real scene model.
    pub jitter: f64,
    /// Half-width of the per-scene multiplicative noise on the EFE feature
    /// maps. The oracle environment acts multiplicatively (shading and fog
    /// scale the vehicle color), so EFE estimation error is mostly a gain
    /// error; training the attack under random map gains makes it robust to
    /// that error class.
    pub map_jitter: f64,
    pub variant: AttackLossVariant,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            texture_size: 32,
            learning_rate: 0.03,
            epochs: 300,
            batch_size: 8,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            jitter: 0.05,
            map_jitter: 0.35,
            variant: AttackLossVariant::AllBoxes,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub step: usize,
    pub attack_loss: f64,
    pub smooth_loss: f64,
    pub total_loss: f64,
    /// Mean max H_d over the batch, the quantity the attack drives to zero.
    pub mean_max_hd: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OptimizeTrace {
    pub steps: Vec<StepTrace>,
    pub epoch_total_loss: Vec<f64>,
}

impl OptimizeTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Texture-independent per-scene state.
pub struct OptimizeSample {
    pub id: String,
    pub map: SampleMap,
    pub silhouette: Array2<f64>,
    pub ef: EnvFeatureMaps,
    pub b: Array3<f64>,
    pub gt: BBox,
}

/// Precomputes the cached state for every texgen scene. The EFE runs once
/// per scene and never again during optimization.
pub fn prepare_samples(
    mesh: &Mesh,
    efe: &EfeNet,
    scenes: &[SceneSample],
    image_size: usize,
) -> Result<Vec<OptimizeSample>> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no texture generation scenes".into()));
    }
    let mut geo = GeometryCache::new(mesh, (image_size, image_size));
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let map = geo.get(&scene.pose)?.clone();
        let silhouette = map.silhouette();
        let ef = efe.forward(&scene.x_ref)?;
        out.push(OptimizeSample {
            id: scene.id.clone(),
            map,
            silhouette,
            ef,
            b: scene.b.clone(),
            gt: scene.y,
        });
    }
    Ok(out)
}

/// Adversarial scene image plus everything needed for the backward pass.
struct SceneForward {
    x_nr: Array3<f64>,
    x_ren: Array3<f64>,
    i_adv: Array3<f64>,
}

fn forward_scene(sample: &OptimizeSample, texture: &TextureMap) -> Result<SceneForward> {
    let x_nr = sample.map.shade(texture);
    let x_ren = fuse(&x_nr, &sample.ef, &sample.silhouette)?;
    let i_adv = &x_ren + &sample.b;
    Ok(SceneForward { x_nr, x_ren, i_adv })
}

/// Renders the current texture into one scene through the frozen EFE path.
/// Exposed for evaluation and the Python bindings.
pub fn render_adversarial_scene(
    sample: &OptimizeSample,
    texture: &TextureMap,
) -> Result<Array3<f64>> {
    Ok(forward_scene(sample, texture)?.i_adv)
}

/// Losses and the exact texture gradient for one scene under the current
/// texture. This is the unit the optimizer accumulates over a batch; it is
/// public so the full-pipeline gradient can be checked against finite
/// differences.
pub struct SceneLoss {
    pub attack_loss: f64,
    pub smooth_loss: f64,
    pub total_loss: f64,
    pub max_hd: f64,
    pub texture_grad: Array3<f64>,
}

pub fn scene_loss_and_grad(
    sample: &OptimizeSample,
    detector: &ToyDetector,
    texture: &TextureMap,
    config: &OptimizeConfig,
) -> Result<SceneLoss> {
    let fwd = forward_scene(sample, texture)?;
    let (h, w, _) = fwd.i_adv.dim();
    let cache = detector.forward_cached(&fwd.i_adv)?;
    let dets = decode(&cache.raw, (h, w));
    let alg = attack_loss_variant(&dets, &sample.gt, config.variant);
    let l_sm = smooth_loss(&fwd.x_ren);
    let l = total_loss(alg.loss, l_sm, config.alpha, config.beta)?;
    // detector backward gives d loss / d image; composition with the
    // background is additive so the image gradient passes to x_ren unchanged
    let d_raw = attack_raw_gradient(&cache.raw, (h, w), &alg);
    let (d_image, _) = detector.backward(&cache, &d_raw);
    let mut d_xren = d_image * config.alpha;
    if config.beta != 0.0 {
        d_xren = d_xren + smooth_loss_grad(&fwd.x_ren).mapv(|v| v * config.beta);
    }
    let (d_xnr, _, _) = fuse_backward(&fwd.x_nr, &sample.ef, &sample.silhouette, &d_xren);
    let (th, tw, _) = texture.texels.dim();
    let texture_grad = sample.map.scatter_texture_grad((th, tw), &d_xnr)?;
    Ok(SceneLoss {
        attack_loss: alg.loss,
        smooth_loss: l_sm,
        total_loss: l,
        max_hd: alg.max_hd,
        texture_grad,
    })
}

/// Optimizes a texture against the frozen detector over the cached scenes.
/// Returns the final texture and the per-step loss trace.
pub fn generate_camouflage(
    samples: &[OptimizeSample],
    detector: &ToyDetector,
    config: &OptimizeConfig,
) -> Result<(TextureMap, OptimizeTrace)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no texture generation scenes".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 || config.texture_size == 0 {
        return Err(Error::InvalidInput(
            "batch size, epochs, and texture size must be positive".into(),
        ));
    }
    if config.alpha < 0.0 || config.beta < 0.0 {
        return Err(Error::InvalidInput("loss weights must be nonnegative".into()));
    }
    let ts = config.texture_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xca30);
    let mut texture = TextureMap::random(ts, ts, &mut rng);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = OptimizeTrace {
        steps: Vec::new(),
        epoch_total_loss: Vec::new(),
    };
    for epoch in 0..config.epochs {
        crate::environment::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = Array3::<f64>::zeros((ts, ts, 3));
            let mut batch_atk = 0.0;
            let mut batch_sm = 0.0;
            let mut batch_hd = 0.0;
            for &i in batch {
                let sample = &samples[i];
                // per-scene jitter; the gradient is applied to the clean
                // texture and maps (straight-through through the noise)
                let tex_in = if config.jitter > 0.0 {
                    let mut jittered = texture.clone();
                    for v in jittered.texels.iter_mut() {
                        *v += config.jitter * (2.0 * uniform01(&mut rng) - 1.0);
                    }
                    jittered
                } else {
                    texture.clone()
                };
                let sl = if config.map_jitter > 0.0 {
                    let gain_mul =
                        1.0 + config.map_jitter * (2.0 * uniform01(&mut rng) - 1.0);
                    let gain_add =
                        1.0 + config.map_jitter * (2.0 * uniform01(&mut rng) - 1.0);
                    let jittered = OptimizeSample {
                        id: sample.id.clone(),
                        map: sample.map.clone(),
                        silhouette: sample.silhouette.clone(),
                        ef: EnvFeatureMaps {
                            mul_map: sample.ef.mul_map.mapv(|v| v * gain_mul),
                            add_map: sample.ef.add_map.mapv(|v| v * gain_add),
                        },
                        b: sample.b.clone(),
                        gt: sample.gt,
                    };
                    scene_loss_and_grad(&jittered, detector, &tex_in, config)?
                } else {
                    scene_loss_and_grad(sample, detector, &tex_in, config)?
                };
                if !sl.total_loss.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "texture loss not finite at epoch {epoch}, scene {}",
                        sample.id
                    )));
                }
                batch_atk += sl.attack_loss;
                batch_sm += sl.smooth_loss;
                batch_hd += sl.max_hd;
                grad = grad + &sl.texture_grad;
            }
            let n = batch.len() as f64;
            grad.mapv_inplace(|v| v / n);
            {
                let mut pairs: Vec<(&mut [f64], &[f64])> = vec![(
                    texture.texels.as_slice_mut().unwrap(),
                    grad.as_slice().unwrap(),
                )];
                adam.step(&mut pairs);
            }
            texture.clamp_in_place();
            let batch_total = (config.alpha * batch_atk + config.beta * batch_sm) / n;
            epoch_loss += batch_total;
            epoch_batches += 1.0;
            trace.steps.push(StepTrace {
                epoch,
                step,
                attack_loss: batch_atk / n,
                smooth_loss: batch_sm / n,
                total_loss: batch_total,
                mean_max_hd: batch_hd / n,
            });
        }
        trace.epoch_total_loss.push(epoch_loss / epoch_batches);
    }
    Ok((texture, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, load_split, DatasetConfig, PoseGrid, SplitTag};
    use crate::mesh_render::Mesh;

    fn tiny_setup() -> (Mesh, Vec<SceneSample>) {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh::builtin_car();
        let config = DatasetConfig {
            image_size: 32,
            sun_altitudes_deg: vec![30.0],
            fog_densities: vec![0.0, 50.0],
            texgen_grid: PoseGrid {
                azimuths_deg: vec![0.0, 90.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0],
            },
            max_texgen: 4,
            ..DatasetConfig::default()
        };
        generate_dataset(&mesh, &config, 7, "h", dir.path()).unwrap();
        let scenes = load_split(dir.path(), SplitTag::Texgen).unwrap();
        assert!(!scenes.is_empty());
        (mesh, scenes)
    }

    #[test]
    fn optimization_is_deterministic_and_leaves_networks_untouched() {
        let (mesh, scenes) = tiny_setup();
        let efe = EfeNet::new(1);
        let det = ToyDetector::new(2);
        let efe_before = efe.clone();
        let det_before = det.clone();
        let samples = prepare_samples(&mesh, &efe, &scenes, 32).unwrap();
        let config = OptimizeConfig {
            texture_size: 8,
            epochs: 1,
            batch_size: 2,
            ..OptimizeConfig::default()
        };
        let (t1, tr1) = generate_camouflage(&samples, &det, &config).unwrap();
        let (t2, tr2) = generate_camouflage(&samples, &det, &config).unwrap();
        assert_eq!(t1.texels, t2.texels);
        assert_eq!(
            serde_json::to_string(&tr1.steps).unwrap(),
            serde_json::to_string(&tr2.steps).unwrap()
        );
        assert_eq!(efe, efe_before);
        assert_eq!(det, det_before);
        assert!(t1.texels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pure_smoothing_objective_descends() {
        // alpha = 0 isolates the smoothness term; its value must drop
        let (mesh, scenes) = tiny_setup();
        let efe = EfeNet::new(1);
        let det = ToyDetector::new(2);
        let samples = prepare_samples(&mesh, &efe, &scenes, 32).unwrap();
        let config = OptimizeConfig {
            texture_size: 8,
            epochs: 6,
            batch_size: scenes.len(),
            alpha: 0.0,
            beta: 1.0,
            jitter: 0.0,
            map_jitter: 0.0,
            ..OptimizeConfig::default()
        };
        let (_, trace) = generate_camouflage(&samples, &det, &config).unwrap();
        let first = trace.epoch_total_loss.first().unwrap();
        let last = trace.epoch_total_loss.last().unwrap();
        assert!(
            last < first,
            "smooth loss did not descend: {first} -> {last}"
        );
    }

    #[test]
    fn negative_weights_rejected() {
        let (mesh, scenes) = tiny_setup();
        let efe = EfeNet::new(1);
        let det = ToyDetector::new(2);
        let samples = prepare_samples(&mesh, &efe, &scenes, 32).unwrap();
        let config = OptimizeConfig {
            alpha: -1.0,
            ..OptimizeConfig::default()
        };
        assert!(generate_camouflage(&samples, &det, &config).is_err());
    }
}
