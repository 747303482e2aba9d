//! Multi-weather scene dataset: generation, manifests, loading, and the
//! foreground/background split.
//!
//! Every sample is a vehicle rendered at a grid point (pose x weather x
//! color), run through the environment oracle, and composited onto a
//! procedural background plate. The mask convention follows the vehicle
//! pixels = 0, background = 1 rule, and the ground-truth box is the tight
//! box of the mask's zero region.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::DetSample;
use crate::environment::{env_oracle, EfeSample, WeatherParams, DEFAULT_SUN_AZIMUTH_DEG};
use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::mesh_render::{
    rasterize_geometry, uniform01, CameraPose, Mesh, RenderOutput, SampleMap, TextureMap,
    DEFAULT_FOV_DEG,
};
use crate::pngio;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which pipeline stage a sample belongs to.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    EfeTrain,
    EfeTest,
    DetTrain,
    DetTest,
    Texgen,
    EvalSeen,
    EvalUnseen,
}

impl SplitTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "efe-train" => Ok(SplitTag::EfeTrain),
            "efe-test" => Ok(SplitTag::EfeTest),
            "det-train" => Ok(SplitTag::DetTrain),
            "det-test" => Ok(SplitTag::DetTest),
            "texgen" => Ok(SplitTag::Texgen),
            "eval-seen" => Ok(SplitTag::EvalSeen),
            "eval-unseen" => Ok(SplitTag::EvalUnseen),
            other => Err(Error::InvalidInput(format!("unknown split '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitTag::EfeTrain => "efe-train",
            SplitTag::EfeTest => "efe-test",
            SplitTag::DetTrain => "det-train",
            SplitTag::DetTest => "det-test",
            SplitTag::Texgen => "texgen",
            SplitTag::EvalSeen => "eval-seen",
            SplitTag::EvalUnseen => "eval-unseen",
        }
    }

    pub const ALL: [SplitTag; 7] = [
        SplitTag::EfeTrain,
        SplitTag::EfeTest,
        SplitTag::DetTrain,
        SplitTag::DetTest,
        SplitTag::Texgen,
        SplitTag::EvalSeen,
        SplitTag::EvalUnseen,
    ];
}

/// Vehicle colors used for EFE targets and benign detector scenes.
pub const TRAIN_COLORS: [(&str, [f64; 3]); 9] = [
    ("red", [0.80, 0.10, 0.10]),
    ("blue", [0.15, 0.25, 0.75]),
    ("green", [0.10, 0.55, 0.20]),
    ("yellow", [0.85, 0.80, 0.15]),
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.50, 0.50, 0.50]),
    ("orange", [0.90, 0.50, 0.10]),
    ("purple", [0.50, 0.15, 0.60]),
    ("cyan", [0.15, 0.70, 0.75]),
];

/// Held-out palette for EFE testing; hue wheel at two brightness levels.
pub fn test_color(i: usize) -> (String, [f64; 3]) {
    let hue = (i % 8) as f64 / 8.0;
    let value = if i < 8 { 0.8 } else { 0.45 };
    let rgb = hsv_to_rgb(hue, 0.7, value);
    (format!("test{i:02}"), rgb)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + v - c, g + v - c, b + v - c]
}

pub fn color_rgb(name: &str) -> Result<[f64; 3]> {
    if name == "white" {
        return Ok([1.0, 1.0, 1.0]);
    }
    if let Some((_, rgb)) = TRAIN_COLORS.iter().find(|(n, _)| *n == name) {
        return Ok(*rgb);
    }
    if let Some(idx) = name.strip_prefix("test") {
        if let Ok(i) = idx.parse::<usize>() {
            if i < 16 {
                return Ok(test_color(i).1);
            }
        }
    }
    Err(Error::InvalidInput(format!("unknown color '{name}'")))
}

/// Pose grid for one split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseGrid {
    pub azimuths_deg: Vec<f64>,
    pub elevations_deg: Vec<f64>,
    pub distances_m: Vec<f64>,
}

impl PoseGrid {
    pub fn poses(&self, look_at: [f64; 3]) -> Vec<CameraPose> {
        let mut out = Vec::new();
        for &az in &self.azimuths_deg {
            for &el in &self.elevations_deg {
                for &d in &self.distances_m {
                    out.push(CameraPose::new(az, el, d).with_look_at(look_at));
                }
            }
        }
        out
    }
}

fn azimuths_every_45() -> Vec<f64> {
    (0..8).map(|i| i as f64 * 45.0).collect()
}

/// Full dataset grid description; defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Seen weather grid: every (sun altitude, fog density) pair.
    pub sun_altitudes_deg: Vec<f64>,
    pub fog_densities: Vec<f64>,
    /// Unseen weather grid for transfer evaluation.
    pub unseen_sun_altitudes_deg: Vec<f64>,
    pub unseen_fog_densities: Vec<f64>,
    pub sun_azimuth_deg: f64,
    pub efe_train_grid: PoseGrid,
    pub efe_test_grid: PoseGrid,
    pub det_train_grid: PoseGrid,
    pub det_test_grid: PoseGrid,
    pub texgen_grid: PoseGrid,
    pub eval_grid: PoseGrid,
    /// How many of the 9 training colors EFE training cycles through.
    pub efe_train_colors: usize,
    /// How many held-out test colors EFE testing cycles through.
    pub efe_test_colors: usize,
    /// Benign vehicle color for eval scenes.
    pub benign_color: String,
    /// Per-split caps; the full grid is enumerated, then deterministically
    /// subsampled down to the cap.
    pub max_efe_train: usize,
    pub max_efe_test: usize,
    pub max_det_train: usize,
    pub max_det_test: usize,
    pub max_texgen: usize,
    pub max_eval_seen: usize,
    pub max_eval_unseen: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            sun_altitudes_deg: vec![-90.0, -30.0, 30.0, 90.0],
            fog_densities: vec![0.0, 25.0, 50.0, 90.0],
            unseen_sun_altitudes_deg: vec![-60.0, 0.0, 60.0],
            unseen_fog_densities: vec![10.0, 40.0, 70.0],
            sun_azimuth_deg: DEFAULT_SUN_AZIMUTH_DEG,
            efe_train_grid: PoseGrid {
                azimuths_deg: vec![0.0, 90.0, 180.0, 270.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            efe_test_grid: PoseGrid {
                azimuths_deg: vec![45.0, 225.0],
                elevations_deg: vec![22.5],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            det_train_grid: PoseGrid {
                azimuths_deg: azimuths_every_45(),
                elevations_deg: vec![22.5, 45.0],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            det_test_grid: PoseGrid {
                azimuths_deg: azimuths_every_45().iter().map(|a| a + 22.5).collect(),
                elevations_deg: vec![30.0],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            texgen_grid: PoseGrid {
                azimuths_deg: azimuths_every_45(),
                elevations_deg: vec![0.0, 22.5, 45.0, 67.5],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            eval_grid: PoseGrid {
                azimuths_deg: azimuths_every_45(),
                elevations_deg: vec![22.5],
                distances_m: vec![6.0, 9.0, 12.0, 15.0],
            },
            efe_train_colors: 4,
            efe_test_colors: 2,
            benign_color: "red".to_string(),
            max_efe_train: 288,
            max_efe_test: 128,
            max_det_train: 960,
            max_det_test: 256,
            max_texgen: 256,
            max_eval_seen: 128,
            max_eval_unseen: 128,
        }
    }
}

impl DatasetConfig {
    pub fn seen_weather(&self) -> Vec<WeatherParams> {
        self.sun_altitudes_deg
            .iter()
            .flat_map(|&s| {
                self.fog_densities
                    .iter()
                    .map(move |&f| WeatherParams::new(s, f).unwrap())
            })
            .collect()
    }

    pub fn unseen_weather(&self) -> Vec<WeatherParams> {
        self.unseen_sun_altitudes_deg
            .iter()
            .flat_map(|&s| {
                self.unseen_fog_densities
                    .iter()
                    .map(move |&f| WeatherParams::new(s, f).unwrap())
            })
            .collect()
    }
}

/// One manifest row.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    /// Oracle-rendered colored vehicle cutout, EFE splits only.
    pub tg: Option<String>,
    pub pose: CameraPose,
    pub weather: WeatherParams,
    pub gt: BBox,
    /// Vehicle color of the rendered car in `image` (and `tg` if present);
    /// "white" for reference scenes.
    pub color: String,
    pub split: SplitTag,
    /// Vehicle pixel count (zeros of the mask).
    pub s: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub image_size: usize,
    pub sun_azimuth_deg: f64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest schema version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// A fully loaded dataset record.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: String,
    /// Composited scene image.
    pub i_in: Array3<f64>,
    /// Binary mask, vehicle = 0, background = 1.
    pub m: Array2<f64>,
    /// Foreground: i_in ⊙ (1 - m).
    pub x_ref: Array3<f64>,
    /// Background: i_in ⊙ m.
    pub b: Array3<f64>,
    pub y: BBox,
    pub pose: CameraPose,
    pub weather: WeatherParams,
    pub color: String,
    pub split: SplitTag,
    pub tg: Option<Array3<f64>>,
    pub s: usize,
}

/// Foreground/background decomposition: x_ref = i_in ⊙ (1-m), b = i_in ⊙ m.
pub fn split_fg_bg(i_in: &Array3<f64>, m: &Array2<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    let (h, w, _) = i_in.dim();
    if m.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("({h}, {w})"),
            got: format!("{:?}", m.dim()),
        });
    }
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("mask is not binary".into()));
    }
    let mut x_ref = Array3::zeros(i_in.dim());
    let mut b = Array3::zeros(i_in.dim());
    for y in 0..h {
        for x in 0..w {
            let mv = m[[y, x]];
            for c in 0..3 {
                let v = i_in[[y, x, c]];
                x_ref[[y, x, c]] = v * (1.0 - mv);
                b[[y, x, c]] = v * mv;
            }
        }
    }
    Ok((x_ref, b))
}

/// Tight axis-aligned bounding box of the mask's zero region, half-open
/// pixel coordinates.
pub fn gt_box_from_mask(m: &Array2<f64>) -> Result<BBox> {
    let (h, w) = m.dim();
    let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0usize, 0usize);
    let mut found = false;
    for y in 0..h {
        for x in 0..w {
            if m[[y, x]] == 0.0 {
                found = true;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    if !found {
        return Err(Error::DegenerateSample("mask has no vehicle pixels".into()));
    }
    Ok(BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// Procedural background plate: flat color or vertical gradient.
pub fn background_plate(h: usize, w: usize, rng: &mut impl RngCore) -> Array3<f64> {
    fn color(rng: &mut impl RngCore) -> [f64; 3] {
        [
            0.05 + 0.9 * uniform01(rng),
            0.05 + 0.9 * uniform01(rng),
            0.05 + 0.9 * uniform01(rng),
        ]
    }
    let top = color(rng);
    if uniform01(rng) < 0.5 {
        Array3::from_shape_fn((h, w, 3), |(_, _, c)| top[c])
    } else {
        let bottom = color(rng);
        Array3::from_shape_fn((h, w, 3), |(y, _, c)| {
            let t = y as f64 / (h - 1).max(1) as f64;
            top[c] * (1.0 - t) + bottom[c] * t
        })
    }
}

struct GridPoint {
    pose: CameraPose,
    weather: WeatherParams,
    color: String,
}

/// Weather x pose cross product; `color_of` picks the vehicle color per
/// enumeration index.
fn enumerate_grid(
    weathers: &[WeatherParams],
    poses: &[CameraPose],
    color_of: impl Fn(usize) -> String,
) -> Vec<GridPoint> {
    let mut out = Vec::new();
    let mut idx = 0;
    for weather in weathers {
        for pose in poses {
            out.push(GridPoint {
                pose: *pose,
                weather: *weather,
                color: color_of(idx),
            });
            idx += 1;
        }
    }
    out
}

/// EFE grids additionally cross with the color palette.
fn enumerate_grid_with_colors(
    weathers: &[WeatherParams],
    poses: &[CameraPose],
    colors: &[String],
) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for weather in weathers {
        for pose in poses {
            for color in colors {
                out.push(GridPoint {
                    pose: *pose,
                    weather: *weather,
                    color: color.clone(),
                });
            }
        }
    }
    out
}

/// Keeps at most `cap` points, chosen by a seeded shuffle, then restored to
/// enumeration order.
fn subsample(points: Vec<GridPoint>, cap: usize, seed: u64) -> Vec<GridPoint> {
    if points.len() <= cap {
        return points;
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::environment::shuffle(&mut order, &mut rng);
    let mut keep: Vec<usize> = order.into_iter().take(cap).collect();
    keep.sort_unstable();
    let mut points: Vec<Option<GridPoint>> = points.into_iter().map(Some).collect();
    keep.iter().map(|&i| points[i].take().unwrap()).collect()
}

fn split_seed(seed: u64, split: SplitTag) -> u64 {
    // splitmix-style mix so every split gets an independent stream
    let mut z = seed ^ (split as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shared geometry cache: rasterization does not depend on weather or color,
/// so poses repeated across the grid render once.
pub struct GeometryCache<'a> {
    mesh: &'a Mesh,
    image_size: (usize, usize),
    cache: Vec<(CameraPose, SampleMap)>,
}

impl<'a> GeometryCache<'a> {
    pub fn new(mesh: &'a Mesh, image_size: (usize, usize)) -> Self {
        GeometryCache {
            mesh,
            image_size,
            cache: Vec::new(),
        }
    }

    pub fn get(&mut self, pose: &CameraPose) -> Result<&SampleMap> {
        if let Some(i) = self.cache.iter().position(|(p, _)| p == pose) {
            return Ok(&self.cache[i].1);
        }
        let map = rasterize_geometry(self.mesh, pose, self.image_size, DEFAULT_FOV_DEG)?;
        self.cache.push((*pose, map));
        Ok(&self.cache.last().unwrap().1)
    }
}

/// Oracle-rendered vehicle at a pose/weather for a given solid color.
fn oracle_vehicle(
    map: &SampleMap,
    color: &str,
    weather: &WeatherParams,
    sun_azimuth_deg: f64,
) -> Result<Array3<f64>> {
    let rgb = color_rgb(color)?;
    let tex = TextureMap::solid(4, 4, rgb);
    let render = RenderOutput {
        color: map.shade(&tex),
        silhouette: map.silhouette(),
        depth: map.depth(),
        normals: map.normals(),
    };
    Ok(env_oracle(&render, weather, sun_azimuth_deg))
}

/// Generates all splits under `out_dir` and writes `manifest.json`.
/// Deterministic: identical (mesh, config, seed) produce byte-identical
/// manifests and images.
pub fn generate_dataset(
    mesh: &Mesh,
    config: &DatasetConfig,
    seed: u64,
    config_hash: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let look_at = mesh.centroid();
    let size = config.image_size;
    let mut geo = GeometryCache::new(mesh, (size, size));
    let seen = config.seen_weather();
    let unseen = config.unseen_weather();
    if seen.is_empty() {
        return Err(Error::InvalidInput("empty weather grid".into()));
    }
    let efe_train_palette: Vec<String> = TRAIN_COLORS
        .iter()
        .take(config.efe_train_colors.max(1))
        .map(|(n, _)| n.to_string())
        .collect();
    let efe_test_palette: Vec<String> = (0..config.efe_test_colors.max(1))
        .map(|i| test_color(i).0)
        .collect();
    let det_palette: Vec<String> = TRAIN_COLORS.iter().map(|(n, _)| n.to_string()).collect();

    let mut records = Vec::new();
    for split in SplitTag::ALL {
        let points = match split {
            SplitTag::EfeTrain => subsample(
                enumerate_grid_with_colors(
                    &seen,
                    &config.efe_train_grid.poses(look_at),
                    &efe_train_palette,
                ),
                config.max_efe_train,
                split_seed(seed, split),
            ),
            SplitTag::EfeTest => subsample(
                enumerate_grid_with_colors(
                    &seen,
                    &config.efe_test_grid.poses(look_at),
                    &efe_test_palette,
                ),
                config.max_efe_test,
                split_seed(seed, split),
            ),
            SplitTag::DetTrain => subsample(
                enumerate_grid(&seen, &config.det_train_grid.poses(look_at), |i| {
                    det_palette[i % det_palette.len()].clone()
                }),
                config.max_det_train,
                split_seed(seed, split),
            ),
            SplitTag::DetTest => subsample(
                enumerate_grid(&seen, &config.det_test_grid.poses(look_at), |i| {
                    det_palette[(i + 3) % det_palette.len()].clone()
                }),
                config.max_det_test,
                split_seed(seed, split),
            ),
            SplitTag::Texgen => subsample(
                enumerate_grid(&seen, &config.texgen_grid.poses(look_at), |_| {
                    "white".to_string()
                }),
                config.max_texgen,
                split_seed(seed, split),
            ),
            SplitTag::EvalSeen => subsample(
                enumerate_grid(&seen, &config.eval_grid.poses(look_at), |_| {
                    config.benign_color.clone()
                }),
                config.max_eval_seen,
                split_seed(seed, split),
            ),
            SplitTag::EvalUnseen => subsample(
                enumerate_grid(&unseen, &config.eval_grid.poses(look_at), |_| {
                    config.benign_color.clone()
                }),
                config.max_eval_unseen,
                split_seed(seed, split),
            ),
        };
        if points.is_empty() {
            return Err(Error::InvalidInput(format!(
                "split {} has an empty grid",
                split.name()
            )));
        }
        // no duplicate (pose, weather, color) keys within a split
        let mut keys = BTreeSet::new();
        for p in &points {
            let key = format!(
                "{:.6}/{:.6}/{:.6}/{:.6}/{:.6}/{}",
                p.pose.azimuth_deg,
                p.pose.elevation_deg,
                p.pose.distance,
                p.weather.sun_altitude_deg,
                p.weather.fog_density,
                p.color
            );
            if !keys.insert(key.clone()) {
                return Err(Error::InvariantViolation(format!(
                    "duplicate grid key {key} in split {}",
                    split.name()
                )));
            }
        }
        for (idx, point) in points.iter().enumerate() {
            let id = format!("{}-{idx:04}", split.name());
            let map = geo.get(&point.pose)?;
            let silhouette = map.silhouette();
            if silhouette.iter().all(|&v| v == 0.0) {
                // vehicle entirely out of frame; excluded
                continue;
            }
            // vehicle appearance: EFE splits keep the white reference car in
            // the scene and store the colored cutout as the target
            let scene_color = match split {
                SplitTag::EfeTrain | SplitTag::EfeTest | SplitTag::Texgen => "white",
                _ => point.color.as_str(),
            };
            let vehicle = oracle_vehicle(map, scene_color, &point.weather, config.sun_azimuth_deg)?;
            let mask = Array2::from_shape_fn((size, size), |(y, x)| 1.0 - silhouette[[y, x]]);
            let mut rng = ChaCha8Rng::seed_from_u64(
                split_seed(seed, split) ^ (idx as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
            );
            let bg = background_plate(size, size, &mut rng);
            let mut i_in = Array3::zeros((size, size, 3));
            for y in 0..size {
                for x in 0..size {
                    for c in 0..3 {
                        i_in[[y, x, c]] = vehicle[[y, x, c]] * silhouette[[y, x]]
                            + bg[[y, x, c]] * mask[[y, x]];
                    }
                }
            }
            let gt = gt_box_from_mask(&mask)?;
            let s = mask.iter().filter(|&&v| v == 0.0).count();
            let image_rel = format!("images/{id}_img.png");
            let mask_rel = format!("images/{id}_mask.png");
            pngio::save_rgb(&out_dir.join(&image_rel), &i_in)?;
            pngio::save_mask(&out_dir.join(&mask_rel), &mask)?;
            let tg_rel = match split {
                SplitTag::EfeTrain | SplitTag::EfeTest => {
                    let tg =
                        oracle_vehicle(map, &point.color, &point.weather, config.sun_azimuth_deg)?;
                    let rel = format!("images/{id}_tg.png");
                    pngio::save_rgb(&out_dir.join(&rel), &tg)?;
                    Some(rel)
                }
                _ => None,
            };
            records.push(ManifestRecord {
                id,
                image: image_rel,
                mask: mask_rel,
                tg: tg_rel,
                pose: point.pose,
                weather: point.weather,
                gt,
                color: point.color.clone(),
                split,
                s,
            });
        }
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        image_size: size,
        sun_azimuth_deg: config.sun_azimuth_deg,
        records,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads all samples of one split, validating the stated invariants per
/// sample (binary mask, tight box, box within bounds).
pub fn load_split(manifest_dir: &Path, split: SplitTag) -> Result<Vec<SceneSample>> {
    let manifest = DatasetManifest::load(&manifest_dir.join("manifest.json"))?;
    let size = manifest.image_size as f64;
    let mut out = Vec::new();
    for rec in manifest.records.iter().filter(|r| r.split == split) {
        let fail = |msg: String| Error::InvariantViolation(format!("sample {}: {msg}", rec.id));
        let i_in = pngio::load_rgb(&manifest_dir.join(&rec.image))?;
        let m = pngio::load_mask(&manifest_dir.join(&rec.mask))
            .map_err(|e| fail(e.to_string()))?;
        let gt = gt_box_from_mask(&m).map_err(|e| fail(e.to_string()))?;
        if gt != rec.y_box() {
            return Err(fail(format!(
                "stored box {:?} is not the tight box of the mask {:?}",
                rec.gt, gt
            )));
        }
        if rec.gt.x1 < 0.0 || rec.gt.y1 < 0.0 || rec.gt.x2 > size || rec.gt.y2 > size {
            return Err(fail("gt box outside image bounds".into()));
        }
        let (x_ref, b) = split_fg_bg(&i_in, &m)?;
        let tg = match &rec.tg {
            Some(rel) => Some(pngio::load_rgb(&manifest_dir.join(rel))?),
            None => None,
        };
        out.push(SceneSample {
            id: rec.id.clone(),
            i_in,
            m,
            x_ref,
            b,
            y: rec.gt,
            pose: rec.pose,
            weather: rec.weather,
            color: rec.color.clone(),
            split,
            tg,
            s: rec.s,
        });
    }
    Ok(out)
}

impl ManifestRecord {
    fn y_box(&self) -> BBox {
        self.gt
    }
}

/// Builds EFE training samples from a loaded split: the network input is the
/// masked reference foreground, the fusion input is the rasterized
/// preset-color vehicle, and the target is the oracle cutout.
pub fn build_efe_samples(
    samples: &[SceneSample],
    mesh: &Mesh,
    image_size: usize,
) -> Result<Vec<EfeSample>> {
    let mut geo = GeometryCache::new(mesh, (image_size, image_size));
    let mut out = Vec::new();
    for sample in samples {
        let tg = sample.tg.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("sample {} has no EFE target", sample.id))
        })?;
        let map = geo.get(&sample.pose)?;
        let rgb = color_rgb(&sample.color)?;
        let x_nr = map.shade(&TextureMap::solid(4, 4, rgb));
        let silhouette = map.silhouette();
        out.push(EfeSample {
            x_ref: sample.x_ref.clone(),
            x_nr,
            silhouette,
            tg: tg.clone(),
            s: sample.s,
            distance: sample.pose.distance,
        });
    }
    Ok(out)
}

/// Builds benign detector samples (scene image + gt box) from a split.
pub fn build_det_samples(samples: &[SceneSample]) -> Vec<DetSample> {
    samples
        .iter()
        .map(|s| DetSample {
            id: s.id.clone(),
            image: s.i_in.clone(),
            gt: s.y,
            pose: s.pose,
            weather: s.weather,
        })
        .collect()
}

/// Re-renders one scene with an arbitrary texture through the oracle path:
/// rasterize, apply the weather oracle, composite onto the stored background.
pub fn render_scene_with_texture(
    map: &SampleMap,
    texture: &TextureMap,
    weather: &WeatherParams,
    sun_azimuth_deg: f64,
    b: &Array3<f64>,
) -> Array3<f64> {
    let silhouette = map.silhouette();
    let render = RenderOutput {
        color: map.shade(texture),
        silhouette: silhouette.clone(),
        depth: map.depth(),
        normals: map.normals(),
    };
    let vehicle = env_oracle(&render, weather, sun_azimuth_deg);
    let (h, w, _) = b.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        vehicle[[y, x, c]] * silhouette[[y, x]] + b[[y, x, c]]
    })
}

/// Resolves a mesh path, materializing the builtin car when asked for.
pub fn resolve_mesh(path_or_builtin: &str, out_dir: &Path) -> Result<(Mesh, PathBuf)> {
    if path_or_builtin == "builtin:car" {
        let mesh = Mesh::builtin_car();
        let path = out_dir.join("car.obj");
        if !path.exists() {
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            crate::mesh_render::save_mesh(&path, &mesh)?;
        }
        Ok((mesh, path))
    } else {
        let path = PathBuf::from(path_or_builtin);
        let mesh = crate::mesh_render::load_mesh(&path)?;
        Ok((mesh, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn split_fg_bg_identities() {
        let i_in = Array3::from_shape_fn((3, 3, 3), |(y, x, c)| (y + x + c) as f64 / 10.0);
        let ones = Array2::ones((3, 3));
        let (x_ref, b) = split_fg_bg(&i_in, &ones).unwrap();
        assert!(x_ref.iter().all(|&v| v == 0.0));
        assert_eq!(b, i_in);
        let zeros = Array2::zeros((3, 3));
        let (x_ref, b) = split_fg_bg(&i_in, &zeros).unwrap();
        assert_eq!(x_ref, i_in);
        assert!(b.iter().all(|&v| v == 0.0));
        // exact decomposition for a mixed mask
        let m = arr2(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]);
        let (x_ref, b) = split_fg_bg(&i_in, &m).unwrap();
        for ((a, b_), i) in x_ref.iter().zip(b.iter()).zip(i_in.iter()) {
            assert_eq!(a + b_, *i);
        }
        // non-binary mask rejected
        let bad = arr2(&[[0.5; 3]; 3]);
        assert!(split_fg_bg(&i_in, &bad).is_err());
    }

    #[test]
    fn gt_box_examples() {
        let mut m = Array2::ones((10, 12));
        for y in 2..6 {
            for x in 3..8 {
                m[[y, x]] = 0.0;
            }
        }
        assert_eq!(gt_box_from_mask(&m).unwrap(), BBox::new(3.0, 2.0, 8.0, 6.0));
        let mut single = Array2::ones((8, 8));
        single[[4, 4]] = 0.0;
        assert_eq!(
            gt_box_from_mask(&single).unwrap(),
            BBox::new(4.0, 4.0, 5.0, 5.0)
        );
        assert!(matches!(
            gt_box_from_mask(&Array2::ones((4, 4))),
            Err(Error::DegenerateSample(_))
        ));
    }

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            image_size: 32,
            sun_altitudes_deg: vec![30.0, 90.0],
            fog_densities: vec![0.0, 50.0],
            unseen_sun_altitudes_deg: vec![0.0],
            unseen_fog_densities: vec![40.0],
            efe_train_grid: PoseGrid {
                azimuths_deg: vec![0.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0, 12.0],
            },
            efe_test_grid: PoseGrid {
                azimuths_deg: vec![90.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0, 12.0],
            },
            det_train_grid: PoseGrid {
                azimuths_deg: vec![0.0, 180.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0],
            },
            det_test_grid: PoseGrid {
                azimuths_deg: vec![45.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0],
            },
            texgen_grid: PoseGrid {
                azimuths_deg: vec![0.0, 90.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0],
            },
            eval_grid: PoseGrid {
                azimuths_deg: vec![0.0, 90.0],
                elevations_deg: vec![30.0],
                distances_m: vec![6.0],
            },
            efe_train_colors: 2,
            efe_test_colors: 1,
            max_efe_train: 6,
            max_efe_test: 4,
            max_det_train: 6,
            max_det_test: 4,
            max_texgen: 6,
            max_eval_seen: 6,
            max_eval_unseen: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh::builtin_car();
        let config = tiny_config();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        let m1 = generate_dataset(&mesh, &config, 11, "h", &d1).unwrap();
        let m2 = generate_dataset(&mesh, &config, 11, "h", &d2).unwrap();
        let t1 = std::fs::read(d1.join("manifest.json")).unwrap();
        let t2 = std::fs::read(d2.join("manifest.json")).unwrap();
        assert_eq!(t1, t2);
        assert!(!m1.records.is_empty());
        // byte-identical images too
        for rec in &m1.records {
            let i1 = std::fs::read(d1.join(&rec.image)).unwrap();
            let i2 = std::fs::read(d2.join(&rec.image)).unwrap();
            assert_eq!(i1, i2, "image bytes differ for {}", rec.id);
        }
        let _ = m2;

        // loading validates and reconstructs the exact decomposition
        let samples = load_split(&d1, SplitTag::EvalSeen).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            for ((a, b), i) in s.x_ref.iter().zip(s.b.iter()).zip(s.i_in.iter()) {
                assert_eq!(a + b, *i);
            }
            assert_eq!(gt_box_from_mask(&s.m).unwrap(), s.y);
        }
    }

    #[test]
    fn seen_and_unseen_weather_are_disjoint() {
        let config = DatasetConfig::default();
        let seen = config.seen_weather();
        let unseen = config.unseen_weather();
        for u in &unseen {
            assert!(!seen.iter().any(|s| s == u));
        }
    }

    #[test]
    fn split_filter_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh::builtin_car();
        let config = tiny_config();
        let manifest = generate_dataset(&mesh, &config, 3, "h", dir.path()).unwrap();
        let efe_train = manifest
            .records
            .iter()
            .filter(|r| r.split == SplitTag::EfeTrain)
            .count();
        let loaded = load_split(dir.path(), SplitTag::EfeTrain).unwrap();
        assert_eq!(loaded.len(), efe_train);
        assert!(loaded.iter().all(|s| s.tg.is_some()));
    }
}
