//! Python bindings for the camouflage pipeline.
//!
//! Images cross the boundary as flat row-major `(h, w, 3)` float lists to
//! avoid a hard dependency on any particular Python array library; wrap them
//! with `numpy.asarray(...).reshape(h, w, 3)` on the Python side if desired.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uvcamo::config::PipelineConfig;
use uvcamo::dataset::{
    build_det_samples, build_efe_samples, generate_dataset, load_split, resolve_mesh, SplitTag,
};
use uvcamo::detect::{eval_records, train_toy_detector, ToyDetector};
use uvcamo::environment::{env_oracle, train_efe, EfeNet, WeatherParams};
use uvcamo::eval::{ap_at_05, nms, TextureEval};
use uvcamo::losses::{attack_loss, iou, AttackLossVariant, BBox, DetectionSet};
use uvcamo::mesh_render::{rasterize, CameraPose, Mesh as CoreMesh, TextureMap};
use uvcamo::optimize::{generate_camouflage, prepare_samples};

fn err(e: uvcamo::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flat3(a: &Array3<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn flat2(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn image_from_flat(data: Vec<f64>, h: usize, w: usize) -> PyResult<Array3<f64>> {
    if data.len() != h * w * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a ({h}, {w}, 3) image, got {}",
            h * w * 3,
            data.len()
        )));
    }
    Array3::from_shape_vec((h, w, 3), data)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Triangle mesh with per-face UVs.
#[pyclass(name = "Mesh", from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: CoreMesh,
}

#[pymethods]
impl PyMesh {
    /// The bundled boxy two-volume car.
    #[staticmethod]
    fn builtin_car() -> Self {
        PyMesh {
            inner: CoreMesh::builtin_car(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMesh {
            inner: uvcamo::mesh_render::load_mesh(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        uvcamo::mesh_render::save_mesh(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.vertices.len()
    }

    #[getter]
    fn num_faces(&self) -> usize {
        self.inner.faces.len()
    }

    fn centroid(&self) -> (f64, f64, f64) {
        let c = self.inner.centroid();
        (c[0], c[1], c[2])
    }
}

/// UV texture with texels in [0, 1].
#[pyclass(name = "Texture", from_py_object)]
#[derive(Clone)]
struct PyTexture {
    inner: TextureMap,
}

#[pymethods]
impl PyTexture {
    #[staticmethod]
    fn solid(h: usize, w: usize, rgb: (f64, f64, f64)) -> PyResult<Self> {
        let t = TextureMap::solid(h, w, [rgb.0, rgb.1, rgb.2]);
        TextureMap::new(t.texels).map_err(err).map(|inner| PyTexture { inner })
    }

    #[staticmethod]
    fn random(h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyTexture {
            inner: TextureMap::random(h, w, &mut rng),
        }
    }

    #[staticmethod]
    fn from_data(h: usize, w: usize, data: Vec<f64>) -> PyResult<Self> {
        let texels = image_from_flat(data, h, w)?;
        Ok(PyTexture {
            inner: TextureMap::new(texels).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTexture {
            inner: TextureMap::load_png(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(err)
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        self.inner.resolution()
    }

    /// Flat row-major (h, w, 3) texel values.
    fn data(&self) -> Vec<f64> {
        flat3(&self.inner.texels)
    }
}

/// Spherical camera pose; z is up.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: CameraPose,
}

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (azimuth_deg, elevation_deg, distance, look_at=None))]
    fn new(
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
        look_at: Option<(f64, f64, f64)>,
    ) -> PyResult<Self> {
        let mut pose = CameraPose::new(azimuth_deg, elevation_deg, distance);
        if let Some(l) = look_at {
            pose = pose.with_look_at([l.0, l.1, l.2]);
        }
        pose.validate().map_err(err)?;
        Ok(PyPose { inner: pose })
    }

    #[getter]
    fn azimuth_deg(&self) -> f64 {
        self.inner.azimuth_deg
    }

    #[getter]
    fn elevation_deg(&self) -> f64 {
        self.inner.elevation_deg
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance
    }
}

/// Sun altitude and fog density.
#[pyclass(name = "Weather", from_py_object)]
#[derive(Clone)]
struct PyWeather {
    inner: WeatherParams,
}

#[pymethods]
impl PyWeather {
    #[new]
    fn new(sun_altitude_deg: f64, fog_density: f64) -> PyResult<Self> {
        Ok(PyWeather {
            inner: WeatherParams::new(sun_altitude_deg, fog_density).map_err(err)?,
        })
    }
}

/// Rendered vehicle image bundle.
#[pyclass(name = "Render")]
struct PyRender {
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    color: Vec<f64>,
    silhouette: Vec<f64>,
    depth: Vec<f64>,
}

#[pymethods]
impl PyRender {
    /// Flat row-major (h, w, 3) colors.
    fn color(&self) -> Vec<f64> {
        self.color.clone()
    }

    /// Flat row-major (h, w) 0/1 coverage.
    fn silhouette(&self) -> Vec<f64> {
        self.silhouette.clone()
    }

    /// Flat row-major (h, w) view depth; infinity outside the silhouette.
    fn depth(&self) -> Vec<f64> {
        self.depth.clone()
    }
}

/// Rasterizes the textured mesh at a pose; weather is optional and applies
/// the analytic environment oracle.
#[pyfunction]
#[pyo3(signature = (mesh, texture, pose, size, weather=None, sun_azimuth_deg=45.0))]
fn render(
    mesh: &PyMesh,
    texture: &PyTexture,
    pose: &PyPose,
    size: usize,
    weather: Option<&PyWeather>,
    sun_azimuth_deg: f64,
) -> PyResult<PyRender> {
    let mut out = rasterize(&mesh.inner, &texture.inner, &pose.inner, (size, size)).map_err(err)?;
    if let Some(w) = weather {
        out.color = env_oracle(&out, &w.inner, sun_azimuth_deg);
    }
    Ok(PyRender {
        height: size,
        width: size,
        color: flat3(&out.color),
        silhouette: flat2(&out.silhouette),
        depth: flat2(&out.depth),
    })
}

/// Frozen toy detector.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: ToyDetector,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDetector {
            inner: ToyDetector::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn fresh(seed: u64) -> Self {
        PyDetector {
            inner: ToyDetector::new(seed),
        }
    }

    /// Runs the detector plus NMS; returns (x1, y1, x2, y2, confidence)
    /// tuples sorted by descending confidence.
    fn detect(
        &self,
        image: Vec<f64>,
        h: usize,
        w: usize,
    ) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
        let img = image_from_flat(image, h, w)?;
        let dets = self.inner.forward(&img).map_err(err)?;
        Ok(nms(&dets)
            .into_iter()
            .map(|s| (s.bbox.x1, s.bbox.y1, s.bbox.x2, s.bbox.y2, s.confidence))
            .collect())
    }

    /// Attack loss -log(1 - max H_d) against a ground-truth box, before NMS.
    fn attack_loss(
        &self,
        image: Vec<f64>,
        h: usize,
        w: usize,
        gt: (f64, f64, f64, f64),
    ) -> PyResult<f64> {
        let img = image_from_flat(image, h, w)?;
        let dets: DetectionSet = self.inner.forward(&img).map_err(err)?;
        Ok(attack_loss(&dets, &BBox::new(gt.0, gt.1, gt.2, gt.3)))
    }
}

/// Frozen environment feature extractor.
#[pyclass(name = "Efe")]
struct PyEfe {
    inner: EfeNet,
}

#[pymethods]
impl PyEfe {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEfe {
            inner: EfeNet::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn fresh(seed: u64) -> Self {
        PyEfe {
            inner: EfeNet::new(seed),
        }
    }

    /// Returns (mul_map, add_map) as flat row-major (h, w, 3) lists.
    fn feature_maps(
        &self,
        x_ref: Vec<f64>,
        h: usize,
        w: usize,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let x = image_from_flat(x_ref, h, w)?;
        let maps = self.inner.forward(&x).map_err(err)?;
        Ok((flat3(&maps.mul_map), flat3(&maps.add_map)))
    }
}

#[pyfunction(name = "iou")]
fn py_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    iou(
        &BBox::new(a.0, a.1, a.2, a.3),
        &BBox::new(b.0, b.1, b.2, b.3),
    )
}

fn load_config(config: Option<PathBuf>, seed: Option<u64>) -> PyResult<PipelineConfig> {
    let mut c = match config {
        Some(p) => PipelineConfig::load(&p).map_err(err)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

/// Generates the full dataset under `out`; returns the number of samples.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None))]
fn gen_dataset(out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<usize> {
    let c = load_config(config, seed)?;
    let (mesh, _) = resolve_mesh(&c.mesh, &out).map_err(err)?;
    let manifest = generate_dataset(&mesh, &c.dataset, c.seed, &c.hash(), &out).map_err(err)?;
    Ok(manifest.records.len())
}

/// Trains the EFE on a generated dataset; returns the best test loss.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, seed=None, use_weight=true))]
fn train_efe_py(
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    use_weight: bool,
) -> PyResult<f64> {
    let c = load_config(config, seed)?;
    let (mesh, _) = resolve_mesh(&c.mesh, &data).map_err(err)?;
    let train = build_efe_samples(
        &load_split(&data, SplitTag::EfeTrain).map_err(err)?,
        &mesh,
        c.dataset.image_size,
    )
    .map_err(err)?;
    let test = build_efe_samples(
        &load_split(&data, SplitTag::EfeTest).map_err(err)?,
        &mesh,
        c.dataset.image_size,
    )
    .map_err(err)?;
    let mut cfg = c.efe.clone();
    cfg.seed = c.seed;
    cfg.use_weight = use_weight;
    let (net, report) = train_efe(&train, &test, &cfg).map_err(err)?;
    net.save(&out, serde_json::json!({"seed": cfg.seed})).map_err(err)?;
    Ok(report.best_test_loss)
}

/// Trains the detector on benign scenes; returns the best validation AP.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, seed=None))]
fn train_detector_py(
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<f64> {
    let c = load_config(config, seed)?;
    let train = build_det_samples(&load_split(&data, SplitTag::DetTrain).map_err(err)?);
    let val = build_det_samples(&load_split(&data, SplitTag::DetTest).map_err(err)?);
    let mut cfg = c.detector.clone();
    cfg.seed = c.seed;
    let (net, report) = train_toy_detector(&train, &val, &cfg).map_err(err)?;
    net.save(&out, serde_json::json!({"seed": cfg.seed})).map_err(err)?;
    Ok(report.best_val_ap)
}

/// Optimizes an adversarial texture; writes a PNG and returns the texture.
#[pyfunction]
#[pyo3(signature = (data, efe, detector, out, config=None, seed=None, gt_center_only=false))]
fn gen_camo(
    data: PathBuf,
    efe: PathBuf,
    detector: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    gt_center_only: bool,
) -> PyResult<PyTexture> {
    let c = load_config(config, seed)?;
    let (mesh, _) = resolve_mesh(&c.mesh, &data).map_err(err)?;
    let efe = EfeNet::load(&efe).map_err(err)?;
    let det = ToyDetector::load(&detector).map_err(err)?;
    let scenes = load_split(&data, SplitTag::Texgen).map_err(err)?;
    let samples = prepare_samples(&mesh, &efe, &scenes, c.dataset.image_size).map_err(err)?;
    let mut cfg = c.optimize.clone();
    cfg.seed = c.seed;
    cfg.variant = if gt_center_only {
        AttackLossVariant::GtCenterBox
    } else {
        AttackLossVariant::AllBoxes
    };
    let (texture, _) = generate_camouflage(&samples, &det, &cfg).map_err(err)?;
    texture.save_png(&out).map_err(err)?;
    Ok(PyTexture { inner: texture })
}

/// AP@0.5 of one split inside an evaluation file written by the CLI.
#[pyfunction]
fn eval_ap(eval_file: PathBuf, split: String) -> PyResult<f64> {
    let eval = TextureEval::load(Path::new(&eval_file)).map_err(err)?;
    let records = eval
        .splits
        .get(&split)
        .ok_or_else(|| PyValueError::new_err(format!("split '{split}' not in evaluation")))?;
    ap_at_05(records).map_err(err)
}

/// Benign-scene AP@0.5 of a detector over one split of a dataset.
#[pyfunction]
fn split_ap(data: PathBuf, detector: PathBuf, split: String) -> PyResult<f64> {
    let det = ToyDetector::load(&detector).map_err(err)?;
    let tag = SplitTag::parse(&split).map_err(err)?;
    let samples = build_det_samples(&load_split(&data, tag).map_err(err)?);
    let records = eval_records(&det, &samples).map_err(err)?;
    ap_at_05(&records).map_err(err)
}

#[pymodule]
fn uvcamo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyTexture>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyWeather>()?;
    m.add_class::<PyRender>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyEfe>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(py_iou, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_efe_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_detector_py, m)?)?;
    m.add_function(wrap_pyfunction!(gen_camo, m)?)?;
    m.add_function(wrap_pyfunction!(eval_ap, m)?)?;
    m.add_function(wrap_pyfunction!(split_ap, m)?)?;
    Ok(())
}
