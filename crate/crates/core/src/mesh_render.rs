//! Mesh loading and differentiable texture rasterization.
//!
//! The rasterizer is a hard z-buffer renderer with perspective-correct
//! barycentric interpolation and bilinear UV texture sampling. Pixel colors
//! are linear in the texels they sample, so texture gradients are exact:
//! each covered pixel scatters its upstream gradient into the four texels of
//! its bilinear footprint. Geometry is never optimized, so no geometry
//! gradients exist anywhere in the pipeline.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::pngio;

pub const DEFAULT_FOV_DEG: f64 = 45.0;
const NEAR_PLANE: f64 = 0.01;

/// Triangle mesh with per-face-vertex UV coordinates.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// UVs per face corner, aligned with `faces`; all components in [0,1].
    pub face_uvs: Vec<[[f64; 2]; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 || self.faces.is_empty() {
            return Err(Error::InvalidInput(format!(
                "mesh needs >= 3 vertices and >= 1 face, got {} vertices, {} faces",
                self.vertices.len(),
                self.faces.len()
            )));
        }
        if self.faces.len() != self.face_uvs.len() {
            return Err(Error::InvalidInput(
                "face and face_uv counts differ".into(),
            ));
        }
        for (fi, face) in self.faces.iter().enumerate() {
            for &vi in face {
                if vi >= self.vertices.len() {
                    return Err(Error::InvalidInput(format!(
                        "face {fi} references vertex {vi}, only {} exist",
                        self.vertices.len()
                    )));
                }
            }
        }
        for uvs in &self.face_uvs {
            for uv in uvs {
                if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                    return Err(Error::InvalidInput(format!(
                        "uv {:?} outside [0,1]^2",
                        uv
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    /// Boxy two-volume car at the origin, z-up, nose along +x. Each of the
    /// twelve quads owns a disjoint cell of the UV atlas.
    pub fn builtin_car() -> Mesh {
        let mut mesh = Mesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            face_uvs: Vec::new(),
        };
        // body and cabin boxes; atlas is a 4x3 grid of cells
        add_box(&mut mesh, [-2.1, -0.95, 0.25], [2.1, 0.95, 1.0], 0);
        add_box(&mut mesh, [-1.0, -0.85, 1.0], [0.8, 0.85, 1.55], 6);
        debug_assert!(mesh.validate().is_ok());
        mesh
    }
}

/// Appends an axis-aligned box with outward-facing winding. Face `k` of the
/// box maps into atlas cell `cell0 + k` of a 4-column, 3-row grid.
fn add_box(mesh: &mut Mesh, min: [f64; 3], max: [f64; 3], cell0: usize) {
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            ]
        })
        .collect();
    let base = mesh.vertices.len();
    mesh.vertices.extend_from_slice(&corners);
    let center = [
        (min[0] + max[0]) / 2.0,
        (min[1] + max[1]) / 2.0,
        (min[2] + max[2]) / 2.0,
    ];
    // quads as corner indices (ccw seen from outside, fixed below if not)
    let quads: [[usize; 4]; 6] = [
        [1, 3, 7, 5], // +x
        [0, 4, 6, 2], // -x
        [2, 6, 7, 3], // +y
        [0, 1, 5, 4], // -y
        [4, 5, 7, 6], // +z
        [0, 2, 3, 1], // -z
    ];
    for (k, quad) in quads.iter().enumerate() {
        let cell = cell0 + k;
        let (cx, cy) = (cell % 4, cell / 4);
        let margin = 0.01;
        let u0 = cx as f64 / 4.0 + margin;
        let u1 = (cx + 1) as f64 / 4.0 - margin;
        let v0 = cy as f64 / 3.0 + margin;
        let v1 = (cy + 1) as f64 / 3.0 - margin;
        let uv = [[u0, v0], [u1, v0], [u1, v1], [u0, v1]];
        for tri in [[0usize, 1, 2], [0, 2, 3]] {
            let mut idx = [base + quad[tri[0]], base + quad[tri[1]], base + quad[tri[2]]];
            let mut uvs = [uv[tri[0]], uv[tri[1]], uv[tri[2]]];
            // enforce outward winding
            let p = |i: usize| mesh.vertices[i];
            let n = cross(sub(p(idx[1]), p(idx[0])), sub(p(idx[2]), p(idx[0])));
            let fc = scale(add3(add3(p(idx[0]), p(idx[1])), p(idx[2])), 1.0 / 3.0);
            if dot(n, sub(fc, center)) < 0.0 {
                idx.swap(1, 2);
                uvs.swap(1, 2);
            }
            mesh.faces.push(idx);
            mesh.face_uvs.push(uvs);
        }
    }
}

/// H_t x W_t x 3 UV texture with texels in [0,1]. Row 0 corresponds to v = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    pub texels: Array3<f64>,
}

impl TextureMap {
    pub fn new(texels: Array3<f64>) -> Result<Self> {
        if texels.dim().2 != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(H_t, W_t, 3)".into(),
                got: format!("{:?}", texels.dim()),
            });
        }
        if texels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("texel outside [0,1]".into()));
        }
        Ok(TextureMap { texels })
    }

    pub fn solid(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        TextureMap {
            texels: Array3::from_shape_fn((h, w, 3), |(_, _, c)| rgb[c]),
        }
    }

    pub fn random(h: usize, w: usize, rng: &mut impl RngCore) -> Self {
        TextureMap {
            texels: Array3::from_shape_fn((h, w, 3), |_| uniform01(rng)),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.texels.dim();
        (h, w)
    }

    pub fn clamp_in_place(&mut self) {
        self.texels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// PNG rows run top-to-bottom while v runs bottom-to-top, so disk I/O
    /// flips vertically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.texels.dim();
        let flipped = Array3::from_shape_fn((h, w, 3), |(y, x, c)| self.texels[[h - 1 - y, x, c]]);
        pngio::save_rgb(path, &flipped)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = pngio::load_rgb(path)?;
        let (h, w, _) = img.dim();
        let texels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| img[[h - 1 - y, x, c]]);
        TextureMap::new(texels)
    }
}

pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    // 53 mantissa bits, uniform over [0,1)
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Spherical camera pose around a look-at point; z is up.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
    pub look_at: [f64; 3],
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Self {
        CameraPose {
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            elevation_deg,
            distance,
            look_at: [0.0, 0.0, 0.0],
        }
    }

    pub fn with_look_at(mut self, look_at: [f64; 3]) -> Self {
        self.look_at = look_at;
        self
    }

    pub fn for_mesh(azimuth_deg: f64, elevation_deg: f64, distance: f64, mesh: &Mesh) -> Self {
        Self::new(azimuth_deg, elevation_deg, distance).with_look_at(mesh.centroid())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera distance must be > 0, got {}",
                self.distance
            )));
        }
        if !(0.0..=90.0).contains(&self.elevation_deg) {
            return Err(Error::InvalidInput(format!(
                "elevation must be in [0,90], got {}",
                self.elevation_deg
            )));
        }
        Ok(())
    }
}

/// View/projection bundle realizing a pose at a given image size.
#[derive(Debug, Clone)]
pub struct Camera {
    pub eye: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
    pub tan_half_fov: f64,
    pub aspect: f64,
    pub width: usize,
    pub height: usize,
}

pub fn camera_matrices(
    pose: &CameraPose,
    image_size: (usize, usize),
    fov_deg: f64,
) -> Result<Camera> {
    pose.validate()?;
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("zero-area image".into()));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidInput(format!("fov {fov_deg} outside (0,180)")));
    }
    let az = pose.azimuth_deg.to_radians();
    let el = pose.elevation_deg.to_radians();
    let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    let eye = [
        pose.look_at[0] + pose.distance * dir[0],
        pose.look_at[1] + pose.distance * dir[1],
        pose.look_at[2] + pose.distance * dir[2],
    ];
    let forward = normalize(sub(pose.look_at, eye));
    let world_up = if forward[2].abs() > 0.999 {
        [-az.cos(), -az.sin(), 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize(cross(forward, world_up));
    let up = cross(right, forward);
    Ok(Camera {
        eye,
        right,
        up,
        forward,
        tan_half_fov: (fov_deg.to_radians() / 2.0).tan(),
        aspect: w as f64 / h as f64,
        width: w,
        height: h,
    })
}

impl Camera {
    /// World point to (pixel x, pixel y, view depth); `None` behind near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        if z <= NEAR_PLANE {
            return None;
        }
        let x = dot(d, self.right);
        let y = dot(d, self.up);
        let ndc_x = x / (z * self.tan_half_fov * self.aspect);
        let ndc_y = y / (z * self.tan_half_fov);
        let sx = (ndc_x * 0.5 + 0.5) * self.width as f64;
        let sy = (0.5 - ndc_y * 0.5) * self.height as f64;
        Some((sx, sy, z))
    }

    /// Rows of the 3x4 world-to-camera transform.
    pub fn view_matrix(&self) -> [[f64; 4]; 3] {
        let t = |axis: [f64; 3]| [axis[0], axis[1], axis[2], -dot(axis, self.eye)];
        [t(self.right), t(self.up), t(self.forward)]
    }
}

/// Rasterized vehicle image plus the ancillary geometry buffers.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// H x W x 3 in [0,1]; exactly zero outside the silhouette.
    pub color: Array3<f64>,
    /// H x W, values in {0,1}.
    pub silhouette: Array2<f64>,
    /// H x W view-space depth in meters; +inf outside the silhouette.
    pub depth: Array2<f64>,
    /// H x W x 3 unit surface normals oriented toward the camera; zero outside.
    pub normals: Array3<f64>,
}

/// Per-pixel record of the front-most surface sample.
#[derive(Debug, Clone, Copy)]
pub struct PixelSample {
    pub face: usize,
    pub uv: [f64; 2],
    pub depth: f64,
    pub normal: [f64; 3],
}

/// Texture-independent rasterization result: which UV location each pixel
/// samples. Reusable across texture updates for a fixed (mesh, pose, size).
#[derive(Debug, Clone)]
pub struct SampleMap {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Option<PixelSample>>,
}

impl SampleMap {
    pub fn at(&self, y: usize, x: usize) -> &Option<PixelSample> {
        &self.samples[y * self.width + x]
    }

    pub fn silhouette(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            if self.at(y, x).is_some() {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn depth(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.at(y, x).map_or(f64::INFINITY, |s| s.depth)
        })
    }

    pub fn normals(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.height, self.width, 3), |(y, x, c)| {
            self.at(y, x).map_or(0.0, |s| s.normal[c])
        })
    }

    /// Bilinear texture lookup for every covered pixel.
    pub fn shade(&self, texture: &TextureMap) -> Array3<f64> {
        let mut color = Array3::zeros((self.height, self.width, 3));
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(s) = self.at(y, x) {
                    let (idx, w) = bilinear_footprint(s.uv, texture.resolution());
                    for c in 0..3 {
                        let mut v = 0.0;
                        for k in 0..4 {
                            v += w[k] * texture.texels[[idx[k][0], idx[k][1], c]];
                        }
                        color[[y, x, c]] = v;
                    }
                }
            }
        }
        color
    }

    /// Exact adjoint of `shade`: scatters the upstream image gradient into
    /// texel space. Texels with no bilinear support stay exactly zero.
    pub fn scatter_texture_grad(
        &self,
        tex_resolution: (usize, usize),
        upstream: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        if upstream.dim() != (self.height, self.width, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {}, 3)", self.height, self.width),
                got: format!("{:?}", upstream.dim()),
            });
        }
        let mut grad = Array3::zeros((tex_resolution.0, tex_resolution.1, 3));
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(s) = self.at(y, x) {
                    let (idx, w) = bilinear_footprint(s.uv, tex_resolution);
                    for c in 0..3 {
                        let g = upstream[[y, x, c]];
                        for k in 0..4 {
                            grad[[idx[k][0], idx[k][1], c]] += w[k] * g;
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Texel indices (row, col) and weights of the bilinear footprint at `uv`,
/// with repeat wrapping. Texel centers sit at ((i+0.5)/H, (j+0.5)/W).
pub fn bilinear_footprint(uv: [f64; 2], (ht, wt): (usize, usize)) -> ([[usize; 2]; 4], [f64; 4]) {
    let x = uv[0] * wt as f64 - 0.5;
    let y = uv[1] * ht as f64 - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let wrap = |v: f64, n: usize| (v as i64).rem_euclid(n as i64) as usize;
    let (c0, c1) = (wrap(x0, wt), wrap(x0 + 1.0, wt));
    let (r0, r1) = (wrap(y0, ht), wrap(y0 + 1.0, ht));
    (
        [[r0, c0], [r0, c1], [r1, c0], [r1, c1]],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

/// Z-buffered visibility pass; the expensive part that does not depend on the
/// texture.
pub fn rasterize_geometry(
    mesh: &Mesh,
    pose: &CameraPose,
    image_size: (usize, usize),
    fov_deg: f64,
) -> Result<SampleMap> {
    mesh.validate()?;
    let cam = camera_matrices(pose, image_size, fov_deg)?;
    let (h, w) = image_size;
    let mut samples: Vec<Option<PixelSample>> = vec![None; h * w];
    for (fi, face) in mesh.faces.iter().enumerate() {
        let world: Vec<[f64; 3]> = face.iter().map(|&vi| mesh.vertices[vi]).collect();
        let proj: Option<Vec<(f64, f64, f64)>> =
            world.iter().map(|&p| cam.project(p)).collect();
        let Some(scr) = proj else { continue };
        let area = edge(scr[0], scr[1], (scr[2].0, scr[2].1));
        if area.abs() < 1e-12 {
            continue;
        }
        // world-space geometric normal, oriented toward the camera
        let mut n = normalize(cross(sub(world[1], world[0]), sub(world[2], world[0])));
        let fc = scale(add3(add3(world[0], world[1]), world[2]), 1.0 / 3.0);
        if dot(n, sub(cam.eye, fc)) < 0.0 {
            n = scale(n, -1.0);
        }
        let min_x = scr.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let max_x = scr.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = scr.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let max_y = scr.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x.floor().max(0.0)) as usize;
        let x1 = (max_x.ceil().min(w as f64)) as usize;
        let y0 = (min_y.floor().max(0.0)) as usize;
        let y1 = (max_y.ceil().min(h as f64)) as usize;
        let uvs = &mesh.face_uvs[fi];
        for py in y0..y1 {
            for px in x0..x1 {
                let pc = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = edge(scr[1], scr[2], pc);
                let w1 = edge(scr[2], scr[0], pc);
                let w2 = edge(scr[0], scr[1], pc);
                let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                    || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
                if !inside {
                    continue;
                }
                let l = [w0 / area, w1 / area, w2 / area];
                let inv_z = l[0] / scr[0].2 + l[1] / scr[1].2 + l[2] / scr[2].2;
                let z = 1.0 / inv_z;
                let slot = &mut samples[py * w + px];
                if slot.map_or(true, |s| z < s.depth) {
                    let u = z * (l[0] * uvs[0][0] / scr[0].2
                        + l[1] * uvs[1][0] / scr[1].2
                        + l[2] * uvs[2][0] / scr[2].2);
                    let v = z * (l[0] * uvs[0][1] / scr[0].2
                        + l[1] * uvs[1][1] / scr[1].2
                        + l[2] * uvs[2][1] / scr[2].2);
                    *slot = Some(PixelSample {
                        face: fi,
                        uv: [u, v],
                        depth: z,
                        normal: n,
                    });
                }
            }
        }
    }
    Ok(SampleMap {
        height: h,
        width: w,
        samples,
    })
}

/// Full render: color, silhouette, depth, normals.
pub fn rasterize(
    mesh: &Mesh,
    texture: &TextureMap,
    pose: &CameraPose,
    image_size: (usize, usize),
) -> Result<RenderOutput> {
    let map = rasterize_geometry(mesh, pose, image_size, DEFAULT_FOV_DEG)?;
    Ok(RenderOutput {
        color: map.shade(texture),
        silhouette: map.silhouette(),
        depth: map.depth(),
        normals: map.normals(),
    })
}

/// Gradient of sum(color ⊙ upstream) with respect to the texels.
pub fn texture_gradient(
    mesh: &Mesh,
    texture: &TextureMap,
    pose: &CameraPose,
    image_size: (usize, usize),
    upstream: &Array3<f64>,
) -> Result<Array3<f64>> {
    let map = rasterize_geometry(mesh, pose, image_size, DEFAULT_FOV_DEG)?;
    map.scatter_texture_grad(texture.resolution(), upstream)
}

// ---- OBJ subset I/O (v, vt, f with texture indices) ----

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut vts: Vec<[f64; 2]> = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let err = |line: usize, reason: String| Error::MalformedMesh {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next().unwrap() {
            "v" => {
                let coords: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(line_no, format!("bad vertex: {e}")))?;
                if coords.len() < 3 {
                    return Err(err(line_no, "vertex needs 3 coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            "vt" => {
                let coords: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(line_no, format!("bad texcoord: {e}")))?;
                if coords.len() < 2 {
                    return Err(err(line_no, "texcoord needs 2 coordinates".into()));
                }
                // wrap into [0,1] by fractional part
                vts.push([coords[0].rem_euclid(1.0), coords[1].rem_euclid(1.0)]);
            }
            "f" => {
                let mut vi = Vec::new();
                let mut ti = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let v: i64 = parts
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|e| err(line_no, format!("bad face index: {e}")))?;
                    let t: i64 = parts
                        .next()
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| {
                            err(line_no, "face vertex missing texture index".into())
                        })?
                        .parse()
                        .map_err(|e| err(line_no, format!("bad texture index: {e}")))?;
                    if v < 1 {
                        return Err(err(
                            line_no,
                            format!("vertex index {v} invalid; OBJ indices are 1-based"),
                        ));
                    }
                    if t < 1 {
                        return Err(err(
                            line_no,
                            format!("texture index {t} invalid; OBJ indices are 1-based"),
                        ));
                    }
                    let (v, t) = (v as usize - 1, t as usize - 1);
                    if v >= vertices.len() {
                        return Err(err(line_no, format!("vertex index {} out of range", v + 1)));
                    }
                    if t >= vts.len() {
                        return Err(err(
                            line_no,
                            format!("face references missing vt {}", t + 1),
                        ));
                    }
                    vi.push(v);
                    ti.push(t);
                }
                if vi.len() < 3 {
                    return Err(err(line_no, "face needs at least 3 vertices".into()));
                }
                // fan triangulation
                for k in 1..vi.len() - 1 {
                    faces.push([vi[0], vi[k], vi[k + 1]]);
                    face_uvs.push([vts[ti[0]], vts[ti[k]], vts[ti[k + 1]]]);
                }
            }
            "vn" | "o" | "g" | "s" | "usemtl" | "mtllib" => {}
            other => {
                return Err(err(line_no, format!("unsupported directive '{other}'")));
            }
        }
    }
    let mesh = Mesh {
        vertices,
        faces,
        face_uvs,
    };
    mesh.validate().map_err(|e| Error::MalformedMesh {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(mesh)
}

pub fn save_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    // one vt per face corner; simple and lossless for small meshes
    for uvs in &mesh.face_uvs {
        for uv in uvs {
            out.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
        }
    }
    for (fi, face) in mesh.faces.iter().enumerate() {
        let t0 = fi * 3 + 1;
        out.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            face[0] + 1,
            t0,
            face[1] + 1,
            t0 + 1,
            face[2] + 1,
            t0 + 2
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- small vector helpers ----

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}
