//! Minimal CPU layers with hand-written backward passes.
//!
//! Feature maps are (H, W, C) f64 arrays. Convolutions run through im2col +
//! matrix multiply so the inner loops hit `ndarray`'s gemm. Every layer is a
//! pure function of (params, input); backward passes return both the input
//! gradient and the parameter gradients.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::mesh_render::uniform01;

/// 2D convolution, kernel laid out as (kh, kw, c_in, c_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    /// He-style init scaled by fan-in; weights from a symmetric uniform.
    pub fn new(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl RngCore,
    ) -> Self {
        let fan_in = (kh * kw * c_in) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((kh, kw, c_in, c_out), |_| {
            (uniform01(rng) * 2.0 - 1.0) * bound
        });
        Conv2d {
            w,
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw, _, _) = self.w.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (h, w, c) = x.dim();
        let (kh, kw, _, _) = self.w.dim();
        let (ho, wo) = self.out_size(h, w);
        let mut cols = Array2::zeros((ho * wo, kh * kw * c));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
                let mut col = 0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                        if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                            for ci in 0..c {
                                cols[[row, col + ci]] = x[[iy as usize, ix as usize, ci]];
                            }
                        }
                        col += c;
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, c_in) = x.dim();
        let (kh, kw, wc_in, c_out) = self.w.dim();
        assert_eq!(c_in, wc_in, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let cols = self.im2col(x);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((kh * kw * c_in, c_out))
            .unwrap()
            .to_owned();
        let mut y = cols.dot(&wmat);
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y.into_shape_with_order((ho, wo, c_out)).unwrap()
    }

    /// Returns (dL/dx, parameter grads) for upstream dL/dy.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, Conv2dGrad) {
        let (h, w, c_in) = x.dim();
        let (kh, kw, _, c_out) = self.w.dim();
        let (ho, wo) = self.out_size(h, w);
        assert_eq!(dy.dim(), (ho, wo, c_out), "conv upstream shape");
        let cols = self.im2col(x);
        let dy_mat = dy
            .view()
            .into_shape_with_order((ho * wo, c_out))
            .unwrap()
            .to_owned();
        let dw_mat = cols.t().dot(&dy_mat);
        let dw = dw_mat
            .into_shape_with_order((kh, kw, c_in, c_out))
            .unwrap();
        let db = dy_mat.sum_axis(ndarray::Axis(0));
        let wmat = self
            .w
            .view()
            .into_shape_with_order((kh * kw * c_in, c_out))
            .unwrap()
            .to_owned();
        let dcols = dy_mat.dot(&wmat.t());
        // col2im scatter
        let mut dx = Array3::zeros((h, w, c_in));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
                let mut col = 0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                        if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                            for ci in 0..c_in {
                                dx[[iy as usize, ix as usize, ci]] += dcols[[row, col + ci]];
                            }
                        }
                        col += c_in;
                    }
                }
            }
        }
        (dx, Conv2dGrad { w: dw, b: db })
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softplus(v: f64) -> f64 {
    // numerically stable log(1 + e^v)
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((h * 2, w * 2, c), |(y, xx, ci)| x[[y / 2, xx / 2, ci]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (h2, w2, c) = dy.dim();
    let mut dx = Array3::zeros((h2 / 2, w2 / 2, c));
    for y in 0..h2 {
        for x in 0..w2 {
            for ci in 0..c {
                dx[[y / 2, x / 2, ci]] += dy[[y, x, ci]];
            }
        }
    }
    dx
}

/// Adam with lazily allocated moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over an ordered list of (param, grad) slices. The list must
    /// have the same length and order on every call.
    pub fn step(&mut self, params_and_grads: &mut [(&mut [f64], &[f64])]) {
        if self.m.is_empty() {
            for (p, _) in params_and_grads.iter() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        assert_eq!(self.m.len(), params_and_grads.len(), "adam param list");
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params_and_grads.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- checkpoint container ----
//
// Self-describing binary: magic, format version, JSON architecture header,
// then f64 little-endian tensors in header order.

const CKPT_MAGIC: &[u8; 4] = b"UVCK";
pub const CKPT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<Vec<f64>>,
}

pub fn save_checkpoint(path: &Path, header: &serde_json::Value, tensors: &[&[f64]]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u32::<LittleEndian>(CKPT_VERSION).unwrap();
    let header_bytes = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    buf.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .unwrap();
    buf.extend_from_slice(&header_bytes);
    buf.write_u64::<LittleEndian>(tensors.len() as u64).unwrap();
    for t in tensors {
        buf.write_u64::<LittleEndian>(t.len() as u64).unwrap();
        for &v in *t {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::Cursor::new(data);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let header: serde_json::Value =
        serde_json::from_slice(&hbytes).map_err(|e| Error::Format(e.to_string()))?;
    let ntensors = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))? as usize;
    let mut tensors = Vec::with_capacity(ntensors);
    for _ in 0..ntensors {
        let len = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Format("checkpoint truncated".into()))? as usize;
        let mut t = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut t)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        tensors.push(t);
    }
    Ok(Checkpoint { header, tensors })
}

/// Flattens conv params into the checkpoint tensor list (w then b).
pub fn conv_tensors<'a>(conv: &'a Conv2d, out: &mut Vec<&'a [f64]>) {
    out.push(conv.w.as_slice().unwrap());
    out.push(conv.b.as_slice().unwrap());
}

pub fn conv_from_tensors(
    conv: &mut Conv2d,
    tensors: &[Vec<f64>],
    cursor: &mut usize,
) -> Result<()> {
    let w = &tensors[*cursor];
    let b = &tensors[*cursor + 1];
    *cursor += 2;
    if w.len() != conv.w.len() || b.len() != conv.b.len() {
        return Err(Error::Format("checkpoint tensor size mismatch".into()));
    }
    conv.w.as_slice_mut().unwrap().copy_from_slice(w);
    conv.b.as_slice_mut().unwrap().copy_from_slice(b);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check_conv(stride: usize, pad: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::new(3, 3, 2, 3, stride, pad, &mut rng);
        let x = Array3::from_shape_fn((6, 5, 2), |_| uniform01(&mut rng));
        let y = conv.forward(&x);
        let dy = Array3::from_shape_fn(y.dim(), |_| uniform01(&mut rng) - 0.5);
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x) * &dy).sum();
        let (dx, grads) = conv.backward(&x, &dy);
        let h = 1e-6;
        // input gradient
        for idx in [(0, 0, 0), (3, 2, 1), (5, 4, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx at {idx:?}: {fd} vs {}", dx[idx]);
        }
        // weight gradient
        for idx in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 2, 0, 1)] {
            let mut cp = conv.clone();
            cp.w[idx] += h;
            let mut cm = conv.clone();
            cm.w[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!(
                (fd - grads.w[idx]).abs() < 1e-6,
                "dw at {idx:?}: {fd} vs {}",
                grads.w[idx]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        fd_check_conv(1, 1);
        fd_check_conv(2, 1);
    }

    #[test]
    fn upsample_backward_is_sum_pool() {
        let x = Array3::from_shape_fn((2, 2, 1), |(y, xx, _)| (y * 2 + xx) as f64);
        let up = upsample2(&x);
        assert_eq!(up[[0, 1, 0]], 0.0);
        assert_eq!(up[[3, 3, 0]], 3.0);
        let dy = Array3::ones((4, 4, 1));
        let dx = upsample2_backward(&dy);
        assert_eq!(dx[[0, 0, 0]], 4.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let header = serde_json::json!({"arch": "test", "layers": [1, 2]});
        let t0 = vec![1.0, -2.5, 3.25];
        let t1 = vec![0.0; 4];
        save_checkpoint(&p, &header, &[&t0, &t1]).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.header["arch"], "test");
        assert_eq!(ck.tensors[0], t0);
        assert_eq!(ck.tensors[1], t1);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![5.0f64];
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0]];
            adam.step(&mut [(&mut p[..], &g[..])]);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
