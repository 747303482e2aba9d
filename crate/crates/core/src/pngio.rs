//! PNG I/O for images and masks.
//!
//! Images are 8-bit RGB on disk, linearized to `[0,1]` by `/255` in memory.
//! Masks are 8-bit grayscale with values restricted to `{0, 255}`.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub fn save_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(H, W, 3)".into(),
            got: format!("({h}, {w}, {c})"),
        });
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(img[[y, x, 0]]),
                to_u8(img[[y, x, 1]]),
                to_u8(img[[y, x, 2]]),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)
        .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Masks are stored as grayscale PNG with 0 = vehicle, 255 = background.
pub fn save_mask(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = mask[[y, x]];
            out.put_pixel(x as u32, y as u32, image::Luma([if v > 0.5 { 255 } else { 0 }]));
        }
    }
    out.save(path)
        .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

/// Loads a binary mask; any gray value other than 0 or 255 is an invariant violation.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = match px.0[0] {
            0 => 0.0,
            255 => 1.0,
            v => {
                return Err(Error::InvariantViolation(format!(
                    "mask {} has non-binary value {v} at ({x}, {y})",
                    path.display()
                )))
            }
        };
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn mask_roundtrip_and_nonbinary_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);

        let gray = GrayImage::from_pixel(2, 2, image::Luma([128]));
        let g = dir.path().join("gray.png");
        gray.save(&g).unwrap();
        assert!(matches!(
            load_mask(&g),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn rgb_quantization_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| {
            ((y * 5 + x) * 3 + c) as f64 / 60.0
        });
        save_rgb(&p, &img).unwrap();
        let back = load_rgb(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
