//! PNG import/export for images, phase holograms and energy maps.
//!
//! Conventions:
//! - images are `[H,W]` (gray) or `[3,H,W]` (RGB) tensors in `[0,1]`,
//! - phase holograms map `[0, 2*pi)` to `[0, 65535]` in 16-bit gray:
//!   `v = floor(wrap(phi) / (2*pi) * 65536)`, clamped to 65535,
//! - energy maps are tone-mapped to 8-bit with
//!   `v = round(255 * ln(1 + alpha*E/E_max) / ln(1 + alpha))`, `alpha = 1e4`,
//!   after shifting DC to the center.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wave::fftshift2;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use std::path::Path;

fn img_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn to_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Saves `[H,W]` data in `[0,1]` as 8-bit grayscale.
pub fn save_gray8<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = to_unit(t.data()[y as usize * w + x as usize].to_f64_c());
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Saves `[H,W]` data in `[0,1]` as 16-bit grayscale.
pub fn save_gray16<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = to_unit(t.data()[y as usize * w + x as usize].to_f64_c());
        Luma([(v * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Saves a phase plane (radians, any real values) as 16-bit grayscale.
pub fn save_phase_png16<T: Scalar>(phase: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = plane_dims(phase)?;
    let tau = std::f64::consts::TAU;
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let p = phase.data()[y as usize * w + x as usize].to_f64_c();
        let wrapped = p.rem_euclid(tau);
        Luma([((wrapped / tau * 65536.0).floor() as u32).min(65535) as u16])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Loads a 16-bit phase PNG back to radians in `[0, 2*pi)`.
pub fn load_phase_png16<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(&[h as usize, w as usize], |i| {
        T::of(img.as_raw()[i] as f64 / 65536.0 * std::f64::consts::TAU)
    }))
}

/// Saves `[3,H,W]` data in `[0,1]` as 16-bit RGB.
pub fn save_rgb16<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = rgb_dims(t)?;
    let hw = h * w;
    let img = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| {
            (to_unit(t.data()[c * hw + i].to_f64_c()) * 65535.0).round() as u16
        };
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Saves `[3,H,W]` data in `[0,1]` as 8-bit RGB.
pub fn save_rgb8<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = rgb_dims(t)?;
    let hw = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (to_unit(t.data()[c * hw + i].to_f64_c()) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Loads an RGB PNG (8- or 16-bit) as `[3,H,W]` in `[0,1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_rgb16();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data_mut()[c * h * w + y * w + x] = T::of(px.0[c] as f64 / 65535.0);
            }
        }
    }
    Ok(t)
}

/// Tone-maps a normalized energy map to 8-bit after centering DC.
pub fn save_energy_log8<T: Scalar>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = plane_dims(map)?;
    let shifted = fftshift2(map);
    let e_max = shifted.data().iter().fold(0.0f64, |a, &b| a.max(b.to_f64_c()));
    let alpha = 1e4f64;
    let denom = (1.0 + alpha).ln();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let e = shifted.data()[y as usize * w + x as usize].to_f64_c();
        let v = if e_max > 0.0 {
            (255.0 * (1.0 + alpha * e / e_max).ln() / denom).round()
        } else {
            0.0
        };
        Luma([v.clamp(0.0, 255.0) as u8])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

/// Tiles gray images side by side (2-px white gap) for comparison strips.
pub fn save_comparison_strip<T: Scalar>(tiles: &[&Tensor<T>], path: &Path) -> Result<()> {
    if tiles.is_empty() {
        return Err(Error::Dimension("empty comparison strip".into()));
    }
    let (h, w) = plane_dims(tiles[0])?;
    for t in tiles {
        if plane_dims(t)? != (h, w) {
            return Err(Error::Dimension("strip tiles must share extents".into()));
        }
    }
    let gap = 2usize;
    let total_w = tiles.len() * w + (tiles.len() - 1) * gap;
    let img = GrayImage::from_fn(total_w as u32, h as u32, |x, y| {
        let x = x as usize;
        let slot = x / (w + gap);
        let off = x - slot * (w + gap);
        if off >= w {
            Luma([255u8])
        } else {
            let v = to_unit(tiles[slot].data()[y as usize * w + off].to_f64_c());
            Luma([(v * 255.0).round() as u8])
        }
    });
    img.save(path).map_err(|e| img_err(path, e))
}

fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "expected [H,W] plane; got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn rgb_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 3 || t.shape()[0] != 3 {
        return Err(Error::Dimension(format!(
            "expected [3,H,W] image; got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[1], t.shape()[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phase.png");
        let phase = Tensor::<f64>::from_fn(&[8, 8], |i| i as f64 * 0.37 - 3.0);
        save_phase_png16(&phase, &path).unwrap();
        let back: Tensor<f64> = load_phase_png16(&path).unwrap();
        let tau = std::f64::consts::TAU;
        for (a, b) in phase.data().iter().zip(back.data()) {
            let diff = (a.rem_euclid(tau) - b).abs();
            assert!(diff < tau / 65536.0 + 1e-9, "quantization step bound");
        }
    }

    #[test]
    fn rgb_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = Tensor::<f32>::from_fn(&[3, 4, 5], |i| (i as f32 * 0.013) % 1.0);
        save_rgb16(&img, &path).unwrap();
        let back: Tensor<f32> = load_rgb(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 65535.0 + 1e-6);
        }
    }
}
