//! Image quality metrics and the analysis tooling: PSNR, SSIM, offset
//! statistics by depth interval, and depth-of-field trend measurements.

use crate::error::{Error, Result};
use crate::net::OffsetField;
use crate::optics::PupilSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wave::OpticalConfig;

/// Capped PSNR reported for identical inputs.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

/// Out-of-focus mask threshold for DoF trend measurements, in CoC pixels.
pub const OOF_COC_THRESHOLD_PX: f64 = 2.0;

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "psnr shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_c() - y.to_f64_c();
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_SENTINEL_DB))
}

/// PSNR with a per-pixel weight map (e.g. the in-focus CoC weights); the
/// weighted MSE is normalized by the weight sum.
pub fn weighted_psnr<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    weights: &Tensor<T>,
    peak: f64,
) -> Result<f64> {
    if a.shape() != b.shape() || a.shape() != weights.shape() {
        return Err(Error::Dimension(format!(
            "weighted_psnr shapes {:?}, {:?}, {:?}",
            a.shape(),
            b.shape(),
            weights.shape()
        )));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..a.numel() {
        let w = weights.data()[i].to_f64_c();
        let d = a.data()[i].to_f64_c() - b.data()[i].to_f64_c();
        num += w * d * d;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Domain("weighted_psnr with all-zero weights".into()));
    }
    let mse = num / den;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_SENTINEL_DB))
}

/// Normalized 11x11 Gaussian window with sigma 1.5 (the standard SSIM
/// window), evaluated in f64.
fn ssim_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid region only (output is (H-10)x(W-10)).
fn gauss_filter_valid(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = ssim_window();
    let wv = w - 10;
    // horizontal pass
    let mut tmp = vec![0.0; h * wv];
    for r in 0..h {
        for c in 0..wv {
            let mut acc = 0.0;
            for (k, &g) in win.iter().enumerate() {
                acc += g * img[r * w + c + k];
            }
            tmp[r * wv + c] = acc;
        }
    }
    let hv = h - 10;
    let mut out = vec![0.0; hv * wv];
    for r in 0..hv {
        for c in 0..wv {
            let mut acc = 0.0;
            for (k, &g) in win.iter().enumerate() {
                acc += g * tmp[(r + k) * wv + c];
            }
            out[r * wv + c] = acc;
        }
    }
    out
}

/// Mean structural similarity over valid 11x11 Gaussian windows, with the
/// standard constants K1 = 0.01, K2 = 0.03 on the given dynamic range.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "ssim wants matching [H,W]; got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < 11 || w < 11 {
        return Err(Error::Size(format!(
            "ssim needs at least 11x11 images; got {h}x{w}"
        )));
    }
    let af: Vec<f64> = a.data().iter().map(|v| v.to_f64_c()).collect();
    let bf: Vec<f64> = b.data().iter().map(|v| v.to_f64_c()).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let mu_a = gauss_filter_valid(&af, h, w);
    let mu_b = gauss_filter_valid(&bf, h, w);
    let m_aa = gauss_filter_valid(&aa, h, w);
    let m_bb = gauss_filter_valid(&bb, h, w);
    let m_ab = gauss_filter_valid(&ab, h, w);

    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean forward-difference gradient magnitude over an optional mask.
pub fn sharpness_masked<T: Scalar>(img: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<f64> {
    if img.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "sharpness wants [H,W]; got {:?}",
            img.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != img.shape() {
            return Err(Error::Dimension("mask shape mismatch".into()));
        }
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let at = |r: usize, c: usize| img.data()[r * w + c].to_f64_c();
    let mut total = 0.0;
    let mut count = 0.0;
    for r in 0..h {
        for c in 0..w {
            if let Some(m) = mask {
                if m.data()[r * w + c] <= T::zero() {
                    continue;
                }
            }
            let gx = if c + 1 < w { at(r, c + 1) - at(r, c) } else { 0.0 };
            let gy = if r + 1 < h { at(r + 1, c) - at(r, c) } else { 0.0 };
            total += gx.abs() + gy.abs();
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::Domain("sharpness mask selects no pixels".into()));
    }
    Ok(total / count)
}

/// Binary mask of out-of-focus pixels (CoC above [`OOF_COC_THRESHOLD_PX`]).
pub fn out_of_focus_mask<T: Scalar>(coc_px: &Tensor<T>) -> Tensor<T> {
    let thr = T::of(OOF_COC_THRESHOLD_PX);
    coc_px.map(|c| if c > thr { T::one() } else { T::zero() })
}

/// Binary mask of in-focus pixels (CoC at or below 1 px).
pub fn in_focus_mask<T: Scalar>(coc_px: &Tensor<T>) -> Tensor<T> {
    let thr = T::one();
    coc_px.map(|c| if c <= thr { T::one() } else { T::zero() })
}

/// Per-depth-interval offset statistics.
#[derive(Debug, Clone)]
pub struct OffsetStats {
    /// Mean |offset| per interval, normalized by the per-pupil maximum.
    pub bin_means: [f64; 5],
    /// Pixels counted per interval (sums to the depth-map pixel count).
    pub bin_counts: [usize; 5],
    pub pupil_mm: f64,
}

/// Mean |offset| per depth interval for one pupil size. The depth range is
/// split into five equal diopter intervals; depth is resampled to each
/// offset field's resolution by nearest neighbor. Means are normalized by
/// the largest interval mean so curves for different pupils are comparable.
pub fn offset_depth_statistics<T: Scalar>(
    offsets: &[OffsetField<T>],
    depth: &Tensor<T>,
    pupil: &PupilSpec<T>,
    cfg: &OpticalConfig<T>,
) -> Result<OffsetStats> {
    if depth.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "depth map wants [H,W]; got {:?}",
            depth.shape()
        )));
    }
    let (dh, dw) = (depth.shape()[0], depth.shape()[1]);
    let lo = 1.0 / cfg.depth_far.to_f64_c();
    let hi = 1.0 / cfg.depth_near.to_f64_c();
    let bin_of = |d: f64| -> usize {
        let t = ((1.0 / d - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((t * 5.0) as usize).min(4)
    };
    let mut sums = [0.0f64; 5];
    let mut counts = [0usize; 5];
    // populations are counted once, at the depth-map resolution
    for &d in depth.data() {
        counts[bin_of(d.to_f64_c())] += 1;
    }
    let mut weight = [0.0f64; 5];
    for field in offsets {
        let s = field.data.shape();
        let (ch, fh, fw) = (s[0], s[1], s[2]);
        for r in 0..fh {
            for c in 0..fw {
                let dr = (r * dh / fh).min(dh - 1);
                let dc = (c * dw / fw).min(dw - 1);
                let b = bin_of(depth.data()[dr * dw + dc].to_f64_c());
                let mut mag = 0.0;
                for k in 0..ch {
                    mag += field.data.data()[(k * fh + r) * fw + c].to_f64_c().abs();
                }
                sums[b] += mag / ch as f64;
                weight[b] += 1.0;
            }
        }
    }
    let mut means = [0.0f64; 5];
    for i in 0..5 {
        if weight[i] > 0.0 {
            means[i] = sums[i] / weight[i];
        }
    }
    let max = means.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for m in &mut means {
            *m /= max;
        }
    }
    Ok(OffsetStats {
        bin_means: means,
        bin_counts: counts,
        pupil_mm: pupil.diameter_mm.to_f64_c(),
    })
}

/// One row of a DoF sweep: sharpness of out-of-focus/in-focus regions at a
/// given pupil size.
#[derive(Debug, Clone, Copy)]
pub struct DofPoint {
    pub pupil_mm: f64,
    pub oof_sharpness: f64,
    pub if_sharpness: f64,
}

/// CSV for offset statistics: `pupil_mm, bin, mean_offset, population`.
pub fn offset_stats_csv(stats: &[OffsetStats]) -> String {
    let mut out = String::from("pupil_mm,bin,mean_offset,population\n");
    for s in stats {
        for b in 0..5 {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.pupil_mm, b, s.bin_means[b], s.bin_counts[b]
            ));
        }
    }
    out
}

/// CSV for the DoF sweep: `pupil_mm, oof_sharpness, if_sharpness`.
pub fn dof_trend_csv(points: &[DofPoint]) -> String {
    let mut out = String::from("pupil_mm,oof_sharpness,if_sharpness\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.pupil_mm, p.oof_sharpness, p.if_sharpness
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    #[test]
    fn psnr_formula() {
        // MSE = 0.01 at peak 1 -> 20 dB
        let a = Tensor::<f64>::zeros(&[10, 10]);
        let b = Tensor::<f64>::full(&[10, 10], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_identical_sentinel() {
        let a = Tensor::<f64>::full(&[4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_SENTINEL_DB);
    }

    #[test]
    fn psnr_symmetric_and_matches_loop() {
        let mut rng = sub_rng(11, "metrics-test", 0);
        let a = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&b, &a, 1.0).unwrap();
        assert_eq!(p1, p2);
        let mut mse = 0.0;
        for i in 0..64 {
            let d = a.data()[i] - b.data()[i];
            mse += d * d;
        }
        mse /= 64.0;
        assert!((p1 - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = sub_rng(12, "metrics-test", 1);
        let a = Tensor::<f64>::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_luminance_shift_below_one() {
        let a = Tensor::<f64>::full(&[16, 16], 0.25);
        let b = a.map(|v| (v + 0.5).min(1.0));
        assert!(ssim(&a, &b, 1.0).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[8, 8]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn offset_bins_partition() {
        let cfg = OpticalConfig::<f64>::default();
        let mut rng = sub_rng(13, "metrics-test", 2);
        let depth = Tensor::<f64>::rand_uniform(&[16, 16], 0.35, 0.70, &mut rng);
        let offsets = vec![OffsetField {
            data: Tensor::<f64>::zeros(&[18, 8, 8]),
        }];
        let stats =
            offset_depth_statistics(&offsets, &depth, &PupilSpec::centered(2.0), &cfg).unwrap();
        assert_eq!(stats.bin_counts.iter().sum::<usize>(), 256);
        assert!(stats.bin_means.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn offset_synthetic_u_shape() {
        // inject |1/d - 1/d_mid|: near/far bins must exceed the middle bin
        let cfg = OpticalConfig::<f64>::default();
        let n = 64;
        let depth = Tensor::<f64>::from_fn(&[1, n], |i| {
            let t = i as f64 / (n - 1) as f64;
            1.0 / (1.0 / 0.70 + t * (1.0 / 0.35 - 1.0 / 0.70))
        });
        let d_mid = 2.0 / (1.0 / 0.35 + 1.0 / 0.70);
        let mut off = Tensor::<f64>::zeros(&[18, 1, n]);
        for c in 0..n {
            let d = depth.data()[c];
            let v = (1.0 / d - 1.0 / d_mid).abs();
            for k in 0..18 {
                off.data_mut()[k * n + c] = v;
            }
        }
        let stats = offset_depth_statistics(
            &[OffsetField { data: off }],
            &depth,
            &PupilSpec::centered(3.0),
            &cfg,
        )
        .unwrap();
        assert!(stats.bin_means[0] > stats.bin_means[2]);
        assert!(stats.bin_means[4] > stats.bin_means[2]);
        assert!((stats.bin_means.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharpness_detects_blur() {
        let mut rng = sub_rng(14, "metrics-test", 3);
        let sharp = Tensor::<f64>::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng);
        let blurred = crate::scene::disc_blur(&sharp, 5.0).unwrap();
        let s1 = sharpness_masked(&sharp, None).unwrap();
        let s2 = sharpness_masked(&blurred, None).unwrap();
        assert!(s2 < s1);
    }
}
