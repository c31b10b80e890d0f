//! Radix-2 FFT over split real/imaginary planes.
//!
//! Sizes are restricted to powers of two and both directions carry the
//! unitary 1/sqrt(N) normalization, so forward-then-inverse is the identity
//! and Parseval holds without bookkeeping. Twiddles are evaluated in f64
//! before casting to the working scalar.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Size(format!(
            "{what} extent {n} is not a power of two"
        )));
    }
    Ok(())
}

/// Twiddle factors for a length-`n` transform: e^{-2 pi i k / n} (forward).
fn twiddles<T: Scalar>(n: usize, inverse: bool) -> (Vec<T>, Vec<T>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re = Vec::with_capacity(n / 2);
    let mut im = Vec::with_capacity(n / 2);
    for k in 0..n / 2 {
        let ang = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        re.push(T::of(ang.cos()));
        im.push(T::of(ang.sin()));
    }
    (re, im)
}

/// In-place 1-D transform of `re`/`im` (length must be a power of two).
/// No normalization; the caller scales.
fn fft1<T: Scalar>(re: &mut [T], im: &mut [T], tw_re: &[T], tw_im: &[T]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // bit reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        let mut base = 0;
        while base < n {
            for k in 0..half {
                let wr = tw_re[k * step];
                let wi = tw_im[k * step];
                let i = base + k;
                let j = i + half;
                let tr = re[j] * wr - im[j] * wi;
                let ti = re[j] * wi + im[j] * wr;
                re[j] = re[i] - tr;
                im[j] = im[i] - ti;
                re[i] = re[i] + tr;
                im[i] = im[i] + ti;
            }
            base += len;
        }
        len <<= 1;
    }
}

/// Unitary 2-D FFT over row-major `h x w` planes, in place.
pub fn fft2<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) -> Result<()> {
    check_pow2(h, "height")?;
    check_pow2(w, "width")?;
    if re.len() != h * w || im.len() != h * w {
        return Err(Error::Dimension(format!(
            "plane buffers of {} do not match {h}x{w}",
            re.len()
        )));
    }
    let (twr_w, twi_w) = twiddles::<T>(w, inverse);
    for r in 0..h {
        fft1(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], &twr_w, &twi_w);
    }
    let (twr_h, twi_h) = twiddles::<T>(h, inverse);
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + c];
            col_im[r] = im[r * w + c];
        }
        fft1(&mut col_re, &mut col_im, &twr_h, &twi_h);
        for r in 0..h {
            re[r * w + c] = col_re[r];
            im[r * w + c] = col_im[r];
        }
    }
    let scale = T::of(1.0 / ((h * w) as f64).sqrt());
    for v in re.iter_mut() {
        *v = *v * scale;
    }
    for v in im.iter_mut() {
        *v = *v * scale;
    }
    Ok(())
}

/// FFT bin frequency in cycles per meter for index `k` of `n` samples at
/// pitch `pitch` (DC at index 0, negative frequencies in the upper half).
pub fn bin_frequency(k: usize, n: usize, pitch: f64) -> f64 {
    let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 * pitch)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(N^2) reference DFT with the same unitary convention.
    fn dft2_naive(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut out_re = vec![0.0; h * w];
        let mut out_im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut sr = 0.0;
                let mut si = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let ang = sign
                            * 2.0
                            * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        let (c, s) = (ang.cos(), ang.sin());
                        let a = re[y * w + x];
                        let b = im[y * w + x];
                        sr += a * c - b * s;
                        si += a * s + b * c;
                    }
                }
                let scale = 1.0 / ((h * w) as f64).sqrt();
                out_re[u * w + v] = sr * scale;
                out_im[u * w + v] = si * scale;
            }
        }
        (out_re, out_im)
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mut re = vec![0.0f64; 12];
        let mut im = vec![0.0f64; 12];
        assert!(fft2(&mut re, &mut im, 3, 4, false).is_err());
    }

    #[test]
    fn dc_impulse() {
        // all-ones 4x4 -> single DC bin of amplitude 4 under unitary scaling
        let mut re = vec![1.0f64; 16];
        let mut im = vec![0.0f64; 16];
        fft2(&mut re, &mut im, 4, 4, false).unwrap();
        assert!((re[0] - 4.0).abs() < 1e-12);
        for k in 1..16 {
            assert!(re[k].abs() < 1e-12 && im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng_state = 0x12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (h, w) = (8, 4);
        let re0: Vec<f64> = (0..h * w).map(|_| next()).collect();
        let im0: Vec<f64> = (0..h * w).map(|_| next()).collect();
        for inverse in [false, true] {
            let mut re = re0.clone();
            let mut im = im0.clone();
            fft2(&mut re, &mut im, h, w, inverse).unwrap();
            let (nre, nim) = dft2_naive(&re0, &im0, h, w, inverse);
            for k in 0..h * w {
                assert!((re[k] - nre[k]).abs() < 1e-10, "re mismatch at {k}");
                assert!((im[k] - nim[k]).abs() < 1e-10, "im mismatch at {k}");
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng_state = 0xdeadbeefu64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (h, w) = (16, 16);
        let re0: Vec<f64> = (0..h * w).map(|_| next()).collect();
        let im0: Vec<f64> = (0..h * w).map(|_| next()).collect();
        let energy0: f64 = re0.iter().zip(&im0).map(|(a, b)| a * a + b * b).sum();

        let mut re = re0.clone();
        let mut im = im0.clone();
        fft2(&mut re, &mut im, h, w, false).unwrap();
        let energy1: f64 = re.iter().zip(&im).map(|(a, b)| a * a + b * b).sum();
        assert!((energy0 - energy1).abs() / energy0 < 1e-12);

        fft2(&mut re, &mut im, h, w, true).unwrap();
        for k in 0..h * w {
            assert!((re[k] - re0[k]).abs() < 1e-12);
            assert!((im[k] - im0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_frequencies() {
        assert_eq!(bin_frequency(0, 8, 1e-6), 0.0);
        assert!((bin_frequency(1, 8, 1e-6) - 125000.0).abs() < 1e-6);
        assert!((bin_frequency(7, 8, 1e-6) + 125000.0).abs() < 1e-6);
    }
}
