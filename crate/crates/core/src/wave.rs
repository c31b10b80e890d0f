//! Coherent scalar wave propagation: band-limited angular-spectrum method,
//! double-phase encoding and finite-pupil viewing simulation.
//!
//! Differentiable paths run on the autodiff [`Tape`], carrying a complex
//! field as paired real planes `[2, H, W]`. Analysis-only helpers
//! ([`RawField`]) work on plain buffers.

use crate::error::{Error, Result};
use crate::fft;
use crate::optics::PupilSpec;
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Physical display constants. All lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalConfig<T> {
    /// Illumination wavelength.
    pub wavelength: T,
    /// SLM pixel pitch.
    pub pitch: T,
    /// Eyepiece focal length.
    pub eyepiece_focal: T,
    /// Lens-to-sensor distance of the thin-lens eye model.
    pub eye_sensor: T,
    /// Virtual-image depth range seen by the viewer.
    pub depth_near: T,
    pub depth_far: T,
    /// Sampling pitch of rendered focal images on the sensor plane; defines
    /// what "one pixel" of blur means.
    pub image_pitch: T,
}

impl<T: Scalar> Default for OpticalConfig<T> {
    fn default() -> Self {
        // 520 nm green laser on an 8 um SLM; invented desk-scale defaults.
        OpticalConfig {
            wavelength: T::of(520e-9),
            pitch: T::of(8e-6),
            eyepiece_focal: T::of(50e-3),
            eye_sensor: T::of(17e-3),
            depth_near: T::of(0.35),
            depth_far: T::of(0.70),
            image_pitch: T::of(8e-6),
        }
    }
}

impl<T: Scalar> OpticalConfig<T> {
    /// Eyebox side length at the eyepiece focal plane: lambda * f / pitch.
    pub fn eyebox_extent(&self) -> T {
        self.wavelength * self.eyepiece_focal / self.pitch
    }

    /// Variant used by the pupil-sampling study: finer pitch and longer
    /// focal length widen the eyebox so a 3x3 grid of 3-4 mm pupils fits.
    pub fn study_default() -> Self {
        OpticalConfig {
            pitch: T::of(4e-6),
            eyepiece_focal: T::of(60e-3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_pos = [
            self.wavelength,
            self.pitch,
            self.eyepiece_focal,
            self.eye_sensor,
            self.depth_near,
            self.depth_far,
            self.image_pitch,
        ]
        .iter()
        .all(|v| *v > T::zero());
        if !all_pos {
            return Err(Error::Domain("optical constants must be positive".into()));
        }
        if self.depth_near > self.depth_far {
            return Err(Error::Domain(format!(
                "depth range inverted: [{}, {}]",
                self.depth_near, self.depth_far
            )));
        }
        if self.depth_near < T::of(crate::optics::MIN_VIEW_DISTANCE) {
            return Err(Error::Domain(format!(
                "depth_near {} is closer than the 0.35 m viewing minimum",
                self.depth_near
            )));
        }
        Ok(())
    }
}

/// Band-limited ASM transfer function sampled on the FFT grid (DC at the
/// corner): `exp(j 2 pi d sqrt(1/lambda^2 - u^2))` inside the band
/// `|u| < 1/lambda`, zero outside.
#[derive(Debug, Clone)]
pub struct TransferFunction<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
    /// True for propagating (in-band) frequencies.
    pub band: Vec<bool>,
    pub distance: T,
    pub wavelength: T,
}

pub fn transfer_function<T: Scalar>(
    cfg: &OpticalConfig<T>,
    d: T,
    h: usize,
    w: usize,
) -> TransferFunction<T> {
    let lambda = cfg.wavelength.to_f64_c();
    let pitch = cfg.pitch.to_f64_c();
    let dist = d.to_f64_c();
    let inv_l2 = 1.0 / (lambda * lambda);
    let mut re = Tensor::zeros(&[h, w]);
    let mut im = Tensor::zeros(&[h, w]);
    let mut band = vec![false; h * w];
    for r in 0..h {
        let fy = fft::bin_frequency(r, h, pitch);
        for c in 0..w {
            let fx = fft::bin_frequency(c, w, pitch);
            let radial = fy * fy + fx * fx;
            if radial < inv_l2 {
                let arg = 2.0 * std::f64::consts::PI * dist * (inv_l2 - radial).sqrt();
                re.data_mut()[r * w + c] = T::of(arg.cos());
                im.data_mut()[r * w + c] = T::of(arg.sin());
                band[r * w + c] = true;
            }
        }
    }
    TransferFunction {
        re,
        im,
        band,
        distance: d,
        wavelength: cfg.wavelength,
    }
}

/// Complex wavefield on the tape, stored as stacked real/imaginary planes.
#[derive(Debug, Clone, Copy)]
pub struct ComplexField {
    /// `[2, H, W]`: plane 0 real, plane 1 imaginary.
    pub planes: Value,
}

impl ComplexField {
    pub fn from_planes<T: Scalar>(tape: &Tape<T>, planes: Value) -> Result<Self> {
        let s = tape.shape(planes);
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::Dimension(format!(
                "complex field wants [2,H,W]; got {s:?}"
            )));
        }
        Ok(ComplexField { planes })
    }

    /// Builds `A e^{j Phi}` from amplitude and phase planes.
    pub fn from_polar<T: Scalar>(tape: &Tape<T>, amp: Value, phase: Value) -> Result<Self> {
        let re = tape.mul(amp, tape.cos(phase))?;
        let im = tape.mul(amp, tape.sin(phase))?;
        Ok(ComplexField {
            planes: tape.stack0(&[re, im])?,
        })
    }

    pub fn re<T: Scalar>(&self, tape: &Tape<T>) -> Result<Value> {
        tape.index0(self.planes, 0)
    }

    pub fn im<T: Scalar>(&self, tape: &Tape<T>) -> Result<Value> {
        tape.index0(self.planes, 1)
    }

    /// |field|^2; the phase is discarded.
    pub fn intensity<T: Scalar>(&self, tape: &Tape<T>) -> Result<Value> {
        let re = self.re(tape)?;
        let im = self.im(tape)?;
        tape.add(tape.square(re), tape.square(im))
    }

    /// |field|, guarded by a tiny bias so the gradient stays finite at zero.
    pub fn amplitude<T: Scalar>(&self, tape: &Tape<T>) -> Result<Value> {
        let sq = self.intensity(tape)?;
        Ok(tape.sqrt(tape.add_scalar(sq, 1e-24)?))
    }

    /// Phase angle via atan2(im, re).
    pub fn phase<T: Scalar>(&self, tape: &Tape<T>) -> Result<Value> {
        let re = self.re(tape)?;
        let im = self.im(tape)?;
        tape.atan2(im, re)
    }

    pub fn shape_hw<T: Scalar>(&self, tape: &Tape<T>) -> (usize, usize) {
        let s = tape.shape(self.planes);
        (s[1], s[2])
    }

    /// Elementwise complex multiply with constant planes (e.g. a transfer
    /// function); `other` broadcasts per plane.
    fn mul_const_complex<T: Scalar>(
        &self,
        tape: &Tape<T>,
        re_c: Value,
        im_c: Value,
    ) -> Result<Self> {
        let re = self.re(tape)?;
        let im = self.im(tape)?;
        let out_re = tape.sub(tape.mul(re, re_c)?, tape.mul(im, im_c)?)?;
        let out_im = tape.add(tape.mul(re, im_c)?, tape.mul(im, re_c)?)?;
        Ok(ComplexField {
            planes: tape.stack0(&[out_re, out_im])?,
        })
    }
}

/// Free-space propagation by distance `d` (negative for backward) using the
/// band-limited angular spectrum method. Fully differentiable; energy inside
/// the band is conserved by unitarity.
pub fn asm_propagate<T: Scalar>(
    tape: &Tape<T>,
    field: &ComplexField,
    d: T,
    cfg: &OpticalConfig<T>,
) -> Result<ComplexField> {
    let (h, w) = field.shape_hw(tape);
    let tf = transfer_function(cfg, d, h, w);
    let spectrum = ComplexField {
        planes: tape.fft2(field.planes, false)?,
    };
    let re_c = tape.constant(tf.re);
    let im_c = tape.constant(tf.im);
    let filtered = spectrum.mul_const_complex(tape, re_c, im_c)?;
    Ok(ComplexField {
        planes: tape.fft2(filtered.planes, true)?,
    })
}

/// Intensity of a propagated hologram at SLM-side distance `u`.
pub fn reconstruct_intensity<T: Scalar>(
    tape: &Tape<T>,
    field: &ComplexField,
    u: T,
    cfg: &OpticalConfig<T>,
) -> Result<Value> {
    asm_propagate(tape, field, u, cfg)?.intensity(tape)
}

// ---- double-phase encoding -------------------------------------------------

/// Phase-only encoding of a complex field.
#[derive(Debug, Clone)]
pub struct DoublePhase<T> {
    /// Phase hologram, radians.
    pub phase: Tensor<T>,
    /// Amplitude scale divided out before encoding (for metrics).
    pub scale: T,
}

/// Separable 2-tap half-band average `(f[i] + f[i+1])/2` along both axes
/// (periodic boundary), the minimal filter suppressing the checkerboard
/// alias of double-phase encoding.
fn half_band_prefilter<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize) {
    let half = T::of(0.5);
    for buf in [&mut *re, &mut *im] {
        // rows
        for r in 0..h {
            let row = &mut buf[r * w..(r + 1) * w];
            let first = row[0];
            for c in 0..w - 1 {
                row[c] = (row[c] + row[c + 1]) * half;
            }
            row[w - 1] = (row[w - 1] + first) * half;
        }
        // columns
        for c in 0..w {
            let first = buf[c];
            for r in 0..h - 1 {
                buf[r * w + c] = (buf[r * w + c] + buf[(r + 1) * w + c]) * half;
            }
            buf[(h - 1) * w + c] = (buf[(h - 1) * w + c] + first) * half;
        }
    }
}

/// Anti-aliasing double-phase encoding: the field is low-pass pre-filtered,
/// then written as two interleaved pure phases `Phi +- acos(A)` on a
/// checkerboard. Amplitude must already be normalized to max(A) <= 1; use
/// [`normalize_amplitude`] and keep the returned scale.
pub fn double_phase_encode<T: Scalar>(
    amp: &Tensor<T>,
    phase: &Tensor<T>,
    scale: T,
) -> Result<DoublePhase<T>> {
    if amp.shape() != phase.shape() || amp.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "double_phase_encode wants matching [H,W] planes; got {:?} and {:?}",
            amp.shape(),
            phase.shape()
        )));
    }
    let tol = T::of(1.0 + 1e-6);
    if amp.data().iter().any(|&a| a > tol) {
        return Err(Error::Domain(
            "double_phase_encode amplitude exceeds 1 after normalization".into(),
        ));
    }
    let (h, w) = (amp.shape()[0], amp.shape()[1]);
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for i in 0..h * w {
        let a = amp.data()[i].min(T::one());
        let p = phase.data()[i];
        re[i] = a * p.cos();
        im[i] = a * p.sin();
    }
    half_band_prefilter(&mut re, &mut im, h, w);
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let a = (re[i] * re[i] + im[i] * im[i]).sqrt().min(T::one());
            let p = im[i].atan2(re[i]);
            let detour = a.acos();
            out.data_mut()[i] = if (r + c) % 2 == 0 { p + detour } else { p - detour };
        }
    }
    Ok(DoublePhase { phase: out, scale })
}

/// Divides out max(A) when above 1 so the field is encodable; returns the
/// scale factor (1 when no scaling was needed).
pub fn normalize_amplitude<T: Scalar>(amp: &mut Tensor<T>) -> T {
    let max = amp.data().iter().fold(T::zero(), |a, &b| a.max(b));
    if max > T::one() {
        for v in amp.data_mut() {
            *v = *v / max;
        }
        max
    } else {
        T::one()
    }
}

/// Simulates viewing a phase-only hologram: unit-amplitude field through a
/// hard half-band low-pass at the Fourier plane. Recovers the pre-filtered
/// complex field (times `scale`).
pub fn double_phase_decode_sim<T: Scalar>(dp: &DoublePhase<T>) -> Result<RawField<T>> {
    let (h, w) = (dp.phase.shape()[0], dp.phase.shape()[1]);
    let mut f = RawField::from_phase(&dp.phase)?;
    fft::fft2(&mut f.re, &mut f.im, h, w, false)?;
    for r in 0..h {
        for c in 0..w {
            // keep |signed bin| < N/4 in both axes
            let sr = if r <= h / 2 { r } else { h - r };
            let sc = if c <= w / 2 { c } else { w - c };
            if !(sr < h / 4 && sc < w / 4) {
                f.re[r * w + c] = T::zero();
                f.im[r * w + c] = T::zero();
            }
        }
    }
    fft::fft2(&mut f.re, &mut f.im, h, w, true)?;
    // the half-band mask keeps 1/4 of the area; restore signal gain
    let gain = T::of(dp.scale.to_f64_c());
    for i in 0..h * w {
        f.re[i] = f.re[i] * gain;
        f.im[i] = f.im[i] * gain;
    }
    Ok(f)
}

// ---- pupil viewing ----------------------------------------------------------

/// Binary pupil disc sampled on the eyebox plane (FFT bin k maps to the
/// physical coordinate `lambda * f * frequency(k)`), plus a flag set when the
/// pupil misses the eyebox entirely.
pub fn pupil_aperture<T: Scalar>(
    pupil: &PupilSpec<T>,
    cfg: &OpticalConfig<T>,
    h: usize,
    w: usize,
) -> Result<(Tensor<T>, bool)> {
    if pupil.diameter_mm < T::zero() {
        return Err(Error::Domain(format!(
            "pupil diameter {} mm must be non-negative",
            pupil.diameter_mm
        )));
    }
    let lf = cfg.wavelength.to_f64_c() * cfg.eyepiece_focal.to_f64_c();
    let pitch = cfg.pitch.to_f64_c();
    let (cx, cy) = pupil.center_m();
    let (cx, cy) = (cx.to_f64_c(), cy.to_f64_c());
    let radius = pupil.diameter_m().to_f64_c() / 2.0;
    let half_extent = cfg.eyebox_extent().to_f64_c() / 2.0;

    let dx = (cx.abs() - half_extent).max(0.0);
    let dy = (cy.abs() - half_extent).max(0.0);
    let outside = dx * dx + dy * dy > radius * radius || radius + half_extent < cx.hypot(cy);

    let mut mask = Tensor::zeros(&[h, w]);
    let mut count = 0usize;
    let mut best = (0usize, f64::INFINITY);
    for r in 0..h {
        let y = lf * fft::bin_frequency(r, h, pitch);
        for c in 0..w {
            let x = lf * fft::bin_frequency(c, w, pitch);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            if d2 <= radius * radius {
                mask.data_mut()[r * w + c] = T::one();
                count += 1;
            }
            if d2 < best.1 {
                best = (r * w + c, d2);
            }
        }
    }
    if count == 0 && !outside {
        // vanishing pupil: keep the nearest bin so s -> 0 selects one plane wave
        mask.data_mut()[best.0] = T::one();
    }
    if outside {
        mask = Tensor::zeros(&[h, w]);
    }
    Ok((mask, outside))
}

/// Views `hologram` through a finite pupil focused at SLM-side distance
/// `focus_u`: Fourier transform, aperture mask at the eyebox, inverse
/// transform, propagate, intensity. Returns the image and the
/// outside-eyebox warning flag.
pub fn simulate_pupil_view<T: Scalar>(
    tape: &Tape<T>,
    hologram: &ComplexField,
    pupil: &PupilSpec<T>,
    focus_u: T,
    cfg: &OpticalConfig<T>,
) -> Result<(Value, bool)> {
    let (h, w) = hologram.shape_hw(tape);
    let (mask, outside) = pupil_aperture(pupil, cfg, h, w)?;
    let spectrum = tape.fft2(hologram.planes, false)?;
    let masked = tape.mul(spectrum, tape.constant(mask))?;
    let pupil_field = ComplexField {
        planes: tape.fft2(masked, true)?,
    };
    let image = reconstruct_intensity(tape, &pupil_field, focus_u, cfg)?;
    Ok((image, outside))
}

/// Eyebox energy distribution `|F(hologram)|^2`, normalized to unit sum.
/// Returned in FFT layout (DC at the corner); shift only for display.
pub fn eyebox_energy_map<T: Scalar>(field: &RawField<T>) -> Result<Tensor<T>> {
    let mut f = field.clone();
    fft::fft2(&mut f.re, &mut f.im, f.h, f.w, false)?;
    let mut map = Tensor::zeros(&[f.h, f.w]);
    let mut total = T::zero();
    for i in 0..f.h * f.w {
        let e = f.re[i] * f.re[i] + f.im[i] * f.im[i];
        map.data_mut()[i] = e;
        total += e;
    }
    if total > T::zero() {
        for v in map.data_mut() {
            *v = *v / total;
        }
    }
    Ok(map)
}

/// Shannon entropy of a normalized map, in nats.
pub fn map_entropy<T: Scalar>(map: &Tensor<T>) -> f64 {
    map.data()
        .iter()
        .map(|&p| {
            let p = p.to_f64_c();
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Moves DC to the center for display.
pub fn fftshift2<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let rr = (r + h / 2) % h;
            let cc = (c + w / 2) % w;
            out.data_mut()[rr * w + cc] = map.data()[r * w + c];
        }
    }
    out
}

// ---- raw (non-differentiable) fields ----------------------------------------

/// Plain complex field for analysis paths that need no gradients.
#[derive(Debug, Clone)]
pub struct RawField<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> RawField<T> {
    pub fn new(h: usize, w: usize) -> Self {
        RawField {
            re: vec![T::zero(); h * w],
            im: vec![T::zero(); h * w],
            h,
            w,
        }
    }

    pub fn from_polar(amp: &Tensor<T>, phase: &Tensor<T>) -> Result<Self> {
        if amp.shape() != phase.shape() || amp.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "from_polar wants matching [H,W]; got {:?}, {:?}",
                amp.shape(),
                phase.shape()
            )));
        }
        let (h, w) = (amp.shape()[0], amp.shape()[1]);
        let mut f = RawField::new(h, w);
        for i in 0..h * w {
            f.re[i] = amp.data()[i] * phase.data()[i].cos();
            f.im[i] = amp.data()[i] * phase.data()[i].sin();
        }
        Ok(f)
    }

    /// Unit-amplitude field from a phase plane.
    pub fn from_phase(phase: &Tensor<T>) -> Result<Self> {
        let amp = Tensor::full(phase.shape(), T::one());
        Self::from_polar(&amp, phase)
    }

    pub fn amplitude(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| {
            (self.re[i] * self.re[i] + self.im[i] * self.im[i]).sqrt()
        })
    }

    pub fn intensity(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| {
            self.re[i] * self.re[i] + self.im[i] * self.im[i]
        })
    }

    pub fn phase(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| self.im[i].atan2(self.re[i]))
    }

    /// In-place ASM propagation by `d`.
    pub fn propagate(&mut self, d: T, cfg: &OpticalConfig<T>) -> Result<()> {
        let tf = transfer_function(cfg, d, self.h, self.w);
        fft::fft2(&mut self.re, &mut self.im, self.h, self.w, false)?;
        for i in 0..self.h * self.w {
            let (a, b) = (self.re[i], self.im[i]);
            let (c, dimg) = (tf.re.data()[i], tf.im.data()[i]);
            self.re[i] = a * c - b * dimg;
            self.im[i] = a * dimg + b * c;
        }
        fft::fft2(&mut self.re, &mut self.im, self.h, self.w, true)
    }

    /// Keeps the phase, replaces the amplitude (Gerchberg-Saxton projection).
    pub fn project_amplitude(&mut self, target: &Tensor<T>) {
        for i in 0..self.h * self.w {
            let mag = (self.re[i] * self.re[i] + self.im[i] * self.im[i]).sqrt();
            if mag > T::zero() {
                let s = target.data()[i] / mag;
                self.re[i] = self.re[i] * s;
                self.im[i] = self.im[i] * s;
            } else {
                self.re[i] = target.data()[i];
                self.im[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    fn random_field(tape: &Tape<f64>, h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = sub_rng(seed, "wave-test", 0);
        let planes = Tensor::rand_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        ComplexField::from_planes(tape, tape.leaf(planes, false)).unwrap()
    }

    #[test]
    fn intensity_definition() {
        let tape = Tape::<f64>::new();
        let amp = tape.leaf(Tensor::full(&[4, 4], 2.0), false);
        let phase = tape.leaf(
            Tensor::rand_uniform(&[4, 4], -3.0, 3.0, &mut sub_rng(1, "wave-test", 1)),
            false,
        );
        let f = ComplexField::from_polar(&tape, amp, phase).unwrap();
        let i = f.intensity(&tape).unwrap();
        for &v in tape.value(i).data() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_amplitude_random_phase_intensity_is_one() {
        let tape = Tape::<f64>::new();
        let amp = tape.leaf(Tensor::full(&[8, 8], 1.0), false);
        let phase = tape.leaf(
            Tensor::rand_uniform(&[8, 8], -10.0, 10.0, &mut sub_rng(2, "wave-test", 2)),
            false,
        );
        let f = ComplexField::from_polar(&tape, amp, phase).unwrap();
        let i = f.intensity(&tape).unwrap();
        for &v in tape.value(i).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_distance_is_identity() {
        let tape = Tape::<f64>::new();
        let f = random_field(&tape, 16, 16, 3);
        let out = asm_propagate(&tape, &f, 0.0, &OpticalConfig::default()).unwrap();
        let a = tape.value(f.planes);
        let b = tape.value(out.planes);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transfer_function_is_unimodular_in_band() {
        let cfg = OpticalConfig::<f64>::default();
        let tf = transfer_function(&cfg, 0.01, 8, 8);
        for i in 0..64 {
            if tf.band[i] {
                let m = tf.re.data()[i].hypot(tf.im.data()[i]);
                assert!((m - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(tf.re.data()[i], 0.0);
                assert_eq!(tf.im.data()[i], 0.0);
            }
        }
        // default config: every grid frequency is propagating
        assert!(tf.band.iter().all(|&b| b));
    }

    #[test]
    fn out_of_band_is_zeroed() {
        // exaggerated wavelength puts grid corners outside the band
        let cfg = OpticalConfig::<f64> {
            wavelength: 20e-6,
            ..OpticalConfig::default()
        };
        let tf = transfer_function(&cfg, 0.01, 16, 16);
        assert!(tf.band.iter().any(|&b| !b));
        assert!(tf.band[0]); // DC always propagates
    }

    #[test]
    fn full_aperture_matches_plain_reconstruction() {
        let tape = Tape::<f64>::new();
        let cfg = OpticalConfig::<f64>::default();
        let f = random_field(&tape, 16, 16, 4);
        let u = 3e-3;
        // pupil far larger than the eyebox covers every bin
        let pupil = PupilSpec::centered(1e3);
        let (view, outside) = simulate_pupil_view(&tape, &f, &pupil, u, &cfg).unwrap();
        assert!(!outside);
        let direct = reconstruct_intensity(&tape, &f, u, &cfg).unwrap();
        let (a, b) = (tape.value(view), tape.value(direct));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_pupil_gives_near_constant_image() {
        let tape = Tape::<f64>::new();
        let cfg = OpticalConfig::<f64>::default();
        let f = random_field(&tape, 16, 16, 5);
        let pupil = PupilSpec::centered(1e-9);
        let (view, outside) = simulate_pupil_view(&tape, &f, &pupil, 1e-3, &cfg).unwrap();
        assert!(!outside);
        let img = tape.value(view);
        let mean = img.mean();
        assert!(mean > 0.0);
        for &v in img.data() {
            assert!((v - mean).abs() / mean < 1e-6, "single plane wave is flat");
        }
    }

    #[test]
    fn pupil_outside_eyebox_warns_and_zeroes() {
        let tape = Tape::<f64>::new();
        let cfg = OpticalConfig::<f64>::default();
        let f = random_field(&tape, 16, 16, 6);
        let pupil = PupilSpec {
            diameter_mm: 1.0,
            center_mm: (50.0, 0.0),
        };
        let (view, outside) = simulate_pupil_view(&tape, &f, &pupil, 1e-3, &cfg).unwrap();
        assert!(outside);
        assert!(tape.value(view).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_map_normalizes_and_concentrates_dc_for_constant_phase() {
        let phase = Tensor::<f64>::zeros(&[16, 16]);
        let f = RawField::from_phase(&phase).unwrap();
        let map = eyebox_energy_map(&f).unwrap();
        assert!((map.sum() - 1.0).abs() < 1e-12);
        // DC bin plus its 3x3 neighborhood (FFT layout corners)
        let mut center = 0.0;
        for dr in [-1i32, 0, 1] {
            for dc in [-1i32, 0, 1] {
                let r = ((dr + 16) % 16) as usize;
                let c = ((dc + 16) % 16) as usize;
                center += map.data()[r * 16 + c];
            }
        }
        assert!(center > 0.9);
    }

    #[test]
    fn double_phase_full_amplitude_keeps_phase() {
        let amp = Tensor::<f64>::full(&[8, 8], 1.0);
        let phase = Tensor::<f64>::zeros(&[8, 8]);
        let dp = double_phase_encode(&amp, &phase, 1.0).unwrap();
        // acos(1) = 0: both sub-phases equal the (prefiltered) phase = 0
        for &v in dp.phase.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn double_phase_zero_amplitude_quadrature() {
        let amp = Tensor::<f64>::zeros(&[8, 8]);
        let phase = Tensor::<f64>::zeros(&[8, 8]);
        let dp = double_phase_encode(&amp, &phase, 1.0).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        for r in 0..8 {
            for c in 0..8 {
                let v = dp.phase.data()[r * 8 + c];
                let expect = if (r + c) % 2 == 0 { half_pi } else { -half_pi };
                assert!((v - expect).abs() < 1e-9);
                // local average of e^{j phi} over a checkerboard pair is 0
            }
        }
    }

    #[test]
    fn double_phase_rejects_overbright() {
        let amp = Tensor::<f64>::full(&[4, 4], 1.5);
        let phase = Tensor::<f64>::zeros(&[4, 4]);
        assert!(double_phase_encode(&amp, &phase, 1.0).is_err());
    }

    #[test]
    fn normalize_amplitude_scale() {
        let mut amp = Tensor::<f64>::full(&[2, 2], 2.0);
        let s = normalize_amplitude(&mut amp);
        assert_eq!(s, 2.0);
        assert!(amp.data().iter().all(|&v| v == 1.0));
        let mut small = Tensor::<f64>::full(&[2, 2], 0.5);
        assert_eq!(normalize_amplitude(&mut small), 1.0);
    }
}
