//! Incoherent-eye geometry: circle of confusion, eyepiece mapping, focal
//! plane scheduling, CoC loss weights and eyebox pupil grids.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wave::OpticalConfig;

/// Closest allowed virtual-image distance (meters).
pub const MIN_VIEW_DISTANCE: f64 = 0.35;

/// CoC values below this (pixels) count as in focus; also clamps the
/// weight-map singularity at zero blur.
pub const COC_MIN_PX: f64 = 0.5;

/// Viewing pupil: diameter and center offset in the eyebox plane, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PupilSpec<T> {
    pub diameter_mm: T,
    pub center_mm: (T, T),
}

impl<T: Scalar> PupilSpec<T> {
    pub fn centered(diameter_mm: T) -> Self {
        PupilSpec {
            diameter_mm,
            center_mm: (T::zero(), T::zero()),
        }
    }

    pub fn diameter_m(&self) -> T {
        self.diameter_mm * T::of(1e-3)
    }

    pub fn center_m(&self) -> (T, T) {
        (self.center_mm.0 * T::of(1e-3), self.center_mm.1 * T::of(1e-3))
    }
}

/// Reconstruction plane schedule: focal distances uniformly spaced in
/// diopters, with the matching SLM-side distances `u_k = f^2 / e_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalSchedule<T> {
    /// Viewer-side focal distances e_d^(k), meters, near to far.
    pub focal_distances: Vec<T>,
    /// SLM-side reconstruction distances u_k, meters.
    pub slm_distances: Vec<T>,
    /// Focal distances in diopters (1/m).
    pub diopters: Vec<T>,
}

impl<T: Scalar> FocalSchedule<T> {
    pub fn len(&self) -> usize {
        self.focal_distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.focal_distances.is_empty()
    }

    /// CSV rows `k, u_k_m, e_d_k_m, diopter`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,u_k_m,e_d_k_m,diopter\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                k, self.slm_distances[k], self.focal_distances[k], self.diopters[k]
            ));
        }
        out
    }
}

/// Circle-of-confusion diameter on the sensor, meters:
/// `c = s * l * |1/d - 1/d_f|` with pupil `s` and sensor distance `l`.
pub fn coc_diameter<T: Scalar>(d: T, d_f: T, pupil_m: T, sensor_l: T) -> Result<T> {
    if d <= T::zero() || d_f <= T::zero() {
        return Err(Error::Domain(format!(
            "coc_diameter needs positive depths; got d={d}, d_f={d_f}"
        )));
    }
    Ok(pupil_m * sensor_l * (T::one() / d - T::one() / d_f).abs())
}

/// CoC in rendered-image pixels at the configured image sampling pitch.
pub fn coc_pixels<T: Scalar>(d: T, d_f: T, pupil_m: T, cfg: &OpticalConfig<T>) -> Result<T> {
    Ok(coc_diameter(d, d_f, pupil_m, cfg.eye_sensor)? / cfg.image_pitch)
}

/// Thin-lens eyepiece mapping for an image projected at `u` (0 < u < f):
/// returns the virtual image distance `v = f(f-u)/u` from the lens and the
/// viewer distance `e_d = f^2/u`. Distances with `e_d` under 35 cm are
/// rejected.
pub fn eyepiece_map<T: Scalar>(u: T, f: T) -> Result<(T, T)> {
    if u <= T::zero() || u >= f {
        return Err(Error::Domain(format!(
            "eyepiece_map needs 0 < u < f for a virtual image; got u={u}, f={f}"
        )));
    }
    let v = f * (f - u) / u;
    let e_d = f * f / u;
    if e_d < T::of(MIN_VIEW_DISTANCE) {
        return Err(Error::Domain(format!(
            "virtual image at e_d={e_d} m is closer than the {MIN_VIEW_DISTANCE} m minimum"
        )));
    }
    Ok((v, e_d))
}

/// Inverse of the viewer-distance branch: `u = f^2 / e_d`.
pub fn eyepiece_inverse<T: Scalar>(e_d: T, f: T) -> T {
    f * f / e_d
}

/// Smallest uniform-diopter schedule such that the CoC of any scene depth
/// changes by less than one pixel between adjacent planes; plane count grows
/// with pupil size.
pub fn plan_focal_schedule<T: Scalar>(
    cfg: &OpticalConfig<T>,
    pupil: &PupilSpec<T>,
) -> Result<FocalSchedule<T>> {
    let near = cfg.depth_near.to_f64_c();
    let far = cfg.depth_far.to_f64_c();
    if near <= 0.0 || far <= 0.0 || near > far {
        return Err(Error::Domain(format!(
            "bad depth range [{near}, {far}]"
        )));
    }
    let diopter_hi = 1.0 / near;
    let diopter_lo = 1.0 / far;
    let span = diopter_hi - diopter_lo;
    let s_m = pupil.diameter_m().to_f64_c();
    let l = cfg.eye_sensor.to_f64_c();
    let px = cfg.image_pitch.to_f64_c();

    // |c(d, e_k) - c(d, e_{k+1})| <= s*l*|1/e_k - 1/e_{k+1}| with equality for
    // depths beyond both planes, so the worst case over the depth range is the
    // diopter step itself whenever the range extends past the plane pair.
    let m = if span == 0.0 || s_m == 0.0 {
        1
    } else {
        let max_step = px / (s_m * l); // largest diopter step below 1 px
        let mut m = (span / max_step).ceil() as usize + 1;
        if span / ((m - 1) as f64) >= max_step {
            m += 1;
        }
        m
    };
    schedule_with_planes(cfg, m)
}

/// Uniform-diopter schedule with exactly `m` planes over the configured
/// depth range (a single plane sits at the mid diopter).
pub fn schedule_with_planes<T: Scalar>(
    cfg: &OpticalConfig<T>,
    m: usize,
) -> Result<FocalSchedule<T>> {
    if m == 0 {
        return Err(Error::Domain("schedule needs at least one plane".into()));
    }
    let diopter_hi = 1.0 / cfg.depth_near.to_f64_c();
    let diopter_lo = 1.0 / cfg.depth_far.to_f64_c();
    let f = cfg.eyepiece_focal;
    let mut diopters = Vec::with_capacity(m);
    if m == 1 {
        diopters.push(0.5 * (diopter_lo + diopter_hi));
    } else {
        let step = (diopter_hi - diopter_lo) / ((m - 1) as f64);
        for k in 0..m {
            // near to far: descending diopters
            diopters.push(diopter_hi - step * k as f64);
        }
    }
    let mut focal = Vec::with_capacity(m);
    let mut slm = Vec::with_capacity(m);
    for &dp in &diopters {
        let e_d = T::of(1.0 / dp);
        focal.push(e_d);
        slm.push(eyepiece_inverse(e_d, f));
    }
    Ok(FocalSchedule {
        focal_distances: focal,
        slm_distances: slm,
        diopters: diopters.into_iter().map(T::of).collect(),
    })
}

/// Loss weight from a CoC map: `W = 1 / log2(1 + C)`, with `C` clamped to
/// [`COC_MIN_PX`] so the in-focus singularity stays bounded.
pub fn coc_weight_map<T: Scalar>(coc_px: &Tensor<T>) -> Tensor<T> {
    let c_min = T::of(COC_MIN_PX);
    coc_px.map(|c| {
        let c = c.max(c_min);
        T::one() / (T::one() + c).log2()
    })
}

/// CoC map in pixels for a depth image focused at `d_f`.
pub fn coc_map<T: Scalar>(
    depth: &Tensor<T>,
    d_f: T,
    pupil: &PupilSpec<T>,
    cfg: &OpticalConfig<T>,
) -> Result<Tensor<T>> {
    let s_m = pupil.diameter_m();
    let mut out = Tensor::zeros(depth.shape());
    for (o, &d) in out.data_mut().iter_mut().zip(depth.data()) {
        *o = coc_pixels(d, d_f, s_m, cfg)?;
    }
    Ok(out)
}

/// 3x3 pupil grid centered in the eyebox with spacing `z` mm. Returns the
/// pupils row-major plus a flag per pupil set when it pokes outside the
/// eyebox extent.
pub fn sample_pupil_grid<T: Scalar>(
    z_mm: T,
    diameter_mm: T,
    cfg: &OpticalConfig<T>,
) -> Result<(Vec<PupilSpec<T>>, Vec<bool>)> {
    if z_mm < T::zero() {
        return Err(Error::Domain(format!("negative pupil interval {z_mm}")));
    }
    let extent_mm = cfg.eyebox_extent().to_f64_c() * 1e3;
    let half = extent_mm / 2.0;
    let mut pupils = Vec::with_capacity(9);
    let mut warnings = Vec::with_capacity(9);
    for gy in -1i32..=1 {
        for gx in -1i32..=1 {
            let cx = z_mm.to_f64_c() * gx as f64;
            let cy = z_mm.to_f64_c() * gy as f64;
            let r = diameter_mm.to_f64_c() / 2.0;
            warnings.push(cx.abs() + r > half || cy.abs() + r > half);
            pupils.push(PupilSpec {
                diameter_mm,
                center_mm: (T::of(cx), T::of(cy)),
            });
        }
    }
    Ok((pupils, warnings))
}
