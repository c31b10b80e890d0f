//! Non-neural hologram optimizers: Gerchberg-Saxton alternating projections,
//! gradient-based focal-stack optimization of a complex hologram, and the
//! pupil-aware light-field optimization with eyebox pupil sampling.

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::net::Params;
use crate::optics::{coc_weight_map, FocalSchedule, PupilSpec};
use crate::rng::sub_rng;
use crate::scalar::Scalar;
use crate::scene::{green_channel, render_plane, FocalStack, SceneRgbd};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::train::{loss_rec, reconstruct_planes, Adam};
use crate::wave::{
    eyebox_energy_map, map_entropy, simulate_pupil_view, ComplexField, OpticalConfig, RawField,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    RandomPhase,
    ZeroPhase,
}

/// Iteration budget and step size for the gradient-based optimizers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizeSpec {
    pub iterations: usize,
    pub step_size: f64,
    pub init: PhaseInit,
    pub seed: u64,
}

impl Default for OptimizeSpec {
    fn default() -> Self {
        OptimizeSpec {
            iterations: 500,
            step_size: 2e-2,
            init: PhaseInit::RandomPhase,
            seed: 0,
        }
    }
}

impl OptimizeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("step size must be positive".into()));
        }
        Ok(())
    }
}

fn init_phase<T: Scalar>(init: PhaseInit, h: usize, w: usize, seed: u64) -> Tensor<T> {
    match init {
        PhaseInit::ZeroPhase => Tensor::zeros(&[h, w]),
        PhaseInit::RandomPhase => Tensor::rand_uniform(
            &[h, w],
            -std::f64::consts::PI,
            std::f64::consts::PI,
            &mut sub_rng(seed, "phase-init", 0),
        ),
    }
}

// ---- Gerchberg-Saxton ---------------------------------------------------------

/// Gerchberg-Saxton result: the phase-only hologram and the target-plane
/// amplitude RMSE per iteration (non-increasing).
#[derive(Debug, Clone)]
pub struct GsOutcome<T> {
    pub phase: Tensor<T>,
    pub errors: Vec<f64>,
}

/// Alternating projections between unit SLM amplitude and the target plane
/// amplitude `sqrt(target)` at distance `u`.
pub fn gs_optimize<T: Scalar>(
    target: &Tensor<T>,
    u: T,
    iterations: usize,
    init: PhaseInit,
    seed: u64,
    cfg: &OpticalConfig<T>,
) -> Result<GsOutcome<T>> {
    if target.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "gs_optimize wants a [H,W] intensity; got {:?}",
            target.shape()
        )));
    }
    let (h, w) = (target.shape()[0], target.shape()[1]);
    let amp_target = target.map(|v| v.max(T::zero()).sqrt());
    let mut slm = RawField::from_phase(&init_phase::<T>(init, h, w, seed))?;
    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut plane = slm.clone();
        plane.propagate(u, cfg)?;
        // amplitude error at the target plane, before projecting onto it
        let mut se = 0.0f64;
        for i in 0..h * w {
            let a = (plane.re[i] * plane.re[i] + plane.im[i] * plane.im[i])
                .sqrt()
                .to_f64_c();
            let d = a - amp_target.data()[i].to_f64_c();
            se += d * d;
        }
        errors.push((se / (h * w) as f64).sqrt());
        plane.project_amplitude(&amp_target);
        plane.propagate(-u, cfg)?;
        let ones = Tensor::full(&[h, w], T::one());
        plane.project_amplitude(&ones);
        slm = plane;
    }
    Ok(GsOutcome {
        phase: slm.phase(),
        errors,
    })
}

// ---- gradient-based focal-stack optimizer -----------------------------------------

/// Best-iterate outcome of a gradient-based hologram optimization.
#[derive(Debug, Clone)]
pub struct SgdOutcome<T> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
    pub best_loss: f64,
    pub loss_trace: Vec<f64>,
    /// Iteration at which the loss went non-finite, if it did; the returned
    /// tensors are the last finite best iterate.
    pub diverged_at: Option<usize>,
}

/// Optimizes a complex hologram `(H_A, H_Phi)` against a focal stack through
/// plane reconstruction and the weighted intensity+gradient loss. The
/// amplitude is clamped non-negative after every update; the step size
/// follows a cosine decay so the L1 objective settles instead of orbiting.
pub fn sgd_focal_optimize<T: Scalar>(
    stack: &FocalStack<T>,
    spec: &OptimizeSpec,
    cfg: &OpticalConfig<T>,
) -> Result<SgdOutcome<T>> {
    spec.validate()?;
    if stack.images.is_empty() {
        return Err(Error::Config("focal stack has no planes".into()));
    }
    let (h, w) = {
        let s = stack.images[0].shape();
        (s[1], s[2])
    };
    let mut params = Params::<T>::default();
    let amp = params.push("amplitude", Tensor::full(&[h, w], T::one()));
    let phase = params.push("phase", init_phase::<T>(spec.init, h, w, spec.seed));
    let mut adam = Adam::new(&params, spec.step_size);

    let targets: Vec<Tensor<T>> = (0..stack.images.len())
        .map(|k| stack.target_green(k))
        .collect();
    let weights: Vec<Tensor<T>> = stack.coc_maps.iter().map(coc_weight_map).collect();

    let mut best_loss = f64::INFINITY;
    let mut best: Option<(Tensor<T>, Tensor<T>)> = None;
    let mut trace = Vec::with_capacity(spec.iterations);
    let mut diverged_at = None;

    for it in 0..spec.iterations {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let field = ComplexField::from_polar(&tape, bound.value(amp), bound.value(phase))?;
        let recon = reconstruct_planes(&tape, &field, &stack.schedule, cfg)?;
        let tv: Vec<Value> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        let wv: Vec<Value> = weights.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_rec(&tape, &recon, &tv, &wv)?;
        let loss_val = tape.value(loss).data()[0].to_f64_c();
        trace.push(loss_val);
        if !loss_val.is_finite() {
            diverged_at = Some(it);
            break;
        }
        if loss_val < best_loss {
            best_loss = loss_val;
            best = Some((params.get(amp).clone(), params.get(phase).clone()));
        }
        adam.lr = spec.step_size
            * 0.5
            * (1.0 + (std::f64::consts::PI * it as f64 / spec.iterations as f64).cos());
        match tape.backward(loss) {
            Ok(grads) => adam.apply(&mut params, &bound, &grads)?,
            Err(Error::Numeric(_)) => {
                diverged_at = Some(it);
                break;
            }
            Err(e) => return Err(e),
        }
        for v in params.get_mut(amp).data_mut() {
            *v = v.max(T::zero());
        }
    }
    let (amplitude, phase_t) = match best {
        Some(b) => b,
        None => {
            return Err(Error::Numeric(
                "optimization produced no finite iterate".into(),
            ))
        }
    };
    Ok(SgdOutcome {
        amplitude,
        phase: phase_t,
        best_loss,
        loss_trace: trace,
        diverged_at,
    })
}

// ---- pupil-aware light-field optimization -------------------------------------------

/// Error-table row of the pupil-aware optimization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViewError {
    pub pupil_mm: f64,
    pub pupil_idx: usize,
    pub plane_idx: usize,
    pub psnr_db: f64,
    pub l1: f64,
}

pub fn view_errors_csv(rows: &[ViewError]) -> String {
    let mut out = String::from("pupil_mm,pupil_idx,plane_idx,psnr,l1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pupil_mm, r.pupil_idx, r.plane_idx, r.psnr_db, r.l1
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct LfOutcome<T> {
    /// Optimized phase-only hologram.
    pub phase: Tensor<T>,
    /// Learned global intensity gain applied to simulated views.
    pub gain: f64,
    pub error_table: Vec<ViewError>,
    /// Entropy of the hologram's eyebox energy map, nats.
    pub eyebox_entropy: f64,
    pub loss_trace: Vec<f64>,
}

/// Target views: one incoherent render per (pupil size, grid position,
/// focal plane), with parallax from the shifted pupil center.
pub struct LfTargets<T> {
    pub sizes_mm: Vec<f64>,
    pub pupils: Vec<PupilSpec<T>>,
    pub schedule: FocalSchedule<T>,
    /// `views[size][pupil][plane]` green-channel targets.
    pub views: Vec<Vec<Vec<Tensor<T>>>>,
}

/// Renders the light-field stand-in view set from the layered scene.
pub fn render_lf_targets<T: Scalar>(
    scene: &SceneRgbd<T>,
    sizes_mm: &[f64],
    z_mm: T,
    schedule: &FocalSchedule<T>,
    cfg: &OpticalConfig<T>,
) -> Result<LfTargets<T>> {
    if sizes_mm.is_empty() || schedule.is_empty() {
        return Err(Error::Config("empty pupil size list or schedule".into()));
    }
    let (grid, _) = crate::optics::sample_pupil_grid(z_mm, T::of(sizes_mm[0]), cfg)?;
    let mut views = Vec::with_capacity(sizes_mm.len());
    for &s in sizes_mm {
        let mut per_pupil = Vec::with_capacity(grid.len());
        for p in &grid {
            let pupil = PupilSpec {
                diameter_mm: T::of(s),
                center_mm: p.center_mm,
            };
            let mut per_plane = Vec::with_capacity(schedule.len());
            for &e_d in &schedule.focal_distances {
                let (img, _) = render_plane(scene, &pupil, e_d, cfg)?;
                per_plane.push(green_channel(&img));
            }
            per_pupil.push(per_plane);
        }
        views.push(per_pupil);
    }
    Ok(LfTargets {
        sizes_mm: sizes_mm.to_vec(),
        pupils: grid,
        schedule: schedule.clone(),
        views,
    })
}

/// Optimizes a phase-only hologram so finite-pupil views match the rendered
/// light-field targets: per iteration one (size, pupil, plane) triple is
/// sampled and stepped with an L1 + gradient loss. A learnable global gain
/// absorbs the pupil's energy fraction.
pub fn pupil_aware_lf_optimize<T: Scalar>(
    targets: &LfTargets<T>,
    spec: &OptimizeSpec,
    cfg: &OpticalConfig<T>,
) -> Result<LfOutcome<T>> {
    spec.validate()?;
    if targets.views.is_empty() || targets.views[0].is_empty() {
        return Err(Error::Config("empty view set".into()));
    }
    let (h, w) = {
        let s = targets.views[0][0][0].shape();
        (s[0], s[1])
    };
    let mut params = Params::<T>::default();
    let phase = params.push("phase", init_phase::<T>(spec.init, h, w, spec.seed));
    let log_gain = params.push("log_gain", Tensor::scalar(T::zero()));
    let mut adam = Adam::new(&params, spec.step_size);
    let n_sizes = targets.sizes_mm.len();
    let n_pupils = targets.pupils.len();
    let n_planes = targets.schedule.len();
    let mut trace = Vec::with_capacity(spec.iterations);

    for it in 0..spec.iterations {
        let mut rng = sub_rng(spec.seed, "lf-sample", it as u64);
        let si = rng.gen_range(0..n_sizes);
        let pi = rng.gen_range(0..n_pupils);
        let ki = rng.gen_range(0..n_planes);
        let pupil = PupilSpec {
            diameter_mm: T::of(targets.sizes_mm[si]),
            center_mm: targets.pupils[pi].center_mm,
        };
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let field = ComplexField::from_polar(
            &tape,
            tape.constant(Tensor::full(&[h, w], T::one())),
            bound.value(phase),
        )?;
        let (view, _) = simulate_pupil_view(
            &tape,
            &field,
            &pupil,
            targets.schedule.slm_distances[ki],
            cfg,
        )?;
        let gained = tape.mul(view, tape.exp(bound.value(log_gain)))?;
        let target = tape.constant(targets.views[si][pi][ki].clone());
        let l1 = tape.mean_all(tape.abs(tape.sub(gained, target)?));
        let dx = tape.abs(tape.sub(tape.diff_x(gained)?, tape.diff_x(target)?)?);
        let dy = tape.abs(tape.sub(tape.diff_y(gained)?, tape.diff_y(target)?)?);
        let grad = tape.mean_all(tape.add(dx, dy)?);
        let loss = tape.add(l1, grad)?;
        trace.push(tape.value(loss).data()[0].to_f64_c());
        let grads = tape.backward(loss)?;
        adam.apply(&mut params, &bound, &grads)?;
    }

    let phase_t = params.get(phase).clone();
    let gain = params.get(log_gain).data()[0].to_f64_c().exp();
    let entropy = map_entropy(&eyebox_energy_map(&RawField::from_phase(&phase_t)?)?);

    // final error table over every (size, pupil, plane)
    let mut table = Vec::new();
    for (si, &s_mm) in targets.sizes_mm.iter().enumerate() {
        for pi in 0..n_pupils {
            for ki in 0..n_planes {
                let pupil = PupilSpec {
                    diameter_mm: T::of(s_mm),
                    center_mm: targets.pupils[pi].center_mm,
                };
                let img = simulate_view_raw(
                    &phase_t,
                    gain,
                    &pupil,
                    targets.schedule.slm_distances[ki],
                    cfg,
                )?;
                let target = &targets.views[si][pi][ki];
                let mut l1 = 0.0;
                for i in 0..h * w {
                    l1 += (img.data()[i].to_f64_c() - target.data()[i].to_f64_c()).abs();
                }
                table.push(ViewError {
                    pupil_mm: s_mm,
                    pupil_idx: pi,
                    plane_idx: ki,
                    psnr_db: psnr(&img, target, 1.0)?,
                    l1: l1 / (h * w) as f64,
                });
            }
        }
    }
    Ok(LfOutcome {
        phase: phase_t,
        gain,
        error_table: table,
        eyebox_entropy: entropy,
        loss_trace: trace,
    })
}

/// Non-differentiable pupil view of a phase hologram (evaluation path).
pub fn simulate_view_raw<T: Scalar>(
    phase: &Tensor<T>,
    gain: f64,
    pupil: &PupilSpec<T>,
    focus_u: T,
    cfg: &OpticalConfig<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let field = ComplexField::from_polar(
        &tape,
        tape.constant(Tensor::full(phase.shape(), T::one())),
        tape.constant(phase.clone()),
    )?;
    let (view, _) = simulate_pupil_view(&tape, &field, pupil, focus_u, cfg)?;
    Ok(tape.value(view).map(|v| v * T::of(gain)))
}
