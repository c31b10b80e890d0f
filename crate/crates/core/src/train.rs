//! Focal-stack-supervised training: plane reconstruction, the weighted
//! intensity+gradient loss with its perceptual surrogate, Adam updates and
//! the deterministic training loop.

use crate::error::{Error, Result};
use crate::net::{predict_hologram, Bound, HologramNet, Params};
use crate::optics::{coc_weight_map, FocalSchedule, PupilSpec};
use crate::rng::sub_rng;
use crate::scalar::Scalar;
use crate::scene::FocalStack;
use crate::tape::{Gradients, Tape, Value};
use crate::tensor::Tensor;
use crate::wave::{asm_propagate, ComplexField, OpticalConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Perceptual-loss backend. The multi-scale gradient surrogate stands in for
/// feature-based losses; `None` disables the term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerpKind {
    MultiscaleGradient,
    None,
}

/// Loss weights and the perceptual plane subset size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_rec: f64,
    pub alpha_perp: f64,
    /// Planes sampled per iteration for the perceptual term.
    pub perp_subset: usize,
    pub perp_kind: PerpKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_rec: 1.0,
            alpha_perp: 0.025,
            perp_subset: 5,
            perp_kind: PerpKind::MultiscaleGradient,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, n_planes: usize) -> Result<()> {
        if self.alpha_rec + self.alpha_perp <= 0.0 {
            return Err(Error::Config("alpha_rec + alpha_perp must be positive".into()));
        }
        if self.perp_kind != PerpKind::None && self.perp_subset > n_planes {
            return Err(Error::Config(format!(
                "perceptual subset {} exceeds plane count {n_planes}",
                self.perp_subset
            )));
        }
        Ok(())
    }
}

/// Reconstructed intensity at every scheduled plane:
/// `P_k = |propagate(H, u_k)|^2`, differentiable through the hologram.
pub fn reconstruct_planes<T: Scalar>(
    tape: &Tape<T>,
    hologram: &ComplexField,
    schedule: &FocalSchedule<T>,
    cfg: &OpticalConfig<T>,
) -> Result<Vec<Value>> {
    if schedule.is_empty() {
        return Err(Error::Config("empty focal schedule".into()));
    }
    schedule
        .slm_distances
        .iter()
        .map(|&u| asm_propagate(tape, hologram, u, cfg)?.intensity(tape))
        .collect()
}

/// Sum of forward-difference L1 terms `|dx a - dx b| + |dy a - dy b|`.
fn gradient_l1<T: Scalar>(tape: &Tape<T>, a: Value, b: Value) -> Result<Value> {
    let dx = tape.abs(tape.sub(tape.diff_x(a)?, tape.diff_x(b)?)?);
    let dy = tape.abs(tape.sub(tape.diff_y(a)?, tape.diff_y(b)?)?);
    tape.add(dx, dy)
}

/// Reconstruction loss: spatial mean of
/// `W_k * |P_k - R_k| + |grad P_k - grad R_k|`, averaged over planes. The
/// CoC weight applies to the intensity term only.
pub fn loss_rec<T: Scalar>(
    tape: &Tape<T>,
    recon: &[Value],
    target: &[Value],
    weight: &[Value],
) -> Result<Value> {
    if recon.len() != target.len() || recon.len() != weight.len() {
        return Err(Error::Dimension(format!(
            "loss_rec lengths: {} recon, {} target, {} weight",
            recon.len(),
            target.len(),
            weight.len()
        )));
    }
    if recon.is_empty() {
        return Err(Error::Dimension("loss_rec over zero planes".into()));
    }
    let mut acc: Option<Value> = None;
    for k in 0..recon.len() {
        let l1 = tape.abs(tape.sub(recon[k], target[k])?);
        let weighted = tape.mul(weight[k], l1)?;
        let grad = gradient_l1(tape, recon[k], target[k])?;
        let plane = tape.mean_all(tape.add(weighted, grad)?);
        acc = Some(match acc {
            Some(a) => tape.add(a, plane)?,
            None => plane,
        });
    }
    tape.scale(acc.expect("planes"), 1.0 / recon.len() as f64)
}

/// Multi-scale (3-level dyadic) L1 on intensities and gradients of one plane.
fn multiscale_l1<T: Scalar>(tape: &Tape<T>, p: Value, r: Value) -> Result<Value> {
    let shape = tape.shape(p);
    let (h, w) = (shape[0], shape[1]);
    let mut p3 = tape.reshape(p, &[1, h, w])?;
    let mut r3 = tape.reshape(r, &[1, h, w])?;
    let mut acc: Option<Value> = None;
    for level in 0..3 {
        if level > 0 {
            p3 = tape.avg_pool2(p3)?;
            r3 = tape.avg_pool2(r3)?;
        }
        let l1 = tape.mean_all(tape.abs(tape.sub(p3, r3)?));
        let grad = tape.mean_all(gradient_l1(tape, p3, r3)?);
        let term = tape.add(l1, grad)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("levels"), 1.0 / 3.0)
}

/// Perceptual surrogate over a random plane subset; zero when disabled.
pub fn loss_perp<T: Scalar>(
    tape: &Tape<T>,
    recon: &[Value],
    target: &[Value],
    subset: &[usize],
    kind: PerpKind,
) -> Result<Value> {
    if kind == PerpKind::None {
        return Ok(tape.scalar_const(0.0));
    }
    if subset.len() > recon.len() {
        return Err(Error::Config(format!(
            "perceptual subset {} exceeds plane count {}",
            subset.len(),
            recon.len()
        )));
    }
    let mut acc: Option<Value> = None;
    for &k in subset {
        let term = multiscale_l1(tape, recon[k], target[k])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => tape.scale(a, 1.0 / subset.len() as f64),
        None => Ok(tape.scalar_const(0.0)),
    }
}

/// Draws `k` distinct plane indices from `0..m`.
pub fn sample_subset(rng: &mut impl Rng, m: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k.min(m) {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(k.min(m));
    idx
}

// ---- optimizer ------------------------------------------------------------------

/// Adam with bias correction; moments align with the parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies one update from the gradients of `bound` leaves. Parameters
    /// without a gradient (unreached in the graph) are left untouched.
    pub fn apply(
        &mut self,
        params: &mut Params<T>,
        bound: &Bound,
        grads: &Gradients<T>,
    ) -> Result<()> {
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let eps = T::of(self.eps);
        let corr1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(self.lr);
        for (i, t) in params.tensors_mut().enumerate() {
            let Some(g) = grads.get(bound.values()[i]) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..t.numel() {
                let gj = g.data()[j];
                m.data_mut()[j] = b1 * m.data()[j] + (T::one() - b1) * gj;
                v.data_mut()[j] = b2 * v.data()[j] + (T::one() - b2) * gj * gj;
                let mh = m.data()[j] / corr1;
                let vh = v.data()[j] / corr2;
                t.data_mut()[j] = t.data()[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            m.write_hft(&dir.join(format!("m_{i}.hft")))?;
            v.write_hft(&dir.join(format!("v_{i}.hft")))?;
        }
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.m.len() {
            self.m[i] = Tensor::read_hft(&dir.join(format!("m_{i}.hft")))?;
            self.v[i] = Tensor::read_hft(&dir.join(format!("v_{i}.hft")))?;
        }
        Ok(())
    }
}

// ---- training loop -----------------------------------------------------------------

/// One scene with its per-pupil ground-truth stacks.
#[derive(Debug, Clone)]
pub struct TrainScene<T> {
    pub id: u64,
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    /// (pupil_mm, stack), consistent across scenes.
    pub stacks: Vec<(f64, FocalStack<T>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// When set, the pupil fed to `g_m` is pinned to this size regardless of
    /// the sampled stack (the single-pupil special case).
    pub freeze_pupil_mm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
            freeze_pupil_mm: None,
        }
    }
}

/// One log row per optimization step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub loss_rec: f64,
    pub loss_perp: f64,
    pub pupil_mm: f64,
    pub scene_id: u64,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss,loss_rec,loss_perp,s,scene_id\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.loss_rec, r.loss_perp, r.pupil_mm, r.scene_id
        ));
    }
    out
}

/// Serializable training state; resuming from it reproduces the loss
/// trajectory bitwise in deterministic mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub last_loss: f64,
    pub last_loss_rec: f64,
    pub last_loss_perp: f64,
}

/// Runs `epochs * scenes * pupils` steps: sample a (scene, pupil) pair,
/// predict, reconstruct every scheduled plane, step Adam on the combined
/// loss. Returns the final state and the per-step log.
pub fn train<T: Scalar>(
    net: &mut HologramNet<T>,
    dataset: &[TrainScene<T>],
    cfg: &OpticalConfig<T>,
    tc: &TrainConfig,
    adam: &mut Adam<T>,
    start_step: u64,
) -> Result<(TrainState, Vec<LossRow>)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let n_pupils = dataset[0].stacks.len();
    if n_pupils == 0 {
        return Err(Error::Dataset("scenes carry no focal stacks".into()));
    }
    for s in dataset {
        if s.stacks.len() != n_pupils {
            return Err(Error::Dataset(format!(
                "scene {} has {} pupil stacks, expected {n_pupils}",
                s.id,
                s.stacks.len()
            )));
        }
    }
    let steps = (tc.epochs * dataset.len() * n_pupils) as u64;
    let mut rows = Vec::with_capacity(steps as usize);
    let mut state = TrainState {
        step: start_step,
        seed: tc.seed,
        last_loss: f64::NAN,
        last_loss_rec: f64::NAN,
        last_loss_perp: f64::NAN,
    };
    for t in start_step..start_step + steps {
        let mut rng = sub_rng(tc.seed, "train-sample", t);
        let scene_i = rng.gen_range(0..dataset.len());
        let pupil_i = rng.gen_range(0..n_pupils);
        let scene = &dataset[scene_i];
        let (pupil_mm, stack) = &scene.stacks[pupil_i];
        let row = train_step(
            net,
            scene,
            *pupil_mm,
            stack,
            cfg,
            tc,
            adam,
            t,
        )?;
        state.step = t + 1;
        state.last_loss = row.loss;
        state.last_loss_rec = row.loss_rec;
        state.last_loss_perp = row.loss_perp;
        rows.push(row);
    }
    Ok((state, rows))
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    net: &mut HologramNet<T>,
    scene: &TrainScene<T>,
    pupil_mm: f64,
    stack: &FocalStack<T>,
    cfg: &OpticalConfig<T>,
    tc: &TrainConfig,
    adam: &mut Adam<T>,
    step: u64,
) -> Result<LossRow> {
    tc.loss.validate(stack.schedule.len())?;
    let tape = Tape::new();
    let bound = net.params.bind(&tape);
    let fed_pupil = PupilSpec::centered(T::of(tc.freeze_pupil_mm.unwrap_or(pupil_mm)));
    let pred = predict_hologram(
        net,
        &tape,
        &bound,
        &scene.rgb,
        &scene.depth,
        &fed_pupil,
        cfg,
        false,
    )?;
    let field = ComplexField::from_polar(&tape, pred.amplitude, pred.phase)?;
    let recon = reconstruct_planes(&tape, &field, &stack.schedule, cfg)?;

    let mut targets = Vec::with_capacity(recon.len());
    let mut weights = Vec::with_capacity(recon.len());
    for k in 0..recon.len() {
        targets.push(tape.constant(stack.target_green(k)));
        weights.push(tape.constant(coc_weight_map(&stack.coc_maps[k])));
    }
    let l_rec = loss_rec(&tape, &recon, &targets, &weights)?;
    let subset = sample_subset(
        &mut sub_rng(tc.seed, "perp-subset", step),
        recon.len(),
        tc.loss.perp_subset,
    );
    let l_perp = loss_perp(&tape, &recon, &targets, &subset, tc.loss.perp_kind)?;
    let total = tape.add(
        tape.scale(l_rec, tc.loss.alpha_rec)?,
        tape.scale(l_perp, tc.loss.alpha_perp)?,
    )?;
    let grads = tape.backward(total)?;
    adam.apply(&mut net.params, &bound, &grads)?;
    Ok(LossRow {
        step,
        loss: tape.value(total).data()[0].to_f64_c(),
        loss_rec: tape.value(l_rec).data()[0].to_f64_c(),
        loss_perp: tape.value(l_perp).data()[0].to_f64_c(),
        pupil_mm,
        scene_id: scene.id,
    })
}

/// Saves network, optimizer moments and the training state in one directory.
pub fn save_train_checkpoint<T: Scalar>(
    net: &HologramNet<T>,
    adam: &Adam<T>,
    state: &TrainState,
    dir: &Path,
) -> Result<()> {
    crate::net::save_checkpoint(net, dir)?;
    adam.save(&dir.join("adam"))?;
    std::fs::write(
        dir.join("state.json"),
        serde_json::to_string_pretty(state).expect("state serializes"),
    )
    .map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Restores what [`save_train_checkpoint`] wrote.
pub fn load_train_checkpoint<T: Scalar>(
    dir: &Path,
    lr: f64,
) -> Result<(HologramNet<T>, Adam<T>, TrainState)> {
    let net = crate::net::load_checkpoint::<T>(dir)?;
    let mut adam = Adam::new(&net.params, lr);
    adam.load(&dir.join("adam"))?;
    let raw = std::fs::read_to_string(dir.join("state.json"))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let state: TrainState =
        serde_json::from_str(&raw).map_err(|e| Error::Dataset(format!("bad state: {e}")))?;
    adam.step = state.step;
    Ok((net, adam, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn loss_rec_zero_on_match() {
        let tape = Tape::<f64>::new();
        let img = Tensor::full(&[8, 8], 0.4);
        let p = tape.constant(img.clone());
        let r = tape.constant(img);
        let w = tape.constant(Tensor::full(&[8, 8], 1.0));
        let l = loss_rec(&tape, &[p], &[r], &[w]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn loss_rec_weight_suppresses_constant_offset() {
        // constant images differing by c: gradient term 0, weight 0 kills it
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[8, 8], 0.7));
        let r = tape.constant(Tensor::full(&[8, 8], 0.2));
        let w = tape.constant(Tensor::zeros(&[8, 8]));
        let l = loss_rec(&tape, &[p], &[r], &[w]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn loss_rec_matches_scalar_loop() {
        let mut rng = sub_rng(3, "train-test", 0);
        let pt = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let rt = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let wt = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 2.0, &mut rng);
        let tape = Tape::<f64>::new();
        let l = loss_rec(
            &tape,
            &[tape.constant(pt.clone())],
            &[tape.constant(rt.clone())],
            &[tape.constant(wt.clone())],
        )
        .unwrap();
        // brute-force evaluation with explicit loops
        let at = |t: &Tensor<f64>, r: usize, c: usize| t.data()[r * 8 + c];
        let mut total = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                let diff = (at(&pt, r, c) - at(&rt, r, c)).abs();
                let dxp = if c + 1 < 8 { at(&pt, r, c + 1) - at(&pt, r, c) } else { 0.0 };
                let dxr = if c + 1 < 8 { at(&rt, r, c + 1) - at(&rt, r, c) } else { 0.0 };
                let dyp = if r + 1 < 8 { at(&pt, r + 1, c) - at(&pt, r, c) } else { 0.0 };
                let dyr = if r + 1 < 8 { at(&rt, r + 1, c) - at(&rt, r, c) } else { 0.0 };
                total += at(&wt, r, c) * diff + (dxp - dxr).abs() + (dyp - dyr).abs();
            }
        }
        total /= 64.0;
        assert!((tape.value(l).data()[0] - total).abs() < 1e-12);
    }

    #[test]
    fn loss_perp_disabled_is_zero() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[8, 8], 0.9));
        let r = tape.constant(Tensor::zeros(&[8, 8]));
        let l = loss_perp(&tape, &[p], &[r], &[0], PerpKind::None).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn loss_perp_zero_on_match_and_positive_otherwise() {
        let mut rng = sub_rng(4, "train-test", 1);
        let img = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let p = tape.constant(img.clone());
        let r = tape.constant(img);
        let l = loss_perp(&tape, &[p], &[r], &[0], PerpKind::MultiscaleGradient).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let q = tape.constant(Tensor::full(&[8, 8], 0.1));
        let l2 = loss_perp(&tape, &[p], &[q], &[0], PerpKind::MultiscaleGradient).unwrap();
        assert!(tape.value(l2).data()[0] > 0.0);
    }

    #[test]
    fn loss_perp_matches_pyramid_loop() {
        let mut rng = sub_rng(5, "train-test", 2);
        let pt = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let rt = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let l = loss_perp(
            &tape,
            &[tape.constant(pt.clone())],
            &[tape.constant(rt.clone())],
            &[0],
            PerpKind::MultiscaleGradient,
        )
        .unwrap();

        // independent pyramid evaluation
        fn down(t: &[f64], h: usize, w: usize) -> Vec<f64> {
            let (oh, ow) = (h / 2, w / 2);
            let mut o = vec![0.0; oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    o[r * ow + c] = 0.25
                        * (t[2 * r * w + 2 * c]
                            + t[2 * r * w + 2 * c + 1]
                            + t[(2 * r + 1) * w + 2 * c]
                            + t[(2 * r + 1) * w + 2 * c + 1]);
                }
            }
            o
        }
        fn level_term(p: &[f64], r: &[f64], h: usize, w: usize) -> f64 {
            let mut l1 = 0.0;
            let mut grad = 0.0;
            for i in 0..h {
                for j in 0..w {
                    l1 += (p[i * w + j] - r[i * w + j]).abs();
                    let dxp = if j + 1 < w { p[i * w + j + 1] - p[i * w + j] } else { 0.0 };
                    let dxr = if j + 1 < w { r[i * w + j + 1] - r[i * w + j] } else { 0.0 };
                    let dyp = if i + 1 < h { p[(i + 1) * w + j] - p[i * w + j] } else { 0.0 };
                    let dyr = if i + 1 < h { r[(i + 1) * w + j] - r[i * w + j] } else { 0.0 };
                    grad += (dxp - dxr).abs() + (dyp - dyr).abs();
                }
            }
            (l1 + grad) / (h * w) as f64
        }
        let (mut pv, mut rv) = (pt.data().to_vec(), rt.data().to_vec());
        let mut expected = level_term(&pv, &rv, 8, 8);
        pv = down(&pv, 8, 8);
        rv = down(&rv, 8, 8);
        expected += level_term(&pv, &rv, 4, 4);
        pv = down(&pv, 4, 4);
        rv = down(&rv, 4, 4);
        expected += level_term(&pv, &rv, 2, 2);
        expected /= 3.0;
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn subset_sampling_without_replacement() {
        let mut rng = sub_rng(6, "train-test", 3);
        for _ in 0..50 {
            let s = sample_subset(&mut rng, 9, 5);
            assert_eq!(s.len(), 5);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
        }
        assert_eq!(sample_subset(&mut rng, 3, 5).len(), 3);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut params = Params::<f64>::default();
        let id = params.push("x", Tensor::full(&[4], 2.0));
        let mut adam = Adam::new(&params, 0.1);
        for _ in 0..200 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = bound.value(id);
            let loss = tape.sum_all(tape.square(x));
            let grads = tape.backward(loss).unwrap();
            adam.apply(&mut params, &bound, &grads).unwrap();
        }
        assert!(params.get(id).data().iter().all(|&v| v.abs() < 1e-2));
    }
}
