//! Pupil-conditioned hologram predictors.
//!
//! The adjustable deformable convolution (ADC) layer predicts a per-pixel
//! offset field for each of the nine 3x3 kernel taps through an offset
//! convolution `g_o` whose weights are emitted by a pupil-conditioned
//! mapping MLP `g_m`; features are gathered at the displaced fractional
//! positions by bilinear sampling and mixed by the regular kernel `g_c`.
//! Zero offsets reduce the layer to a standard convolution, so `g_m`'s
//! output layer starts at zero.
//!
//! Two predictors share the U-Net-style backbone: the RGB-D variant maps
//! `{A, D; s}` to an amplitude/phase hologram, and the focal-stack variant
//! predicts per-plane initial phases and compositing masks, back-propagates
//! each plane to the SLM and combines the fields.

use crate::error::{Error, Result};
use crate::optics::PupilSpec;
use crate::rng::sub_rng;
use crate::scalar::Scalar;
use crate::scene::FocalStack;
use crate::tape::{mlp_forward, Activation, MlpLayer, Tape, Value};
use crate::tensor::Tensor;
use crate::wave::{asm_propagate, ComplexField, OpticalConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Channel width of the backbone (ADC stages included).
pub const WIDTH: usize = 16;

/// Pupil sizes are normalized by this before entering `g_m`.
pub const S_MAX_MM_DEFAULT: f64 = 5.0;

/// Offset field of one ADC layer: `[18, H, W]`, channel `2p` holding the row
/// and `2p+1` the column displacement of tap `p` (row-major taps).
#[derive(Debug, Clone)]
pub struct OffsetField<T> {
    pub data: Tensor<T>,
}

// ---- parameter store -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors, bound onto a tape once per forward/backward.
#[derive(Debug, Clone, Default)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            values: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), true))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        Bound {
            values: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), false))
                .collect(),
        }
    }
}

/// Tape bindings of a [`Params`] set for one graph.
pub struct Bound {
    values: Vec<Value>,
}

impl Bound {
    pub fn value(&self, id: ParamId) -> Value {
        self.values[id.0]
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }
}

// ---- building blocks ---------------------------------------------------------

fn uniform_init<T: Scalar>(
    params: &mut Params<T>,
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> ParamId {
    let bound = (6.0 / fan_in as f64).sqrt();
    params.push(name, Tensor::rand_uniform(shape, -bound, bound, rng))
}

#[derive(Debug, Clone, Copy)]
struct Conv3x3 {
    w: ParamId,
    b: ParamId,
}

impl Conv3x3 {
    fn new<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv3x3 {
            w: uniform_init(params, format!("{name}.w"), &[c_out, c_in, 3, 3], c_in * 9, rng),
            b: params.push(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Value) -> Result<Value> {
        tape.conv2d(x, bound.value(self.w), bound.value(self.b))
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
    act: Activation,
}

impl Dense {
    fn layer(&self, bound: &Bound) -> MlpLayer {
        MlpLayer {
            weight: bound.value(self.w),
            bias: bound.value(self.b),
            activation: self.act,
        }
    }
}

/// Adjustable deformable convolution layer.
#[derive(Debug, Clone)]
pub struct AdcLayer {
    g_m: Vec<Dense>,
    /// One `[C_out, C_in]` mixing matrix per kernel tap (row-major).
    taps: Vec<ParamId>,
    bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl AdcLayer {
    /// Offset-conv parameter count emitted by `g_m`: weights + biases of a
    /// 3x3 conv `C_in -> 18`.
    pub fn theta_o_len(c_in: usize) -> usize {
        18 * c_in * 9 + 18
    }

    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = 32usize;
        let out_len = Self::theta_o_len(c_in);
        let mut g_m = Vec::new();
        let dims = [(1usize, hidden), (hidden, hidden)];
        for (li, &(n_in, n_out)) in dims.iter().enumerate() {
            g_m.push(Dense {
                w: uniform_init(
                    params,
                    format!("{name}.g_m.{li}.w"),
                    &[n_out, n_in],
                    n_in,
                    rng,
                ),
                b: params.push(format!("{name}.g_m.{li}.b"), Tensor::zeros(&[n_out])),
                act: Activation::Tanh,
            });
        }
        // final layer zero-initialized: training starts at standard conv
        g_m.push(Dense {
            w: params.push(format!("{name}.g_m.2.w"), Tensor::zeros(&[out_len, hidden])),
            b: params.push(format!("{name}.g_m.2.b"), Tensor::zeros(&[out_len])),
            act: Activation::None,
        });
        let taps = (0..9)
            .map(|p| {
                uniform_init(
                    params,
                    format!("{name}.theta_c.tap{p}"),
                    &[c_out, c_in],
                    c_in * 9,
                    rng,
                )
            })
            .collect();
        AdcLayer {
            g_m,
            taps,
            bias: params.push(format!("{name}.theta_c.bias"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
        }
    }

    /// `theta_c` assembled as a `[C_out, C_in, 3, 3]` kernel (for the
    /// standard-conv equivalence checks).
    pub fn theta_c_as_conv<T: Scalar>(&self, params: &Params<T>) -> Tensor<T> {
        let mut w = Tensor::zeros(&[self.c_out, self.c_in, 3, 3]);
        for (p, id) in self.taps.iter().enumerate() {
            let tap = params.get(*id);
            for o in 0..self.c_out {
                for i in 0..self.c_in {
                    w.data_mut()[((o * self.c_in + i) * 3 + p / 3) * 3 + p % 3] =
                        tap.data()[o * self.c_in + i];
                }
            }
        }
        w
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Runs the layer: `theta_o = g_m(s)`, `O = g_o(X; theta_o)`, then the
    /// taps gather bilinear samples at `regular offset + O` and `g_c` mixes
    /// them. Returns the feature map and the offset field.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        x: Value,
        s_norm: Value,
    ) -> Result<(Value, Value)> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::Dimension(format!(
                "ADC input {:?} does not match C_in {}",
                shape, self.c_in
            )));
        }
        let (h, w) = (shape[1], shape[2]);

        let layers: Vec<MlpLayer> = self.g_m.iter().map(|d| d.layer(bound)).collect();
        let theta_o = mlp_forward(tape, s_norm, &layers)?;
        let w_len = 18 * self.c_in * 9;
        let w_o = tape.reshape(
            tape.narrow0(theta_o, 0, w_len)?,
            &[18, self.c_in, 3, 3],
        )?;
        let b_o = tape.narrow0(theta_o, w_len, 18)?;
        let offsets = tape.conv2d(x, w_o, b_o)?;

        let mut acc: Option<Value> = None;
        for p in 0..9 {
            let (dr, dc) = ((p / 3) as f64 - 1.0, (p % 3) as f64 - 1.0);
            let base_r = tape.constant(Tensor::from_fn(&[h, w], |i| T::of((i / w) as f64 + dr)));
            let base_c = tape.constant(Tensor::from_fn(&[h, w], |i| T::of((i % w) as f64 + dc)));
            let coord_r = tape.add(base_r, tape.index0(offsets, 2 * p)?)?;
            let coord_c = tape.add(base_c, tape.index0(offsets, 2 * p + 1)?)?;
            let coords = tape.stack0(&[coord_r, coord_c])?;
            let sampled = tape.bilinear_sample(x, coords)?;
            let bias = if p == 0 { Some(bound.value(self.bias)) } else { None };
            let mixed = tape.channel_linear(sampled, bound.value(self.taps[p]), bias)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, mixed)?,
                None => mixed,
            });
        }
        Ok((acc.expect("nine taps"), offsets))
    }
}

// ---- backbone -----------------------------------------------------------------

/// Network flavor: RGB-D input or focal-stack input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Rgbd,
    FocalStack { n_planes: usize },
}

impl NetKind {
    fn in_channels(&self) -> usize {
        match self {
            NetKind::Rgbd => 4,
            NetKind::FocalStack { n_planes } => *n_planes,
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            NetKind::Rgbd => 2,
            NetKind::FocalStack { n_planes } => 2 * n_planes,
        }
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Conv3x3,
    enc1: Vec<Conv3x3>,
    enc2: Vec<Conv3x3>,
    bott_pre: Conv3x3,
    bott_adc: AdcLayer,
    bott_post: Vec<Conv3x3>,
    dec1_merge: Conv3x3,
    dec1_extra: Vec<Conv3x3>,
    dec1_adc: AdcLayer,
    dec2_merge: Conv3x3,
    dec2_extra: Vec<Conv3x3>,
    dec2_adc: AdcLayer,
    refine: Vec<Conv3x3>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Pupil-adaptive hologram predictor.
#[derive(Debug, Clone)]
pub struct HologramNet<T> {
    pub params: Params<T>,
    pub kind: NetKind,
    pub depth: usize,
    pub s_max_mm: f64,
    backbone: Backbone,
}

/// Everything a forward pass produces besides the head outputs.
pub struct ForwardArtifacts {
    /// Raw head channels `[C_out, H, W]`.
    pub head: Value,
    /// Offset fields of every ADC layer, in network order. Empty unless the
    /// forward ran with instrumentation.
    pub offsets: Vec<Value>,
}

impl<T: Scalar> HologramNet<T> {
    pub fn new(kind: NetKind, depth: usize, s_max_mm: f64, seed: u64) -> Result<Self> {
        if ![14, 20, 26].contains(&depth) {
            return Err(Error::Config(format!(
                "network depth {depth} not in {{14, 20, 26}}"
            )));
        }
        let extra = (depth - 14) / 6;
        let mut params = Params::default();
        let mut rng = sub_rng(seed, "net-init", 0);
        let w = WIDTH;
        let cin = kind.in_channels();
        let stem = Conv3x3::new(&mut params, "stem", cin, w, &mut rng);
        let enc1 = (0..1 + extra)
            .map(|i| Conv3x3::new(&mut params, &format!("enc1.{i}"), w, w, &mut rng))
            .collect();
        let enc2 = (0..2 + extra)
            .map(|i| Conv3x3::new(&mut params, &format!("enc2.{i}"), w, w, &mut rng))
            .collect();
        let bott_pre = Conv3x3::new(&mut params, "bott.pre", w, w, &mut rng);
        let bott_adc = AdcLayer::new(&mut params, "bott.adc", w, w, &mut rng);
        let bott_post = (0..1 + extra)
            .map(|i| Conv3x3::new(&mut params, &format!("bott.post{i}"), w, w, &mut rng))
            .collect();
        let dec1_merge = Conv3x3::new(&mut params, "dec1.merge", 2 * w, w, &mut rng);
        let dec1_extra = (0..extra)
            .map(|i| Conv3x3::new(&mut params, &format!("dec1.extra{i}"), w, w, &mut rng))
            .collect();
        let dec1_adc = AdcLayer::new(&mut params, "dec1.adc", w, w, &mut rng);
        let dec2_merge = Conv3x3::new(&mut params, "dec2.merge", 2 * w, w, &mut rng);
        let dec2_extra = (0..extra)
            .map(|i| Conv3x3::new(&mut params, &format!("dec2.extra{i}"), w, w, &mut rng))
            .collect();
        let dec2_adc = AdcLayer::new(&mut params, "dec2.adc", w, w, &mut rng);
        let refine = (0..2 + extra)
            .map(|i| Conv3x3::new(&mut params, &format!("refine.{i}"), w, w, &mut rng))
            .collect();
        let cout = kind.out_channels();
        let head_w = uniform_init(&mut params, "head.w".into(), &[cout, w], w, &mut rng);
        let head_b = params.push("head.b", Tensor::zeros(&[cout]));
        Ok(HologramNet {
            params,
            kind,
            depth,
            s_max_mm,
            backbone: Backbone {
                stem,
                enc1,
                enc2,
                bott_pre,
                bott_adc,
                bott_post,
                dec1_merge,
                dec1_extra,
                dec1_adc,
                dec2_merge,
                dec2_extra,
                dec2_adc,
                refine,
                head_w,
                head_b,
            },
        })
    }

    pub fn adc_layers(&self) -> [&AdcLayer; 3] {
        [
            &self.backbone.bott_adc,
            &self.backbone.dec1_adc,
            &self.backbone.dec2_adc,
        ]
    }

    /// Normalized pupil scalar `s / s_max` as a rank-1 leaf.
    pub fn pupil_input(&self, tape: &Tape<T>, pupil_mm: f64) -> Value {
        tape.constant(
            Tensor::new(&[1], vec![T::of(pupil_mm / self.s_max_mm)]).expect("1-element"),
        )
    }

    /// Backbone forward over a `[C_in, H, W]` input; H and W must be
    /// divisible by 4 (two pooling stages).
    pub fn forward(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        input: Value,
        s_norm: Value,
        instrument: bool,
    ) -> Result<ForwardArtifacts> {
        let shape = tape.shape(input);
        if shape.len() != 3 || shape[0] != self.kind.in_channels() {
            return Err(Error::Dimension(format!(
                "input {:?} does not match {} channels",
                shape,
                self.kind.in_channels()
            )));
        }
        if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::Dimension(format!(
                "spatial extents must be divisible by 4; got {:?}",
                &shape[1..]
            )));
        }
        let bb = &self.backbone;
        let mut offsets = Vec::new();
        let mut record = |o: Value| {
            if instrument {
                offsets.push(o);
            }
        };

        let mut x = tape.relu(bb.stem.apply(tape, bound, input)?);
        for conv in &bb.enc1 {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }
        let skip_a = x;
        x = tape.avg_pool2(x)?;
        for conv in &bb.enc2 {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }
        let skip_b = x;
        x = tape.avg_pool2(x)?;

        x = tape.relu(bb.bott_pre.apply(tape, bound, x)?);
        let (y, off) = bb.bott_adc.forward(tape, bound, x, s_norm)?;
        record(off);
        x = tape.relu(y);
        for conv in &bb.bott_post {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }

        x = tape.upsample2(x)?;
        x = tape.concat0(&[x, skip_b])?;
        x = tape.relu(bb.dec1_merge.apply(tape, bound, x)?);
        for conv in &bb.dec1_extra {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }
        let (y, off) = bb.dec1_adc.forward(tape, bound, x, s_norm)?;
        record(off);
        x = tape.relu(y);

        x = tape.upsample2(x)?;
        x = tape.concat0(&[x, skip_a])?;
        x = tape.relu(bb.dec2_merge.apply(tape, bound, x)?);
        for conv in &bb.dec2_extra {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }
        let (y, off) = bb.dec2_adc.forward(tape, bound, x, s_norm)?;
        record(off);
        x = tape.relu(y);

        for conv in &bb.refine {
            x = tape.relu(conv.apply(tape, bound, x)?);
        }
        let head = tape.channel_linear(x, bound.value(bb.head_w), Some(bound.value(bb.head_b)))?;
        Ok(ForwardArtifacts { head, offsets })
    }
}

/// Normalized-diopter depth plane in [0,1] (near = 1).
pub fn normalize_depth<T: Scalar>(depth: &Tensor<T>, cfg: &OpticalConfig<T>) -> Tensor<T> {
    let lo = 1.0 / cfg.depth_far.to_f64_c();
    let hi = 1.0 / cfg.depth_near.to_f64_c();
    depth.map(|d| {
        let dp = 1.0 / d.to_f64_c();
        T::of(((dp - lo) / (hi - lo)).clamp(0.0, 1.0))
    })
}

/// Amplitude/phase head mapping shared by both variants: softplus keeps the
/// amplitude non-negative, `pi * tanh` bounds the phase.
fn amp_phase_from_head<T: Scalar>(
    tape: &Tape<T>,
    amp_raw: Value,
    phase_raw: Value,
) -> Result<(Value, Value)> {
    let amp = tape.softplus(amp_raw);
    let phase = tape.scale(tape.tanh(phase_raw), std::f64::consts::PI)?;
    Ok((amp, phase))
}

/// Hologram prediction `{H_A, H_Phi}` plus instrumentation.
pub struct Prediction {
    pub amplitude: Value,
    pub phase: Value,
    pub offsets: Vec<Value>,
}

/// RGB-D predictor: `H_A, H_Phi = G(A, D; s)`.
pub fn predict_hologram<T: Scalar>(
    net: &HologramNet<T>,
    tape: &Tape<T>,
    bound: &Bound,
    scene_rgb: &Tensor<T>,
    scene_depth: &Tensor<T>,
    pupil: &PupilSpec<T>,
    cfg: &OpticalConfig<T>,
    instrument: bool,
) -> Result<Prediction> {
    if net.kind != NetKind::Rgbd {
        return Err(Error::Config("predict_hologram needs an RGB-D net".into()));
    }
    let (h, w) = (scene_depth.shape()[0], scene_depth.shape()[1]);
    if scene_rgb.shape() != [3, h, w] {
        return Err(Error::Dimension(format!(
            "rgb {:?} does not match depth {:?}",
            scene_rgb.shape(),
            scene_depth.shape()
        )));
    }
    let rgb = tape.constant(scene_rgb.clone());
    let depth_n = tape.constant(normalize_depth(scene_depth, cfg));
    let depth_plane = tape.reshape(depth_n, &[1, h, w])?;
    let input = tape.concat0(&[rgb, depth_plane])?;
    let s_norm = net.pupil_input(tape, pupil.diameter_mm.to_f64_c());
    let art = net.forward(tape, bound, input, s_norm, instrument)?;
    let amp_raw = tape.index0(art.head, 0)?;
    let phase_raw = tape.index0(art.head, 1)?;
    let (amplitude, phase) = amp_phase_from_head(tape, amp_raw, phase_raw)?;
    Ok(Prediction {
        amplitude,
        phase,
        offsets: art.offsets,
    })
}

/// Focal-stack predictor: per-plane initial phases and masks, back-propagated
/// and composited into a single complex hologram.
pub fn predict_fs_hologram<T: Scalar>(
    net: &HologramNet<T>,
    tape: &Tape<T>,
    bound: &Bound,
    stack: &FocalStack<T>,
    pupil: &PupilSpec<T>,
    cfg: &OpticalConfig<T>,
    instrument: bool,
) -> Result<Prediction> {
    let n = match net.kind {
        NetKind::FocalStack { n_planes } => n_planes,
        NetKind::Rgbd => {
            return Err(Error::Config("predict_fs_hologram needs a focal-stack net".into()))
        }
    };
    if stack.images.len() != n {
        return Err(Error::Dimension(format!(
            "stack has {} planes, net expects {n}",
            stack.images.len()
        )));
    }
    let planes: Vec<Tensor<T>> = (0..n).map(|k| stack.target_green(k)).collect();
    let (h, w) = (planes[0].shape()[0], planes[0].shape()[1]);
    let plane_values: Vec<Value> = planes
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    let input = tape.stack0(&plane_values)?;
    let s_norm = net.pupil_input(tape, pupil.diameter_mm.to_f64_c());
    let art = net.forward(tape, bound, input, s_norm, instrument)?;

    // head: N phase channels (pi*tanh) then N mask logits (softmax over planes)
    let phase_raw = tape.narrow0(art.head, 0, n)?;
    let phases = tape.scale(tape.tanh(phase_raw), std::f64::consts::PI)?;
    let masks = tape.softmax0(tape.narrow0(art.head, n, n)?)?;

    let mut sum_re: Option<Value> = None;
    let mut sum_im: Option<Value> = None;
    for t in 0..n {
        let phi = tape.index0(phases, t)?;
        let amp = plane_values[t];
        let field = ComplexField::from_polar(tape, amp, phi)?;
        let u_t = stack.schedule.slm_distances[t];
        let back = asm_propagate(tape, &field, -u_t, cfg)?;
        let w_t = tape.index0(masks, t)?;
        let re = tape.mul(back.re(tape)?, w_t)?;
        let im = tape.mul(back.im(tape)?, w_t)?;
        sum_re = Some(match sum_re {
            Some(a) => tape.add(a, re)?,
            None => re,
        });
        sum_im = Some(match sum_im {
            Some(a) => tape.add(a, im)?,
            None => im,
        });
    }
    let composite = ComplexField::from_planes(
        tape,
        tape.stack0(&[sum_re.expect("n >= 1"), sum_im.expect("n >= 1")])?,
    )?;
    let _ = (h, w);
    Ok(Prediction {
        amplitude: composite.amplitude(tape)?,
        phase: composite.phase(tape)?,
        offsets: art.offsets,
    })
}

/// Collects the ADC offset fields recorded during an instrumented forward.
pub fn extract_offsets<T: Scalar>(
    tape: &Tape<T>,
    prediction: &Prediction,
) -> Result<Vec<OffsetField<T>>> {
    if prediction.offsets.is_empty() {
        return Err(Error::State(
            "forward ran without instrumentation; no offsets recorded".into(),
        ));
    }
    Ok(prediction
        .offsets
        .iter()
        .map(|&v| OffsetField {
            data: (*tape.value(v)).clone(),
        })
        .collect())
}

// ---- checkpoints -----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    kind: NetKind,
    depth: usize,
    s_max_mm: f64,
    layers: Vec<(String, Vec<usize>)>,
}

const CHECKPOINT_VERSION: &str = "hnet-1";

/// Writes `manifest.json` plus one HFT1 file per parameter.
pub fn save_checkpoint<T: Scalar>(net: &HologramNet<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        kind: net.kind,
        depth: net.depth,
        s_max_mm: net.s_max_mm,
        layers: net
            .params
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (name, t) in &net.params.entries {
        t.write_hft(&dir.join(format!("{name}.hft")))?;
    }
    Ok(())
}

/// Rebuilds a network from [`save_checkpoint`] output.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<HologramNet<T>> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::io(dir.join("manifest.json").display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Dataset(format!(
            "checkpoint version {} unsupported",
            manifest.version
        )));
    }
    let mut net = HologramNet::<T>::new(manifest.kind, manifest.depth, manifest.s_max_mm, 0)?;
    for (name, shape) in &manifest.layers {
        let t = Tensor::<T>::read_hft(&dir.join(format!("{name}.hft")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Dataset(format!(
                "checkpoint tensor {name} has shape {:?}, manifest says {:?}",
                t.shape(),
                shape
            )));
        }
        let slot = net
            .params
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Dataset(format!("unknown checkpoint tensor {name}")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::Dataset(format!(
                "checkpoint tensor {name} does not fit the architecture"
            )));
        }
        slot.1 = t;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, TextureKind};

    #[test]
    fn depth_must_be_supported() {
        assert!(HologramNet::<f32>::new(NetKind::Rgbd, 15, 5.0, 0).is_err());
        for d in [14usize, 20, 26] {
            assert!(HologramNet::<f32>::new(NetKind::Rgbd, d, 5.0, 0).is_ok());
        }
    }

    #[test]
    fn theta_o_len_matches_spec_scale() {
        // ~2.4k values for the 16-channel stages
        assert_eq!(AdcLayer::theta_o_len(16), 18 * 16 * 9 + 18);
    }

    #[test]
    fn untrained_prediction_is_finite_and_nonnegative() {
        let cfg = OpticalConfig::<f32>::default();
        let net = HologramNet::<f32>::new(NetKind::Rgbd, 14, 5.0, 3).unwrap();
        let scene = generate_scene(1, 3, TextureKind::Polygons, 32, &cfg).unwrap();
        let tape = Tape::new();
        let bound = net.params.bind_frozen(&tape);
        let pred = predict_hologram(
            &net,
            &tape,
            &bound,
            &scene.rgb,
            &scene.depth_map,
            &PupilSpec::centered(3.0),
            &cfg,
            false,
        )
        .unwrap();
        let amp = tape.value(pred.amplitude);
        let phase = tape.value(pred.phase);
        assert_eq!(amp.shape(), &[32, 32]);
        assert_eq!(phase.shape(), &[32, 32]);
        assert!(amp.all_finite() && phase.all_finite());
        assert!(amp.data().iter().all(|&a| a >= 0.0));
        let pi = std::f32::consts::PI;
        assert!(phase.data().iter().all(|&p| (-pi..=pi).contains(&p)));
    }

    #[test]
    fn offsets_start_at_zero_and_require_instrumentation() {
        let cfg = OpticalConfig::<f32>::default();
        let net = HologramNet::<f32>::new(NetKind::Rgbd, 14, 5.0, 4).unwrap();
        let scene = generate_scene(2, 2, TextureKind::Polygons, 16, &cfg).unwrap();
        let tape = Tape::new();
        let bound = net.params.bind_frozen(&tape);
        let pred = predict_hologram(
            &net,
            &tape,
            &bound,
            &scene.rgb,
            &scene.depth_map,
            &PupilSpec::centered(2.0),
            &cfg,
            true,
        )
        .unwrap();
        let offsets = extract_offsets(&tape, &pred).unwrap();
        assert_eq!(offsets.len(), 3, "one field per ADC layer");
        for field in &offsets {
            assert_eq!(field.data.shape()[0], 18);
            assert!(field.data.data().iter().all(|&v| v == 0.0), "zero-init g_m");
        }

        let tape2 = Tape::new();
        let bound2 = net.params.bind_frozen(&tape2);
        let pred2 = predict_hologram(
            &net,
            &tape2,
            &bound2,
            &scene.rgb,
            &scene.depth_map,
            &PupilSpec::centered(2.0),
            &cfg,
            false,
        )
        .unwrap();
        assert!(matches!(
            extract_offsets(&tape2, &pred2),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = HologramNet::<f32>::new(NetKind::Rgbd, 14, 5.0, 9).unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let back: HologramNet<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.depth, 14);
        assert_eq!(back.kind, NetKind::Rgbd);
        for (a, b) in net.params.tensors().zip(back.params.tensors()) {
            assert_eq!(a, b);
        }
    }
}
