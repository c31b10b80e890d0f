//! Procedural layered scenes and incoherent focal-stack rendering.
//!
//! Scenes are ordered layer stacks (back to front) of flat color planes with
//! binary alpha masks and polygon decals for visible defocus contrast. Focal
//! stacks blur each layer by its circle of confusion (anti-aliased pillbox,
//! periodic boundary) and composite the blurred premultiplied colors with
//! blurred masks back to front, which keeps occlusion boundaries plausible
//! without a path tracer.

use crate::error::{Error, Result};
use crate::optics::{coc_pixels, FocalSchedule, PupilSpec};
use crate::pngio;
use crate::rng::sub_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wave::OpticalConfig;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Polygons,
    Noise,
}

/// One scene layer: color plane, binary alpha mask, metric depth.
#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub color: Tensor<T>,
    pub alpha: Tensor<T>,
    pub depth: T,
}

/// Layered RGB-D scene; `layers` runs back to front.
#[derive(Debug, Clone)]
pub struct SceneRgbd<T> {
    /// All-in-focus composite, `[3,H,W]` in [0,1].
    pub rgb: Tensor<T>,
    /// Front-most surface depth per pixel, meters.
    pub depth_map: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub seed: u64,
    pub texture: TextureKind,
}

/// Incoherent focal stack rendered for one pupil.
#[derive(Debug, Clone)]
pub struct FocalStack<T> {
    /// One `[3,H,W]` image per focal plane.
    pub images: Vec<Tensor<T>>,
    pub schedule: FocalSchedule<T>,
    pub pupil: PupilSpec<T>,
    /// CoC map (pixels) of the composite depth at each plane.
    pub coc_maps: Vec<Tensor<T>>,
    /// Set when some blur kernel had to be clamped to the image extent.
    pub kernel_clamped: bool,
}

impl<T: Scalar> FocalStack<T> {
    /// Green channel of plane `k`, the coherent training target at 520 nm.
    pub fn target_green(&self, k: usize) -> Tensor<T> {
        green_channel(&self.images[k])
    }
}

pub fn green_channel<T: Scalar>(rgb: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    Tensor::from_fn(&[h, w], |i| rgb.data()[h * w + i])
}

// ---- disc blur ---------------------------------------------------------------

/// Anti-aliased pillbox taps for a disc of `diameter_px`: weight
/// `clamp(D/2 + 0.5 - dist, 0, 1)`, normalized to unit sum. Diameters under
/// 1 px collapse to the identity.
pub fn disc_kernel(diameter_px: f64) -> Vec<(isize, isize, f64)> {
    if diameter_px < 1.0 {
        return vec![(0, 0, 1.0)];
    }
    let r = diameter_px / 2.0;
    let reach = (r + 0.5).ceil() as isize;
    let mut taps = Vec::new();
    let mut total = 0.0;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let dist = ((dr * dr + dc * dc) as f64).sqrt();
            let w = (r + 0.5 - dist).clamp(0.0, 1.0);
            if w > 0.0 {
                taps.push((dr, dc, w));
                total += w;
            }
        }
    }
    for t in &mut taps {
        t.2 /= total;
    }
    taps
}

/// Convolves each plane of a `[H,W]` or `[C,H,W]` tensor with the normalized
/// pillbox (periodic boundary, so constants and the image mean are
/// preserved). Diameters above the image extent are clamped.
pub fn disc_blur<T: Scalar>(image: &Tensor<T>, diameter_px: f64) -> Result<Tensor<T>> {
    if diameter_px < 0.0 {
        return Err(Error::Domain(format!("negative blur diameter {diameter_px}")));
    }
    let (planes, h, w) = match image.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension(format!(
                "disc_blur wants [H,W] or [C,H,W]; got {s:?}"
            )))
        }
    };
    let diameter = diameter_px.min(h.min(w) as f64);
    let taps = disc_kernel(diameter);
    if taps.len() == 1 {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(image.shape());
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = &image.data()[p * h * w..(p + 1) * h * w];
            let _ = p..planes; // planes bound only sanity
            for &(dr, dc, wt) in &taps {
                let wt = T::of(wt);
                for r in 0..h {
                    let sr = ((r as isize + dr).rem_euclid(h as isize)) as usize;
                    let drow = &mut dst[r * w..(r + 1) * w];
                    let srow = &src[sr * w..(sr + 1) * w];
                    if dc == 0 {
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d = *d + wt * s;
                        }
                    } else {
                        for c in 0..w {
                            let sc = ((c as isize + dc).rem_euclid(w as isize)) as usize;
                            drow[c] = drow[c] + wt * srow[sc];
                        }
                    }
                }
            }
        });
    Ok(out)
}

// ---- scene generation ----------------------------------------------------------

fn fill_convex_polygon<T: Scalar>(
    mask: &mut Tensor<T>,
    verts: &[(f64, f64)],
) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let n = verts.len();
    for r in 0..h {
        for c in 0..w {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut inside = true;
            for i in 0..n {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % n];
                let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                if cross < 0.0 {
                    inside = false;
                    break;
                }
            }
            if inside {
                mask.data_mut()[r * w + c] = T::one();
            }
        }
    }
}

fn random_convex_polygon(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    min_radius: f64,
    max_radius: f64,
) -> Vec<(f64, f64)> {
    let cx = rng.gen_range(0.15..0.85) * w as f64;
    let cy = rng.gen_range(0.15..0.85) * h as f64;
    let n = rng.gen_range(3..=7usize);
    let base = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = rng.gen_range(min_radius..max_radius) * h.min(w) as f64;
    // ascending angle with y-down screen coords keeps every edge cross positive
    (0..n)
        .map(|i| {
            let ang = base + std::f64::consts::TAU * i as f64 / n as f64
                + rng.gen_range(-0.2..0.2);
            let rr = radius * rng.gen_range(0.7..1.0);
            (cx + rr * ang.cos(), cy + rr * ang.sin())
        })
        .collect()
}

fn smooth_noise<T: Scalar>(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<T> {
    let gn = 6usize;
    let grid: Vec<f64> = (0..gn * gn).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_fn(&[h, w], |i| {
        let (r, c) = (i / w, i % w);
        let gy = r as f64 / h as f64 * (gn - 1) as f64;
        let gx = c as f64 / w as f64 * (gn - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let y1 = (y0 + 1).min(gn - 1);
        let x1 = (x0 + 1).min(gn - 1);
        let v = grid[y0 * gn + x0] * (1.0 - fy) * (1.0 - fx)
            + grid[y0 * gn + x1] * (1.0 - fy) * fx
            + grid[y1 * gn + x0] * fy * (1.0 - fx)
            + grid[y1 * gn + x1] * fy * fx;
        T::of(v)
    })
}

fn layer_color<T: Scalar>(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    texture: TextureKind,
) -> Tensor<T> {
    let mut color = Tensor::zeros(&[3, h, w]);
    match texture {
        TextureKind::Polygons => {
            let base: [f64; 3] = [
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
            ];
            for c in 0..3 {
                for i in 0..h * w {
                    color.data_mut()[c * h * w + i] = T::of(base[c]);
                }
            }
        }
        TextureKind::Noise => {
            for c in 0..3 {
                let n = smooth_noise::<T>(rng, h, w);
                let lo = rng.gen_range(0.1..0.4);
                let hi = rng.gen_range(0.6..0.95);
                for i in 0..h * w {
                    color.data_mut()[c * h * w + i] =
                        T::of(lo + (hi - lo) * n.data()[i].to_f64_c());
                }
            }
        }
    }
    // colorful polygon decals: high-contrast defocus cues on every layer
    let n_decals = rng.gen_range(3..=6usize);
    for _ in 0..n_decals {
        let verts = random_convex_polygon(rng, h, w, 0.04, 0.16);
        let mut mask = Tensor::<T>::zeros(&[h, w]);
        fill_convex_polygon(&mut mask, &verts);
        let decal: [f64; 3] = [
            rng.gen_range(0.0..1.0f64).round(),
            rng.gen_range(0.0..1.0f64).round(),
            rng.gen_range(0.0..1.0f64).round(),
        ];
        for c in 0..3 {
            for i in 0..h * w {
                if mask.data()[i] > T::zero() {
                    color.data_mut()[c * h * w + i] = T::of(decal[c]);
                }
            }
        }
    }
    color
}

/// Deterministic procedural scene: `n_layers` planes at distinct depths
/// (uniform in diopters over the configured range), background opaque,
/// foreground layers shaped by random convex polygons.
pub fn generate_scene<T: Scalar>(
    seed: u64,
    n_layers: usize,
    texture: TextureKind,
    resolution: usize,
    cfg: &OpticalConfig<T>,
) -> Result<SceneRgbd<T>> {
    if !(2..=6).contains(&n_layers) {
        return Err(Error::Domain(format!(
            "n_layers must be in 2..=6; got {n_layers}"
        )));
    }
    let (h, w) = (resolution, resolution);
    let mut rng = sub_rng(seed, "scene", 0);
    let lo = 1.0 / cfg.depth_far.to_f64_c();
    let hi = 1.0 / cfg.depth_near.to_f64_c();

    // distinct diopters, ascending -> depths descending (back first)
    let mut diopters: Vec<f64>;
    loop {
        diopters = (0..n_layers).map(|_| rng.gen_range(lo..hi)).collect();
        diopters.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let min_gap = (hi - lo) / (n_layers as f64 * 4.0);
        if diopters.windows(2).all(|p| p[1] - p[0] > min_gap) {
            break;
        }
    }

    let mut layers = Vec::with_capacity(n_layers);
    for (li, &dp) in diopters.iter().enumerate() {
        let color = layer_color(&mut rng, h, w, texture);
        let alpha = if li == 0 {
            Tensor::full(&[h, w], T::one())
        } else {
            let mut a = Tensor::<T>::zeros(&[h, w]);
            for _ in 0..rng.gen_range(1..=3usize) {
                let verts = random_convex_polygon(&mut rng, h, w, 0.10, 0.30);
                fill_convex_polygon(&mut a, &verts);
            }
            a
        };
        layers.push(Layer {
            color,
            alpha,
            depth: T::of(1.0 / dp),
        });
    }

    // all-in-focus composite + front-most depth
    let mut rgb = Tensor::<T>::zeros(&[3, h, w]);
    let mut depth_map = Tensor::<T>::full(&[h, w], layers[0].depth);
    for layer in &layers {
        for i in 0..h * w {
            let a = layer.alpha.data()[i];
            if a > T::zero() {
                depth_map.data_mut()[i] = layer.depth;
            }
            for c in 0..3 {
                let idx = c * h * w + i;
                rgb.data_mut()[idx] =
                    layer.color.data()[idx] * a + rgb.data()[idx] * (T::one() - a);
            }
        }
    }
    Ok(SceneRgbd {
        rgb,
        depth_map,
        layers,
        seed,
        texture,
    })
}

// ---- focal stack rendering ------------------------------------------------------

/// Renders the scene as seen focused at `focus` through `pupil` (size sets
/// the blur, center sets the parallax shift). Returns the composited RGB
/// image and whether any kernel was clamped.
pub fn render_plane<T: Scalar>(
    scene: &SceneRgbd<T>,
    pupil: &PupilSpec<T>,
    focus: T,
    cfg: &OpticalConfig<T>,
) -> Result<(Tensor<T>, bool)> {
    let (h, w) = (scene.depth_map.shape()[0], scene.depth_map.shape()[1]);
    let s_m = pupil.diameter_m();
    let (ox, oy) = pupil.center_m();
    let mut out = Tensor::<T>::zeros(&[3, h, w]);
    let mut clamped = false;
    for layer in &scene.layers {
        let c_px = coc_pixels(layer.depth, focus, s_m, cfg)?.to_f64_c();
        if c_px > h.min(w) as f64 {
            clamped = true;
        }
        // lateral parallax: angular shift offset*(1/d - 1/focus), in pixels
        let par = (T::one() / layer.depth - T::one() / focus).to_f64_c()
            * cfg.eye_sensor.to_f64_c()
            / cfg.image_pitch.to_f64_c();
        let shift_c = (ox.to_f64_c() * par).round() as isize;
        let shift_r = (oy.to_f64_c() * par).round() as isize;

        let alpha = shift_wrap(&layer.alpha, shift_r, shift_c);
        let mut premult = Tensor::<T>::zeros(&[3, h, w]);
        let color = shift_wrap(&layer.color, shift_r, shift_c);
        for c in 0..3 {
            for i in 0..h * w {
                premult.data_mut()[c * h * w + i] =
                    color.data()[c * h * w + i] * alpha.data()[i];
            }
        }
        let b_premult = disc_blur(&premult, c_px)?;
        let b_alpha = disc_blur(&alpha, c_px)?;
        for c in 0..3 {
            for i in 0..h * w {
                let idx = c * h * w + i;
                out.data_mut()[idx] = b_premult.data()[idx]
                    + out.data()[idx] * (T::one() - b_alpha.data()[i]);
            }
        }
    }
    for v in out.data_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
    Ok((out, clamped))
}

fn shift_wrap<T: Scalar>(t: &Tensor<T>, dr: isize, dc: isize) -> Tensor<T> {
    if dr == 0 && dc == 0 {
        return t.clone();
    }
    let (planes, h, w) = match t.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("shift_wrap on rank-2/3 tensors only"),
    };
    let mut out = Tensor::zeros(t.shape());
    for p in 0..planes {
        for r in 0..h {
            let sr = ((r as isize + dr).rem_euclid(h as isize)) as usize;
            for c in 0..w {
                let sc = ((c as isize + dc).rem_euclid(w as isize)) as usize;
                out.data_mut()[(p * h + r) * w + c] = t.data()[(p * h + sr) * w + sc];
            }
        }
    }
    out
}

/// Renders the per-plane incoherent ground truth for one pupil.
pub fn render_focal_stack<T: Scalar>(
    scene: &SceneRgbd<T>,
    pupil: &PupilSpec<T>,
    schedule: &FocalSchedule<T>,
    cfg: &OpticalConfig<T>,
) -> Result<FocalStack<T>> {
    let results: Vec<(Tensor<T>, bool)> = schedule
        .focal_distances
        .par_iter()
        .map(|&e_d| render_plane(scene, pupil, e_d, cfg))
        .collect::<Result<_>>()?;
    let mut coc_maps = Vec::with_capacity(schedule.len());
    for &e_d in &schedule.focal_distances {
        coc_maps.push(crate::optics::coc_map(&scene.depth_map, e_d, pupil, cfg)?);
    }
    let clamped = results.iter().any(|(_, c)| *c);
    Ok(FocalStack {
        images: results.into_iter().map(|(img, _)| img).collect(),
        schedule: schedule.clone(),
        pupil: *pupil,
        coc_maps,
        kernel_clamped: clamped,
    })
}

// ---- dataset on disk --------------------------------------------------------------

/// Dataset generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub resolution: usize,
    pub scenes: usize,
    pub pupils_mm: Vec<f64>,
    pub layers_min: usize,
    pub layers_max: usize,
    pub texture: TextureKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            resolution: 128,
            scenes: 50,
            pupils_mm: vec![2.0, 3.0, 4.0],
            layers_min: 2,
            layers_max: 4,
            texture: TextureKind::Polygons,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    resolution: usize,
    n_layers: usize,
    texture: TextureKind,
    layer_depths_m: Vec<f64>,
    pupils_mm: Vec<f64>,
}

fn pupil_dir_name(mm: f64) -> String {
    format!("stack_s{mm}")
}

/// Renders one scene (layer count drawn from the spec's range) and writes
/// `scene_<seed>/rgb.png, depth.hft, stack_s<mm>/{plane_<k>.png, schedule.csv},
/// meta.json`.
pub fn write_scene_dir<T: Scalar>(
    root: &Path,
    scene_seed: u64,
    spec: &DatasetSpec,
    cfg: &OpticalConfig<T>,
) -> Result<std::path::PathBuf> {
    let n_layers = if spec.layers_min == spec.layers_max {
        spec.layers_min
    } else {
        let mut rng = sub_rng(scene_seed, "layer-count", 0);
        rng.gen_range(spec.layers_min..=spec.layers_max)
    };
    let scene = generate_scene(scene_seed, n_layers, spec.texture, spec.resolution, cfg)?;
    let dir = root.join(format!("scene_{scene_seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    pngio::save_rgb16(&scene.rgb, &dir.join("rgb.png"))?;
    scene.depth_map.write_hft(&dir.join("depth.hft"))?;
    for &mm in &spec.pupils_mm {
        let pupil = PupilSpec::centered(T::of(mm));
        let schedule = crate::optics::plan_focal_schedule(cfg, &pupil)?;
        let stack = render_focal_stack(&scene, &pupil, &schedule, cfg)?;
        let sdir = dir.join(pupil_dir_name(mm));
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(sdir.display().to_string(), e))?;
        for (k, img) in stack.images.iter().enumerate() {
            pngio::save_rgb16(img, &sdir.join(format!("plane_{k}.png")))?;
        }
        std::fs::write(sdir.join("schedule.csv"), schedule.to_csv())
            .map_err(|e| Error::io(sdir.display().to_string(), e))?;
    }
    let meta = SceneMeta {
        seed: scene_seed,
        resolution: spec.resolution,
        n_layers,
        texture: spec.texture,
        layer_depths_m: scene.layers.iter().map(|l| l.depth.to_f64_c()).collect(),
        pupils_mm: spec.pupils_mm.clone(),
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(dir)
}

/// Scene as loaded back from a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedScene<T> {
    pub seed: u64,
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    /// (pupil_mm, focal stack) in the order written.
    pub stacks: Vec<(f64, FocalStack<T>)>,
}

pub fn load_scene_dir<T: Scalar>(dir: &Path, cfg: &OpticalConfig<T>) -> Result<LoadedScene<T>> {
    let meta_raw = std::fs::read_to_string(dir.join("meta.json"))
        .map_err(|e| Error::io(dir.join("meta.json").display().to_string(), e))?;
    let meta: SceneMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
    let rgb = pngio::load_rgb(&dir.join("rgb.png"))?;
    let depth = Tensor::read_hft(&dir.join("depth.hft"))?;
    let mut stacks = Vec::new();
    for &mm in &meta.pupils_mm {
        let pupil = PupilSpec::centered(T::of(mm));
        let schedule = crate::optics::plan_focal_schedule(cfg, &pupil)?;
        let sdir = dir.join(pupil_dir_name(mm));
        let mut images = Vec::with_capacity(schedule.len());
        for k in 0..schedule.len() {
            images.push(pngio::load_rgb(&sdir.join(format!("plane_{k}.png")))?);
        }
        let mut coc_maps = Vec::with_capacity(schedule.len());
        for &e_d in &schedule.focal_distances {
            coc_maps.push(crate::optics::coc_map(&depth, e_d, &pupil, cfg)?);
        }
        stacks.push((
            mm,
            FocalStack {
                images,
                schedule,
                pupil,
                coc_maps,
                kernel_clamped: false,
            },
        ));
    }
    Ok(LoadedScene {
        seed: meta.seed,
        rgb,
        depth,
        stacks,
    })
}
