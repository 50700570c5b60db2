//! The single implicit RGB-D scene representation.
//!
//! Color is a coordinate MLP `I(u, v)` over windowed positional encodings;
//! depth is a global plane intersection plus a per-pixel MLP offset
//! `D(u, v) = plane(u, v) + offset(u, v)`, passed through a smooth positivity
//! barrier. The offset head is zero-initialized, so a fresh scene is exactly
//! its plane, and the coarse-to-fine window `alpha` gates how much spatial
//! frequency either MLP can see.
//!
//! Pixels are normalized to [-1, 1] by the sensor extent of the intrinsics in
//! use; depth offsets are along z (rays are z-normalized, so plane depth and
//! offset add in the same unit).

mod checkpoint;
pub mod graph;

pub use checkpoint::{load_scene, save_scene};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{ray_direction, Intrinsics, Vec3};
use crate::diffmath::DTensor;
use crate::evalx::DepthMap;
use crate::rng::{stream, CounterRng};

/// Rays closer than this to plane-parallel are degenerate.
pub const EPS_PARALLEL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("ray nearly parallel to plane (n·r = {0:.3e})")]
    DegenerateRay(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Octave-band positional encoding with a coarse-to-fine window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Number of octave frequency bands L.
    pub num_bands: usize,
    /// Pass raw (u, v) through unencoded.
    pub include_raw: bool,
    /// Coarse-to-fine progress in [0, L].
    pub alpha: f64,
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_bands < 1 {
            return Err(SceneError::InvalidConfig("num_bands must be >= 1".into()));
        }
        if !(0.0 <= self.alpha && self.alpha <= self.num_bands as f64) {
            return Err(SceneError::InvalidConfig(format!(
                "alpha {} outside [0, {}]",
                self.alpha, self.num_bands
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        (if self.include_raw { 2 } else { 0 }) + 4 * self.num_bands
    }
}

/// Unconstrained plane parameters: the stored normal is normalized on use
/// with its z sign fixed positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneParams {
    pub normal_raw: Vec3,
    pub d_p: f64,
}

impl PlaneParams {
    /// Unit normal with non-negative z component.
    pub fn normalized(&self) -> Vec3 {
        let n = self.normal_raw;
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let s = if n[2] < 0.0 { -1.0 / len } else { 1.0 / len };
        [n[0] * s, n[1] * s, n[2] * s]
    }
}

/// Fully-connected coordinate MLP; hidden activations are SiLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// One `[in, out]` matrix per layer.
    pub weights: Vec<DTensor>,
    /// One `[out]` vector per layer.
    pub biases: Vec<DTensor>,
}

pub enum MlpHead {
    /// Sigmoid per channel (image colors in [0, 1]).
    Sigmoid,
    /// Raw linear output (depth offsets).
    Linear,
}

impl Mlp {
    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.weights.iter().map(|m| m.shape()[0]).collect();
        w.push(self.weights.last().map_or(0, |m| m.shape()[1]));
        w
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().map_or(0, |m| m.shape()[1])
    }

    /// Batched eager forward; mirrors the tape graph op-for-op (see
    /// [`graph`]), so both paths compute identical values.
    pub fn forward_batch(&self, x: &DTensor, head: MlpHead) -> DTensor {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mm = crate::diffmath::matmul_eager(&h, w);
            let (m, n) = (mm.shape()[0], mm.shape()[1]);
            let mut d = Vec::with_capacity(m * n);
            let md = mm.data();
            let bd = b.data();
            for i in 0..m {
                for j in 0..n {
                    d.push(md[i * n + j] + bd[j]);
                }
            }
            if l < last {
                for v in d.iter_mut() {
                    *v = graph::silu_eager(*v);
                }
            } else if matches!(head, MlpHead::Sigmoid) {
                for v in d.iter_mut() {
                    *v = graph::sigmoid_eager(*v);
                }
            }
            h = DTensor::new(vec![m, n], d).expect("finite MLP activations");
        }
        h
    }
}

/// Architecture and encoding choices; the part of the model that is config,
/// not learned state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths of the image MLP.
    pub image_hidden: Vec<usize>,
    /// Hidden layer widths of the depth-offset MLP.
    pub depth_hidden: Vec<usize>,
    /// Octave frequency bands L.
    pub bands: usize,
    pub include_raw: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_hidden: vec![128, 128, 128, 128],
            depth_hidden: vec![64, 64, 64, 64],
            bands: 8,
            include_raw: true,
        }
    }
}

/// The implicit RGB-D scene: image MLP, depth-offset MLP, plane, encoding.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub image_mlp: Mlp,
    pub depth_mlp: Mlp,
    pub plane: PlaneParams,
    pub encoding: EncodingConfig,
    pub channels: usize,
    /// Depth floor of the positivity barrier (scene units).
    pub barrier_z_min: f64,
    /// Barrier sharpness; a power of two so the scale/unscale pair is exact.
    pub barrier_beta: f64,
}

/// Coarse-to-fine weight of band `k` at progress `alpha`: a half-cosine ramp
/// from 0 (band closed) to 1 (band fully open) over one unit of alpha.
pub fn window_weight(k: usize, alpha: f64) -> f64 {
    let x = alpha - k as f64;
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
    }
}

/// Map a pixel coordinate to [-1, 1] across an extent of `n` pixels, with
/// cell centers symmetric about zero.
#[inline]
pub fn normalize_coord(x: f64, n: usize) -> f64 {
    2.0 * (x + 0.5) / n as f64 - 1.0
}

/// Encode one pre-normalized coordinate pair. Layout: optional raw (u, v),
/// then per band k the windowed `[sin(2^k π u), cos(2^k π u), sin(2^k π v),
/// cos(2^k π v)]`.
pub fn encode(u: f64, v: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.feature_len());
    if cfg.include_raw {
        out.push(u);
        out.push(v);
    }
    for k in 0..cfg.num_bands {
        let w = window_weight(k, cfg.alpha);
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push(w * (f * u).sin());
        out.push(w * (f * u).cos());
        out.push(w * (f * v).sin());
        out.push(w * (f * v).cos());
    }
    out
}

/// Encode a batch of pixel (not yet normalized) coordinates against the
/// sensor extent of `k`. Returns `[m, feature_len]`.
pub fn encode_batch(pixels: &[(f64, f64)], k: &Intrinsics, cfg: &EncodingConfig) -> DTensor {
    let mut data = Vec::with_capacity(pixels.len() * cfg.feature_len());
    for &(u, v) in pixels {
        let un = normalize_coord(u, k.width);
        let vn = normalize_coord(v, k.height);
        data.extend(encode(un, vn, cfg));
    }
    DTensor::new(vec![pixels.len(), cfg.feature_len()], data).expect("finite encoding")
}

/// Z-depth of the ray/plane intersection for the pixel's ray:
/// `d_p / (n̂ · r)`.
pub fn plane_depth(plane: &PlaneParams, k: &Intrinsics, pixel: (f64, f64)) -> Result<f64, SceneError> {
    let r = ray_direction(k, pixel.0, pixel.1);
    let n = plane.normalized();
    let ndotr = n[0] * r.dir[0] + n[1] * r.dir[1] + n[2] * r.dir[2];
    if ndotr <= EPS_PARALLEL {
        return Err(SceneError::DegenerateRay(ndotr));
    }
    Ok(plane.d_p / ndotr)
}

/// Plane depth plus the learned offset, through the positivity barrier.
pub fn depth_at(scene: &SceneModel, k: &Intrinsics, pixel: (f64, f64)) -> Result<f64, SceneError> {
    let pd = plane_depth(&scene.plane, k, pixel)?;
    let feats = encode_batch(&[pixel], k, &scene.encoding);
    let off = scene.depth_mlp.forward_batch(&feats, MlpHead::Linear).data()[0];
    Ok(graph::barrier_eager(pd + off, scene.barrier_z_min, scene.barrier_beta))
}

/// Learned color at a pixel, sigmoid-mapped to [0, 1] per channel.
pub fn color_at(scene: &SceneModel, k: &Intrinsics, pixel: (f64, f64)) -> Vec<f64> {
    let feats = encode_batch(&[pixel], k, &scene.encoding);
    scene.image_mlp.forward_batch(&feats, MlpHead::Sigmoid).data().to_vec()
}

fn init_mlp(rng: &mut CounterRng, in_dim: usize, hidden: &[usize], out_dim: usize, zero_last: bool) -> Mlp {
    let mut widths = vec![in_dim];
    widths.extend_from_slice(hidden);
    widths.push(out_dim);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let last = l == widths.len() - 2;
        let data = if zero_last && last {
            vec![0.0; fan_in * fan_out]
        } else {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut r = rng.substream(l as u64);
            (0..fan_in * fan_out).map(|_| r.uniform(-lim, lim)).collect()
        };
        weights.push(DTensor::new(vec![fan_in, fan_out], data).unwrap());
        biases.push(DTensor::zeros(vec![fan_out]));
    }
    Mlp { weights, biases }
}

/// Fresh scene: scaled-uniform image weights, zero depth-offset head,
/// fronto-parallel unit plane, closed frequency window.
pub fn init_scene(cfg: &ModelConfig, channels: usize, seed: u64) -> SceneModel {
    let encoding = EncodingConfig { num_bands: cfg.bands, include_raw: cfg.include_raw, alpha: 0.0 };
    let feat = encoding.feature_len();
    let rng = CounterRng::new(seed, stream::SCENE_INIT);
    let d_p_init = 1.0;
    SceneModel {
        image_mlp: init_mlp(&mut rng.substream(0), feat, &cfg.image_hidden, channels, false),
        depth_mlp: init_mlp(&mut rng.substream(1), feat, &cfg.depth_hidden, 1, true),
        plane: PlaneParams { normal_raw: [0.0, 0.0, 1.0], d_p: d_p_init },
        encoding,
        channels,
        barrier_z_min: 0.05 * d_p_init,
        barrier_beta: 512.0 / d_p_init,
    }
}

/// Dense evaluation of depth and color on a `width`×`height` grid. The grid
/// is mapped onto `k`'s pixel domain by cell centers, so rendering at k's own
/// extent samples exactly the integer pixels, and rendering at another
/// resolution samples the same field of view.
pub fn render_maps(scene: &SceneModel, k: &Intrinsics, width: usize, height: usize) -> (DepthMap, DTensor) {
    use rayon::prelude::*;
    assert!(width > 0 && height > 0, "resolution must be positive");
    let sx = k.width as f64 / width as f64;
    let sy = k.height as f64 / height as f64;
    let c = scene.channels;

    let rows: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|i| {
            let v = (i as f64 + 0.5) * sy - 0.5;
            let pixels: Vec<(f64, f64)> = (0..width).map(|j| ((j as f64 + 0.5) * sx - 0.5, v)).collect();
            let feats = encode_batch(&pixels, k, &scene.encoding);
            let colors = scene.image_mlp.forward_batch(&feats, MlpHead::Sigmoid);
            let offs = scene.depth_mlp.forward_batch(&feats, MlpHead::Linear);
            let mut drow = vec![0.0; width];
            let mut valid = vec![false; width];
            for j in 0..width {
                match plane_depth(&scene.plane, k, pixels[j]) {
                    Ok(pd) => {
                        drow[j] = graph::barrier_eager(pd + offs.data()[j], scene.barrier_z_min, scene.barrier_beta);
                        valid[j] = true;
                    }
                    Err(_) => {
                        drow[j] = 0.0;
                    }
                }
            }
            (drow, valid, colors.data().to_vec())
        })
        .collect();

    let mut depths = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    let mut image = Vec::with_capacity(width * height * c);
    for (drow, vrow, crow) in rows {
        depths.extend(drow);
        valid.extend(vrow);
        image.extend(crow);
    }
    let depth_map = DepthMap { width, height, depths, valid };
    (depth_map, DTensor::new(vec![height, width, c], image).expect("finite render"))
}
