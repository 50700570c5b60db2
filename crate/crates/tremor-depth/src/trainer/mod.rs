//! Joint optimization of scene, plane, and camera trajectory against the
//! photometric reprojection loss over a burst.
//!
//! Gauge: frame 0's pose is the identity throughout (its control point is
//! pinned and receives no updates), so recovered depth lives in reference-
//! camera coordinates and the global pose ambiguity is fixed. Everything is
//! seeded and reductions run in fixed order, so a fit is deterministic
//! bit-for-bit for a given config — independent of thread count.

pub mod adam;
mod loss;

pub use adam::{adam_step, AdamState};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{pose_at, project, ray_direction, scale3, transform, Intrinsics, Pose, PoseTrajectory};
use crate::diffmath::{DTensor, Tape};
use crate::rng::{stream, CounterRng};
use crate::scene::graph::{ParamGroup, ParamSet};
use crate::scene::{init_scene, ModelConfig, SceneModel};
use crate::synth::{plane_offsets, SensorMode};

use loss::{build_loss_graph, LossContext};

/// Rays per deterministic evaluation chunk; fixed so results do not depend
/// on worker count.
const CHUNK: usize = 256;

/// Consecutive low-validity iterations tolerated before declaring the
/// problem degenerate.
const LOW_VALID_LIMIT: usize = 100;
const LOW_VALID_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid burst: {0}")]
    InvalidBurst(String),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("no parallax / no overlap: valid sample fraction below {LOW_VALID_FRACTION} for {LOW_VALID_LIMIT} consecutive iterations (at iteration {at_iteration})")]
    NoParallax { at_iteration: usize },
    #[error("no valid samples: every reprojection left the sensor")]
    NoOverlap,
    #[error("tape error: {0}")]
    Tape(#[from] crate::diffmath::TapeError),
}

/// The N-frame optimization input. Frames are stored at geometry resolution:
/// full sensor resolution with 3 channels for rgb8, half resolution with the
/// 4 RGGB planes for raw12. `intrinsics` always describes the full sensor.
#[derive(Clone, Debug)]
pub struct BurstStack {
    pub frames: Vec<DTensor>,
    pub timestamps: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub mode: SensorMode,
}

impl BurstStack {
    pub fn validate(&self) -> Result<(), FitError> {
        let n = self.frames.len();
        if n < 2 {
            return Err(FitError::InvalidBurst(format!("need at least 2 frames, got {n}")));
        }
        if self.timestamps.len() != n {
            return Err(FitError::InvalidBurst("timestamp count != frame count".into()));
        }
        if !self.timestamps.windows(2).all(|w| w[1] > w[0]) {
            return Err(FitError::InvalidBurst("timestamps must be strictly increasing".into()));
        }
        self.intrinsics.validate().map_err(|e| FitError::InvalidBurst(e.to_string()))?;
        let want = [self.geom_height(), self.geom_width(), self.channels()];
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != want {
                return Err(FitError::InvalidBurst(format!(
                    "frame {i}: shape {:?}, expected {:?} for mode {}",
                    f.shape(),
                    want,
                    self.mode
                )));
            }
            if f.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(FitError::InvalidBurst(format!("frame {i}: values outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn geom_width(&self) -> usize {
        match self.mode {
            SensorMode::Rgb8 => self.intrinsics.width,
            SensorMode::Raw12 => self.intrinsics.width / 2,
        }
    }

    pub fn geom_height(&self) -> usize {
        match self.mode {
            SensorMode::Rgb8 => self.intrinsics.height,
            SensorMode::Raw12 => self.intrinsics.height / 2,
        }
    }

    /// Intrinsics of the geometry grid the model lives on. For raw12 this is
    /// the Bayer-cell grid: cell centers sit half a sensor pixel in from the
    /// photosites, hence the 0.5 shift before halving.
    pub fn geom_intrinsics(&self) -> Intrinsics {
        match self.mode {
            SensorMode::Rgb8 => self.intrinsics,
            SensorMode::Raw12 => self.intrinsics.shifted(0.5, 0.5).scaled(0.5),
        }
    }

    /// Intrinsics mapping 3-D points to plane `p`'s half-resolution pixel
    /// coordinates, preserving the photosite's quarter-pel phase.
    pub fn plane_intrinsics(&self, p: usize) -> Intrinsics {
        match self.mode {
            SensorMode::Rgb8 => self.intrinsics,
            SensorMode::Raw12 => {
                let (dx, dy) = plane_offsets()[p];
                self.intrinsics.shifted(dx as f64, dy as f64).scaled(0.5)
            }
        }
    }

    /// Timestamps normalized to τ ∈ [0, 1].
    pub fn taus(&self) -> Vec<f64> {
        let t0 = self.timestamps[0];
        let span = self.timestamps.last().unwrap() - t0;
        self.timestamps.iter().map(|t| (t - t0) / span).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_mlp: f64,
    pub lr_pose: f64,
    pub lr_plane: f64,
    /// Fraction of iterations over which alpha ramps 0 → L.
    pub alpha_ramp_fraction: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
    /// Ablation: fix the image model to frame 0 instead of learning it.
    pub fix_image_to_frame0: bool,
    /// Bézier degree of the pose trajectory.
    pub pose_degree: usize,
    /// Rotation control points train at `lr_pose * lr_rot_factor`. Hand
    /// tremor turns far less than it translates (in image terms), and an
    /// unconstrained rotation rate lets a camera pan masquerade as parallax
    /// on near-planar scenes.
    pub lr_rot_factor: f64,
    /// The depth-offset MLP trains at `lr_mlp * lr_depth_factor`. Depth must
    /// move slower than translation can follow, or the scene scale slides
    /// down the (t, depth) gauge toward the barrier floor.
    pub lr_depth_factor: f64,
    /// Rotation stays frozen for this fraction of the run, then ramps in
    /// over the following 10%. Letting translation explain the bulk of the
    /// motion first keeps the pan/parallax split out of the wrong basin.
    pub rot_warmup_fraction: f64,
    /// Cosine-decay floor: learning rates anneal from their base value to
    /// `lr_final_fraction`× over the run. 1.0 disables decay.
    pub lr_final_fraction: f64,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 20_000,
            batch_size: 1024,
            lr_mlp: 3e-3,
            lr_pose: 1e-4,
            lr_plane: 1e-3,
            alpha_ramp_fraction: 0.7,
            loss_kind: LossKind::L1,
            seed: 0,
            fix_image_to_frame0: false,
            pose_degree: 2,
            lr_rot_factor: 0.05,
            lr_depth_factor: 0.1,
            rot_warmup_fraction: 0.3,
            lr_final_fraction: 0.05,
            log_every: 50,
            model: ModelConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::InvalidConfig(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr_mlp > 0.0 && self.lr_pose > 0.0 && self.lr_plane > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.alpha_ramp_fraction > 0.0 && self.alpha_ramp_fraction <= 1.0) {
            return bad(format!("alpha_ramp_fraction {} outside (0, 1]", self.alpha_ramp_fraction));
        }
        if self.pose_degree < 1 {
            return bad("pose_degree must be >= 1".into());
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad(format!("lr_final_fraction {} outside (0, 1]", self.lr_final_fraction));
        }
        if self.lr_rot_factor <= 0.0 {
            return bad("lr_rot_factor must be > 0".into());
        }
        if self.lr_depth_factor <= 0.0 {
            return bad("lr_depth_factor must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.rot_warmup_fraction) {
            return bad(format!("rot_warmup_fraction {} outside [0, 1)", self.rot_warmup_fraction));
        }
        if self.model.bands < 1 {
            return bad("model.bands must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitRecord {
    pub iteration: usize,
    pub loss: f64,
    pub alpha: f64,
    pub valid_fraction: f64,
    /// Largest rotation control-point norm, radians.
    pub rot_norm: f64,
    /// Largest translation control-point norm, scene units.
    pub trans_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitEvent {
    pub iteration: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FitLog {
    pub records: Vec<FitRecord>,
    pub events: Vec<FitEvent>,
}

/// Warp a pixel through depth and pose into another view. Valid means in
/// front of the camera and inside `[0, W-1] × [0, H-1]`.
pub fn reproject(pixel: (f64, f64), depth: f64, pose: &Pose, k: &Intrinsics) -> ((f64, f64), bool) {
    debug_assert!(depth > 0.0);
    let p = scale3(&ray_direction(k, pixel.0, pixel.1).dir, depth);
    let q = transform(pose, p);
    let (u, v, in_front) = project(k, q);
    let inside = u >= 0.0 && u <= (k.width - 1) as f64 && v >= 0.0 && v <= (k.height - 1) as f64;
    ((u, v), in_front && inside)
}

/// Linear coarse-to-fine ramp: 0 → L over the first `alpha_ramp_fraction`
/// of iterations, then L.
pub fn alpha_schedule(iter: usize, cfg: &FitConfig) -> f64 {
    let bands = cfg.model.bands as f64;
    let ramp = (cfg.iterations as f64 * cfg.alpha_ramp_fraction).max(1.0);
    (iter as f64 / ramp).min(1.0) * bands
}

/// Mean masked photometric residual of the whole batch on a single tape,
/// plus the valid-sample fraction. Errors when nothing reprojects into any
/// frame.
pub fn photometric_loss(
    scene: &SceneModel,
    traj: &PoseTrajectory,
    burst: &BurstStack,
    batch: &[(f64, f64)],
    alpha: f64,
) -> Result<(f64, f64), FitError> {
    assert!(!batch.is_empty());
    let ctx = LossContext::new(burst);
    let params = ParamSet::from_model(scene, traj, true);
    let mut tape = Tape::new();
    let out = build_loss_graph(&mut tape, scene, &params, &ctx, batch, alpha, LossKind::L1, false, true);
    tape.forward(&params.values())?;
    let mask_sum = tape.value(out.m_total).expect("forward ran").item();
    if mask_sum == 0.0 {
        return Err(FitError::NoOverlap);
    }
    let loss = tape.value(out.loss.expect("ratio form")).expect("forward ran").item();
    let denom_full = (batch.len() * ctx.taus.len() * ctx.channels) as f64;
    Ok((loss, mask_sum / denom_full))
}

struct ChunkEval {
    loss: f64,
    valid_fraction: f64,
    grads: Vec<DTensor>,
}

/// Deterministic chunked evaluation: forward all chunks, combine mask sums
/// in chunk order, backprop each chunk against the shared denominator, sum
/// gradients in chunk order.
fn eval_batch(
    scene: &SceneModel,
    params: &ParamSet,
    ctx: &LossContext,
    batch: &[(f64, f64)],
    alpha: f64,
    kind: LossKind,
    fix_image: bool,
) -> Result<Option<ChunkEval>, FitError> {
    let chunks: Vec<&[(f64, f64)]> = batch.chunks(CHUNK).collect();
    let mut tapes: Vec<(Tape, f64, f64)> = chunks
        .par_iter()
        .map(|chunk| -> Result<(Tape, f64, f64), FitError> {
            let mut tape = Tape::new();
            let out = build_loss_graph(&mut tape, scene, params, ctx, chunk, alpha, kind, fix_image, false);
            tape.forward(&params.values())?;
            let s = tape.value(out.s_total).expect("forward ran").item();
            let m = tape.value(out.m_total).expect("forward ran").item();
            Ok((tape, s, m))
        })
        .collect::<Result<_, _>>()?;

    let denom: f64 = tapes.iter().map(|(_, _, m)| m).sum();
    if denom == 0.0 {
        return Ok(None);
    }
    let loss: f64 = tapes.iter().map(|(_, s, _)| s).sum::<f64>() / denom;
    let denom_full = (batch.len() * ctx.taus.len() * ctx.channels) as f64;

    let chunk_grads: Vec<Vec<DTensor>> = tapes
        .par_iter_mut()
        .map(|(tape, _, _)| {
            let adj = vec![DTensor::scalar(1.0 / denom), DTensor::scalar(0.0)];
            tape.backward(&adj).map_err(FitError::from)
        })
        .collect::<Result<_, _>>()?;

    let mut grads = chunk_grads[0].clone();
    for cg in &chunk_grads[1..] {
        for (g, c) in grads.iter_mut().zip(cg) {
            let sum: Vec<f64> = g.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
            *g = DTensor::from_parts(g.shape().to_vec(), sum);
        }
    }
    Ok(Some(ChunkEval { loss, valid_fraction: denom / denom_full, grads }))
}

fn sample_batch(cfg: &FitConfig, iter: usize, w: usize, h: usize) -> Vec<(f64, f64)> {
    let mut rng = CounterRng::new(cfg.seed, stream::RAY_BATCH).substream(iter as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.uniform_usize(w * h);
            ((idx % w) as f64, (idx / w) as f64)
        })
        .collect()
}

fn ctrl_norm_max(t: &DTensor) -> f64 {
    t.data()
        .chunks_exact(3)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0, f64::max)
}

/// The joint optimization loop. Returns the fitted scene, the recovered
/// trajectory, and the per-interval log. Deterministic for a given config.
pub fn fit(burst: &BurstStack, cfg: &FitConfig) -> Result<(SceneModel, PoseTrajectory, FitLog), FitError> {
    burst.validate()?;
    cfg.validate()?;
    let mut scene = init_scene(&cfg.model, burst.channels(), cfg.seed);
    let mut traj = PoseTrajectory::zero(cfg.pose_degree);
    let mut log = FitLog::default();
    if cfg.iterations == 0 {
        return Ok((scene, traj, log));
    }

    let ctx = LossContext::new(burst);
    let mut params = ParamSet::from_model(&scene, &traj, !cfg.fix_image_to_frame0);
    let (gw, gh) = (burst.geom_width(), burst.geom_height());

    // One Adam state per parameter group, in a fixed group order.
    // The plane distance is the scale gauge of the affine problem: it stays
    // at its init value and the rest of the state expresses itself relative
    // to it (recovered depth is affine; translations come out in that gauge).
    let group_lr = |g: ParamGroup| match g {
        ParamGroup::ImageMlp => cfg.lr_mlp,
        ParamGroup::DepthMlp => cfg.lr_mlp * cfg.lr_depth_factor,
        ParamGroup::PlaneNormal => cfg.lr_plane,
        ParamGroup::PlaneDist => 0.0,
        ParamGroup::PoseRot => cfg.lr_pose * cfg.lr_rot_factor,
        ParamGroup::PoseTrans => cfg.lr_pose,
    };
    let groups = [
        ParamGroup::ImageMlp,
        ParamGroup::DepthMlp,
        ParamGroup::PlaneNormal,
        ParamGroup::PlaneDist,
        ParamGroup::PoseRot,
        ParamGroup::PoseTrans,
    ];
    let group_indices: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| (0..params.entries.len()).filter(|&i| params.entries[i].group == *g).collect())
        .collect();
    let mut states: Vec<AdamState> = groups
        .iter()
        .zip(&group_indices)
        .map(|(g, idx)| {
            let tensors: Vec<DTensor> = idx.iter().map(|&i| params.entries[i].value.clone()).collect();
            AdamState::new(&tensors, group_lr(*g))
        })
        .collect();

    let lr_at = |iter: usize| -> f64 {
        // Cosine anneal from 1 down to lr_final_fraction.
        let t = iter as f64 / cfg.iterations.max(1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * c
    };

    let mut low_valid_run = 0usize;
    for iter in 0..cfg.iterations {
        let alpha = alpha_schedule(iter, cfg);
        let batch = sample_batch(cfg, iter, gw, gh);
        let eval = eval_batch(&scene, &params, &ctx, &batch, alpha, cfg.loss_kind, cfg.fix_image_to_frame0)?;

        let last_loss;
        let last_fraction;
        match eval {
            None => {
                log.events.push(FitEvent { iteration: iter, message: "no valid samples in batch".into() });
                last_loss = f64::NAN;
                last_fraction = 0.0;
            }
            Some(ev) => {
                last_loss = ev.loss;
                last_fraction = ev.valid_fraction;
                if ev.grads.iter().any(|g| !g.all_finite()) {
                    log.events.push(FitEvent { iteration: iter, message: "non-finite gradient; step skipped".into() });
                } else {
                    let mut values = params.values();
                    let decay = lr_at(iter);
                    let rot_gate = {
                        let t = iter as f64 / cfg.iterations.max(1) as f64;
                        ((t - cfg.rot_warmup_fraction) / 0.1).clamp(0.0, 1.0)
                    };
                    for (gi, idx) in group_indices.iter().enumerate() {
                        if idx.is_empty() {
                            continue;
                        }
                        let gate = if groups[gi] == ParamGroup::PoseRot { rot_gate } else { 1.0 };
                        states[gi].lr = group_lr(groups[gi]) * decay * gate;
                        let mut group_params: Vec<DTensor> = idx.iter().map(|&i| values[i].clone()).collect();
                        let group_grads: Vec<DTensor> = idx.iter().map(|&i| ev.grads[i].clone()).collect();
                        adam_step(&mut states[gi], &mut group_params, &group_grads)
                            .expect("finiteness pre-checked");
                        for (slot, &i) in idx.iter().enumerate() {
                            values[i] = group_params[slot].clone();
                        }
                    }
                    params.set_values(values);
                }
            }
        }

        if last_fraction < LOW_VALID_FRACTION {
            low_valid_run += 1;
            if low_valid_run >= LOW_VALID_LIMIT {
                return Err(FitError::NoParallax { at_iteration: iter });
            }
        } else {
            low_valid_run = 0;
        }

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.records.push(FitRecord {
                iteration: iter,
                loss: last_loss,
                alpha,
                valid_fraction: last_fraction,
                rot_norm: ctrl_norm_max(params.get("pose.rot")),
                trans_norm: ctrl_norm_max(params.get("pose.trans")),
            });
        }
    }

    scene.encoding.alpha = alpha_schedule(cfg.iterations, cfg);
    params.write_back(&mut scene, &mut traj);
    Ok((scene, traj, log))
}

/// Largest ground-plane parallax a recovered fit explains, in geometry-grid
/// pixels: max over frames of |f · t(τ_n)| / median_depth. A value well
/// under a pixel means the data carried no usable parallax.
pub fn recovered_parallax_px(traj: &PoseTrajectory, taus: &[f64], k: &Intrinsics, median_depth: f64) -> f64 {
    let f = k.fx.max(k.fy);
    taus.iter()
        .map(|&tau| {
            let p = pose_at(traj, tau).expect("tau in range");
            f * crate::camera::norm3(&p.translation) / median_depth
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check_sampled;

    fn k(n: usize, f: f64) -> Intrinsics {
        Intrinsics { fx: f, fy: f, cx: (n as f64 - 1.0) / 2.0, cy: (n as f64 - 1.0) / 2.0, width: n, height: n }
    }

    fn constant_burst(n_frames: usize, size: usize, value: f64) -> BurstStack {
        let frames = (0..n_frames)
            .map(|_| DTensor::new(vec![size, size, 3], vec![value; size * size * 3]).unwrap())
            .collect();
        BurstStack {
            frames,
            timestamps: (0..n_frames).map(|i| i as f64 * 0.1).collect(),
            intrinsics: k(size, size as f64 * 1.2),
            mode: SensorMode::Rgb8,
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig { image_hidden: vec![16, 16], depth_hidden: vec![12, 12], bands: 3, include_raw: true }
    }

    #[test]
    fn reproject_identity_and_parallax() {
        let kk = k(100, 100.0);
        let ((u, v), ok) = reproject((30.0, 40.0), 2.0, &Pose::identity(), &kk);
        assert!(ok && (u - 30.0).abs() < 1e-12 && (v - 40.0).abs() < 1e-12);

        let pose = Pose { rotation: [0.0; 3], translation: [0.01, 0.0, 0.0] };
        let ((u, v), ok) = reproject((30.0, 40.0), 1.0, &pose, &kk);
        assert!(ok && (u - 31.0).abs() < 1e-12 && (v - 40.0).abs() < 1e-12);

        // Camera backing away along the axis: principal-point pixel fixed.
        let pose = Pose { rotation: [0.0; 3], translation: [0.0, 0.0, -0.5] };
        let pp = (kk.cx, kk.cy);
        let ((u, v), ok) = reproject(pp, 1.0, &pose, &kk);
        assert!(ok && (u - pp.0).abs() < 1e-12 && (v - pp.1).abs() < 1e-12);
    }

    #[test]
    fn alpha_schedule_ramp() {
        let cfg = FitConfig { iterations: 1000, alpha_ramp_fraction: 0.5, model: small_model(), ..FitConfig::default() };
        assert_eq!(alpha_schedule(0, &cfg), 0.0);
        assert_eq!(alpha_schedule(250, &cfg), 1.5); // half the ramp -> L/2
        assert_eq!(alpha_schedule(500, &cfg), 3.0);
        assert_eq!(alpha_schedule(900, &cfg), 3.0);
    }

    #[test]
    fn constant_scene_on_constant_burst_zero_loss() {
        let burst = constant_burst(4, 12, 0.4);
        let mut scene = init_scene(&small_model(), 3, 1);
        // Force the image head to output exactly logit^{-1}(bias) = 0.4.
        let l = scene.image_mlp.weights.len() - 1;
        let shape = scene.image_mlp.weights[l].shape().to_vec();
        scene.image_mlp.weights[l] = DTensor::zeros(shape);
        let logit = (0.4_f64 / 0.6).ln();
        scene.image_mlp.biases[l] = DTensor::from_vec(vec![logit; 3]);
        let mut traj = PoseTrajectory::zero(2);
        traj.trans_ctrl[1] = [0.004, -0.002, 0.001];
        traj.rot_ctrl[2] = [0.0, 0.0, 2e-4];
        let batch: Vec<(f64, f64)> = (2..10).map(|i| (i as f64, (i % 5 + 3) as f64)).collect();
        let (loss, fraction) = photometric_loss(&scene, &traj, &burst, &batch, 3.0).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(fraction > 0.9);
    }

    #[test]
    fn out_of_bounds_batch_is_no_overlap() {
        let burst = constant_burst(3, 8, 0.5);
        let scene = init_scene(&small_model(), 3, 1);
        let mut traj = PoseTrajectory::zero(2);
        // A huge translation throws every non-anchor sample off-sensor; the
        // frame-0 anchor keeps its constant count, so use valid_fraction.
        traj.trans_ctrl[1] = [50.0, 0.0, 0.0];
        traj.trans_ctrl[2] = [100.0, 0.0, 0.0];
        let batch = vec![(3.0, 3.0), (4.0, 4.0)];
        let (_, fraction) = photometric_loss(&scene, &traj, &burst, &batch, 0.0).unwrap();
        assert!((fraction - 1.0 / 3.0).abs() < 1e-12, "only frame 0 valid, got {fraction}");
    }

    #[test]
    fn loss_graph_gradients_check_against_fd() {
        let size = 16;
        let mut frames = Vec::new();
        for n in 0..3 {
            let mut data = Vec::with_capacity(size * size * 3);
            for i in 0..size {
                for j in 0..size {
                    for c in 0..3 {
                        let v = 0.5
                            + 0.3 * ((i as f64 * 0.7 + n as f64 * 0.41 + c as f64).sin())
                            + 0.15 * ((j as f64 * 1.1 - c as f64 * 0.3).cos());
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            frames.push(DTensor::new(vec![size, size, 3], data).unwrap());
        }
        let burst = BurstStack {
            frames,
            timestamps: vec![0.0, 1.0, 2.0],
            intrinsics: k(size, 20.0),
            mode: SensorMode::Rgb8,
        };
        let mut scene = init_scene(&small_model(), 3, 5);
        let l = scene.depth_mlp.weights.len() - 1;
        let shape = scene.depth_mlp.weights[l].shape().to_vec();
        let nw: usize = shape.iter().product();
        scene.depth_mlp.weights[l] =
            DTensor::new(shape, (0..nw).map(|i| ((i % 7) as f64 - 3.0) * 2e-3).collect()).unwrap();
        let mut traj = PoseTrajectory::zero(2);
        traj.trans_ctrl[1] = [0.01, -0.004, 0.002];
        traj.trans_ctrl[2] = [0.018, 0.006, -0.003];
        traj.rot_ctrl[1] = [1e-3, -2e-3, 5e-4];
        traj.rot_ctrl[2] = [-1e-3, 1e-3, 2e-3];

        let ctx = LossContext::new(&burst);
        let params = ParamSet::from_model(&scene, &traj, true);
        // Integer reference pixels (the sampling contract); warped coords in
        // the other frames stay generic, which is where coord grads matter.
        let batch = vec![(4.0, 5.0), (9.0, 3.0), (7.0, 11.0), (12.0, 8.0)];
        let mut tape = Tape::new();
        build_loss_graph(&mut tape, &scene, &params, &ctx, &batch, 1.5, LossKind::L1, false, true);
        let rep = grad_check_sampled(&mut tape, &params.values(), 1e-5, 64, 7).unwrap();
        assert!(rep.max_rel_err < 1e-3, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn fit_zero_iterations_returns_init() {
        let burst = constant_burst(3, 8, 0.5);
        let cfg = FitConfig { iterations: 0, model: small_model(), seed: 9, ..FitConfig::default() };
        let (scene, traj, log) = fit(&burst, &cfg).unwrap();
        let reference = init_scene(&small_model(), 3, 9);
        assert_eq!(scene.image_mlp.weights[0], reference.image_mlp.weights[0]);
        assert!(traj.is_identity());
        assert!(log.records.is_empty());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut burst = constant_burst(3, 12, 0.5);
        // Add texture so gradients are nonzero.
        let mut data = burst.frames[1].data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v + 0.3 * ((i as f64) * 0.01).sin()).clamp(0.0, 1.0);
        }
        burst.frames[1] = DTensor::new(vec![12, 12, 3], data).unwrap();
        let cfg = FitConfig {
            iterations: 12,
            batch_size: 24,
            log_every: 4,
            model: small_model(),
            seed: 3,
            ..FitConfig::default()
        };
        let (s1, t1, l1) = fit(&burst, &cfg).unwrap();
        let (s2, t2, l2) = fit(&burst, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1.plane, s2.plane);
        for (w1, w2) in s1.image_mlp.weights.iter().zip(&s2.image_mlp.weights) {
            assert_eq!(w1, w2);
        }
        assert_eq!(serde_json::to_string(&l1).unwrap(), serde_json::to_string(&l2).unwrap());
    }

    #[test]
    fn fix_image_mode_keeps_image_params_out() {
        let burst = constant_burst(3, 12, 0.5);
        let cfg = FitConfig {
            iterations: 4,
            batch_size: 16,
            fix_image_to_frame0: true,
            model: small_model(),
            ..FitConfig::default()
        };
        let (scene, _, _) = fit(&burst, &cfg).unwrap();
        let reference = init_scene(&small_model(), 3, cfg.seed);
        for (a, b) in scene.image_mlp.weights.iter().zip(&reference.image_mlp.weights) {
            assert_eq!(a, b, "image weights must not move in the ablation");
        }
    }

    #[test]
    fn fixed_image_loss_graph_matches_frame0_sampling() {
        // With the image fixed, the frame-0 anchor term vanishes and the
        // model color IS bilinear_sample(frame_0, ·) at the batch pixels.
        let size = 12;
        let mut data = Vec::new();
        for i in 0..size {
            for j in 0..size {
                for c in 0..3 {
                    data.push(((i * 31 + j * 7 + c * 13) % 97) as f64 / 96.0);
                }
            }
        }
        let f0 = DTensor::new(vec![size, size, 3], data).unwrap();
        let burst = BurstStack {
            frames: vec![f0.clone(), f0.clone()],
            timestamps: vec![0.0, 1.0],
            intrinsics: k(size, 14.0),
            mode: SensorMode::Rgb8,
        };
        let scene = init_scene(&small_model(), 3, 2);
        let traj = PoseTrajectory::zero(2);
        let ctx = LossContext::new(&burst);
        let params = ParamSet::from_model(&scene, &traj, false);
        let batch = vec![(3.0, 4.0), (7.0, 2.0)];
        let mut tape = Tape::new();
        build_loss_graph(&mut tape, &scene, &params, &ctx, &batch, 0.0, LossKind::L1, true, true);
        let out = tape.forward(&params.values()).unwrap();
        // Identity trajectory over identical frames: zero loss exactly.
        assert_eq!(out[0].item(), 0.0);
    }

    #[test]
    fn recovered_parallax_measures_translation() {
        let mut traj = PoseTrajectory::zero(2);
        traj.trans_ctrl[2] = [0.01, 0.0, 0.0];
        let kk = k(64, 100.0);
        let px = recovered_parallax_px(&traj, &[0.0, 0.5, 1.0], &kk, 1.0);
        assert!((px - 1.0).abs() < 1e-12, "{px}");
    }
}
