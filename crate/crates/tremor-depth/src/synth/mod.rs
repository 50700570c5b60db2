//! Ground-truth synthetic long-burst generator.
//!
//! A textured height-field scene (plane plus seeded Gaussian bumps, bumps
//! displace toward the camera), a smooth hand-tremor trajectory, a
//! z-buffered rasterizer with a brute-force oracle, and the two-mode sensor
//! simulator. `make_burst` ties them together and `burst_consistency`
//! validates the whole geometric chain — reprojecting ground-truth depth
//! through ground-truth poses must photometrically match the rendered
//! frames before any fitting is attempted.

pub mod raster;
pub mod sensor;
pub mod texture;

pub use raster::{render_frame, render_oracle, RasterBuf, TriMesh, Z_NEAR};
pub use sensor::{delinearize, plane_offsets, simulate_sensor, SensorConfig, SensorMode};
pub use texture::{Texture, TextureSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{pose_at, Intrinsics, PoseTrajectory, Vec3};
use crate::diffmath::{bilinear_sample, DTensor};
use crate::evalx::DepthMap;
use crate::rng::{self, stream, CounterRng};
use crate::scene::{plane_depth, PlaneParams};
use crate::trainer::BurstStack;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("mesh entirely behind the camera")]
    MeshBehindCamera,
    #[error("camera: {0}")]
    Camera(#[from] crate::camera::CameraError),
}

/// Synthetic scene: a textured plane at depth `z0` displaced by Gaussian
/// bumps toward the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Square sensor resolution in pixels.
    pub resolution: usize,
    /// Focal length in pixels.
    pub focal_px: f64,
    /// Plane depth on the optical axis, scene units.
    pub z0: f64,
    /// Plane normal (normalized on use, z forced positive).
    pub normal: Vec3,
    pub bump_count: usize,
    /// Peak bump height, scene units; must stay below z0/2.
    pub bump_amplitude: f64,
    /// Bump spatial scale, reference pixels.
    pub bump_sigma_px: f64,
    pub texture: TextureSpec,
    /// Rendering supersample factor.
    pub supersample: usize,
    /// Mesh margin beyond the field of view, pixels; keeps every tremor
    /// view fully covered.
    pub pad_px: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            resolution: 256,
            focal_px: 300.0,
            z0: 1.0,
            normal: [0.0, 0.0, 1.0],
            bump_count: 3,
            bump_amplitude: 0.1,
            bump_sigma_px: 28.0,
            texture: TextureSpec::default(),
            supersample: 3,
            pad_px: 8,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.resolution < 4 || self.resolution % 2 != 0 {
            return Err(SynthError::BadSpec(format!("resolution {} must be even and >= 4", self.resolution)));
        }
        if self.z0 <= 0.0 {
            return Err(SynthError::BadSpec("z0 must be > 0".into()));
        }
        if self.bump_count > 0 && self.bump_amplitude >= 0.5 * self.z0 {
            return Err(SynthError::BadSpec(format!(
                "bump_amplitude {} leaves the front-of-plane regime (>= 0.5·z0 = {})",
                self.bump_amplitude,
                0.5 * self.z0
            )));
        }
        if self.supersample < 1 {
            return Err(SynthError::BadSpec("supersample must be >= 1".into()));
        }
        if self.focal_px <= 0.0 {
            return Err(SynthError::BadSpec("focal_px must be > 0".into()));
        }
        Ok(())
    }

    /// Intrinsics of the synthetic camera: centered principal point.
    pub fn intrinsics(&self) -> Intrinsics {
        let n = self.resolution;
        let c = (n as f64 - 1.0) / 2.0;
        Intrinsics { fx: self.focal_px, fy: self.focal_px, cx: c, cy: c, width: n, height: n }
    }

    /// Unit plane parameters: `d_p = n̂_z · z0` puts (0, 0, z0) on the plane.
    pub fn plane(&self) -> PlaneParams {
        let n = PlaneParams { normal_raw: self.normal, d_p: 1.0 }.normalized();
        PlaneParams { normal_raw: n, d_p: n[2] * self.z0 }
    }
}

/// Hand-tremor trajectory magnitudes. Control points are drawn i.i.d.
/// normal; the first is pinned to zero (reference gauge).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TremorSpec {
    pub frames: usize,
    /// Translation sigma, scene units (~0.01·z0 for handheld tremor).
    pub sigma_t: f64,
    /// Rotation sigma, radians.
    pub sigma_r: f64,
    pub degree: usize,
    pub seed: u64,
}

impl Default for TremorSpec {
    fn default() -> Self {
        TremorSpec { frames: 16, sigma_t: 6e-3, sigma_r: 4e-4, degree: 2, seed: 2 }
    }
}

impl TremorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 2 {
            return Err(SynthError::BadSpec(format!("frames {} must be >= 2", self.frames)));
        }
        if self.sigma_t < 0.0 || self.sigma_r < 0.0 {
            return Err(SynthError::BadSpec("tremor sigmas must be >= 0".into()));
        }
        if self.degree < 1 {
            return Err(SynthError::BadSpec("degree must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows that a fit must recover.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Reference-view depth at full sensor resolution.
    pub depth: DepthMap,
    pub trajectory: PoseTrajectory,
    pub plane: PlaneParams,
    /// Pixels displaced off the plane by more than `mask_threshold`.
    pub mask: Vec<bool>,
    pub mask_threshold: f64,
}

/// Gaussian height field; the first bump is centered in the view at full
/// amplitude so single-bump scenes are exactly calibrated.
pub struct HeightField {
    bumps: Vec<(f64, f64, f64, f64)>, // (cu, cv, sigma, amplitude)
}

impl HeightField {
    pub fn from_spec(spec: &SceneSpec) -> HeightField {
        let mut rng = CounterRng::new(spec.seed, stream::SCENE_INIT).substream(71);
        let n = spec.resolution as f64;
        let c = (n - 1.0) / 2.0;
        let mut bumps = Vec::with_capacity(spec.bump_count);
        for b in 0..spec.bump_count {
            if b == 0 {
                bumps.push((c, c, spec.bump_sigma_px, spec.bump_amplitude));
            } else {
                bumps.push((
                    rng.uniform(0.2 * n, 0.8 * n),
                    rng.uniform(0.2 * n, 0.8 * n),
                    spec.bump_sigma_px * rng.uniform(0.7, 1.3),
                    spec.bump_amplitude * rng.uniform(0.6, 1.0),
                ));
            }
        }
        HeightField { bumps }
    }

    pub fn height_at(&self, u: f64, v: f64) -> f64 {
        self.bumps
            .iter()
            .map(|(cu, cv, s, a)| {
                let d2 = (u - cu) * (u - cu) + (v - cv) * (v - cv);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    }
}

/// Build the displaced-plane mesh, its texture, and reference-view ground
/// truth (depth, object mask). The trajectory field is identity here;
/// `make_burst` fills it.
pub fn make_scene(spec: &SceneSpec, k: &Intrinsics) -> Result<(TriMesh, Texture, GroundTruth), SynthError> {
    spec.validate()?;
    let plane = spec.plane();
    let field = HeightField::from_spec(spec);
    let pad = spec.pad_px as i64;
    let lo = -pad;
    let hi = spec.resolution as i64 + pad;
    let side = (hi - lo) as usize;

    let mut vertices = Vec::with_capacity(side * side);
    let mut uv = Vec::with_capacity(side * side);
    for gi in lo..hi {
        for gj in lo..hi {
            let (u, v) = (gj as f64, gi as f64);
            let t = plane_depth(&plane, k, (u, v))
                .map_err(|e| SynthError::BadSpec(format!("plane degenerate in view: {e}")))?;
            let r = crate::camera::ray_direction(k, u, v).dir;
            let h = field.height_at(u, v);
            vertices.push([r[0] * t, r[1] * t, t - h]);
            uv.push([u, v]);
        }
    }
    let mut tris = Vec::with_capacity(2 * (side - 1) * (side - 1));
    for i in 0..side - 1 {
        for j in 0..side - 1 {
            let a = i * side + j;
            let b = a + 1;
            let c = a + side;
            let d = c + 1;
            tris.push([a, b, c]);
            tris.push([b, d, c]);
        }
    }
    let mesh = TriMesh { vertices, uv, tris };
    let tex = Texture::new(spec.texture.clone(), rng::derive_seed(spec.seed, stream::TEXTURE));

    let (_, depth) = render_frame(&mesh, &tex, &crate::camera::Pose::identity(), k, 1)?;
    let mask_threshold = 0.02 * spec.z0;
    let mut mask = vec![false; depth.depths.len()];
    for i in 0..k.height {
        for j in 0..k.width {
            let idx = i * k.width + j;
            if depth.valid[idx] {
                let pd = plane_depth(&plane, k, (j as f64, i as f64))
                    .map_err(|e| SynthError::BadSpec(e.to_string()))?;
                mask[idx] = (pd - depth.depths[idx]) > mask_threshold;
            }
        }
    }

    let gt = GroundTruth { depth, trajectory: PoseTrajectory::zero(1), plane, mask, mask_threshold };
    Ok((mesh, tex, gt))
}

/// Draw a tremor trajectory: control points i.i.d. normal with the spec's
/// sigmas, first control point forced to zero.
pub fn sample_tremor(spec: &TremorSpec, seed: u64) -> PoseTrajectory {
    let mut rng = CounterRng::new(seed, stream::TREMOR);
    let mut traj = PoseTrajectory::zero(spec.degree);
    for i in 1..=spec.degree {
        for d in 0..3 {
            traj.rot_ctrl[i][d] = rng.normal(0.0, spec.sigma_r);
        }
    }
    for i in 1..=spec.degree {
        for d in 0..3 {
            traj.trans_ctrl[i][d] = rng.normal(0.0, spec.sigma_t);
        }
    }
    traj
}

/// Render and sensor-simulate a full burst. Frame n gets an independent
/// noise seed derived from `(sensor seed, n)`; timestamps span a nominal
/// 2-second burst.
pub fn make_burst(
    scene_spec: &SceneSpec,
    tremor_spec: &TremorSpec,
    sensor_cfg: &SensorConfig,
    k: &Intrinsics,
) -> Result<(BurstStack, GroundTruth), SynthError> {
    scene_spec.validate()?;
    tremor_spec.validate()?;
    sensor_cfg.validate()?;
    let (mesh, tex, mut gt) = make_scene(scene_spec, k)?;
    let traj = sample_tremor(tremor_spec, tremor_spec.seed);
    gt.trajectory = traj.clone();

    let n = tremor_spec.frames;
    let taus: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    use rayon::prelude::*;
    let frames: Vec<DTensor> = taus
        .par_iter()
        .enumerate()
        .map(|(i, &tau)| -> Result<DTensor, SynthError> {
            let pose = pose_at(&traj, tau)?;
            let (linear, _) = render_frame(&mesh, &tex, &pose, k, scene_spec.supersample)?;
            let mut cfg = *sensor_cfg;
            cfg.seed = rng::derive_seed(sensor_cfg.seed, i as u64);
            simulate_sensor(&linear, &cfg)
        })
        .collect::<Result<_, _>>()?;

    let burst = BurstStack {
        frames,
        timestamps: taus.iter().map(|t| t * 2.0).collect(),
        intrinsics: *k,
        mode: sensor_cfg.mode,
    };
    Ok((burst, gt))
}

/// Photometric self-consistency of a generated burst: reproject sampled
/// reference pixels through ground-truth depth and poses into every frame
/// and compare against the frame-0 values. Returns (mean |residual|,
/// fraction of samples valid in all frames).
pub fn burst_consistency(burst: &BurstStack, gt: &GroundTruth, n_samples: usize, seed: u64) -> (f64, f64) {
    let (gw, gh) = (burst.geom_width(), burst.geom_height());
    let mut rng = CounterRng::new(seed, stream::GRAD_PROBE);
    let taus = burst.taus();
    let channels = burst.channels();
    let planes: Vec<Intrinsics> = (0..if burst.mode == SensorMode::Raw12 { 4 } else { 1 })
        .map(|p| burst.plane_intrinsics(p))
        .collect();

    // Margin keeps bilinear samples of the GT depth in-bounds.
    let mut total_abs = 0.0;
    let mut count = 0usize;
    let mut attempted = 0usize;
    for _ in 0..n_samples {
        let u = rng.uniform_usize(gw - 4) + 2;
        let v = rng.uniform_usize(gh - 4) + 2;
        let (gu, gv) = (u as f64, v as f64);
        attempted += 1;

        // GT depth is stored at full sensor resolution; bilinearly sample it
        // at this geometry pixel's sensor position.
        let full_u = match burst.mode {
            SensorMode::Rgb8 => gu,
            SensorMode::Raw12 => 2.0 * gu + 0.5,
        };
        let full_v = match burst.mode {
            SensorMode::Rgb8 => gv,
            SensorMode::Raw12 => 2.0 * gv + 0.5,
        };
        let gt_img = DTensor::new(vec![gt.depth.height, gt.depth.width, 1], gt.depth.depths.clone()).unwrap();
        let coords = DTensor::new(vec![1, 2], vec![full_u, full_v]).unwrap();
        let (d, ok) = bilinear_sample(&gt_img, &coords).expect("well-formed");
        if !ok[0] || d.data()[0] <= 0.0 {
            continue;
        }
        let depth = d.data()[0];

        let mut sample_ok = true;
        let mut residual = 0.0;
        let mut terms = 0usize;
        for (ni, &tau) in taus.iter().enumerate().skip(1) {
            let pose = pose_at(&gt.trajectory, tau).expect("tau in range");
            for (pi, pk) in planes.iter().enumerate() {
                let (coords, valid) = crate::trainer::reproject((gu, gv), depth, &pose, pk);
                if !valid {
                    sample_ok = false;
                    continue;
                }
                let frame = &burst.frames[ni];
                let (h, w) = (frame.shape()[0], frame.shape()[1]);
                let c_here = if burst.mode == SensorMode::Raw12 { 1 } else { channels };
                // Reference value at the integer pixel; warped sample in frame n.
                for ch in 0..c_here {
                    let plane_ch = if burst.mode == SensorMode::Raw12 { pi } else { ch };
                    let f0 = burst.frames[0].data()[(v * w + u) * channels + plane_ch];
                    let fx = coords.0;
                    let fy = coords.1;
                    // Manual bilinear read of channel plane_ch.
                    let ix = (fx.floor() as usize).min(w - 2);
                    let iy = (fy.floor() as usize).min(h - 2);
                    let (au, av) = (fx - ix as f64, fy - iy as f64);
                    let g = |yy: usize, xx: usize| frame.data()[(yy * w + xx) * channels + plane_ch];
                    let warped = g(iy, ix) * (1.0 - au) * (1.0 - av)
                        + g(iy, ix + 1) * au * (1.0 - av)
                        + g(iy + 1, ix) * (1.0 - au) * av
                        + g(iy + 1, ix + 1) * au * av;
                    residual += (warped - f0).abs();
                    terms += 1;
                }
            }
        }
        if sample_ok && terms > 0 {
            total_abs += residual / terms as f64;
            count += 1;
        }
    }
    if count == 0 {
        return (f64::INFINITY, 0.0);
    }
    (total_abs / count as f64, count as f64 / attempted as f64)
}

/// Largest ground-truth parallax over the burst, in geometry pixels —
/// the quantity that must reach a pixel or two for depth to be observable.
pub fn gt_max_parallax_px(burst: &BurstStack, gt: &GroundTruth) -> f64 {
    let k = burst.geom_intrinsics();
    let taus = burst.taus();
    let min_depth = gt
        .depth
        .depths
        .iter()
        .zip(&gt.depth.valid)
        .filter(|(_, v)| **v)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);
    taus.iter()
        .map(|&tau| {
            let p = pose_at(&gt.trajectory, tau).expect("tau in range");
            let shift_t = k.fx.max(k.fy) * crate::camera::norm3(&p.translation) / min_depth;
            // Rotation sweeps the image by ~f·θ pixels but carries no
            // parallax; report translation only.
            shift_t
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::norm3;

    fn quick_spec(res: usize) -> SceneSpec {
        SceneSpec {
            resolution: res,
            focal_px: res as f64 * 1.2,
            bump_count: 1,
            bump_amplitude: 0.08,
            bump_sigma_px: res as f64 * 0.12,
            supersample: 2,
            pad_px: 6,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn flat_scene_depth_equals_plane_analytically() {
        let mut spec = quick_spec(32);
        spec.bump_count = 0;
        spec.bump_amplitude = 0.0;
        let k = spec.intrinsics();
        let (_, _, gt) = make_scene(&spec, &k).unwrap();
        let plane = spec.plane();
        for i in 0..32 {
            for j in 0..32 {
                let pd = plane_depth(&plane, &k, (j as f64, i as f64)).unwrap();
                let got = gt.depth.at(i, j);
                assert!((got - pd).abs() < 1e-9, "({i},{j}): {got} vs {pd}");
            }
        }
        assert!(gt.mask.iter().all(|m| !m));
    }

    #[test]
    fn center_bump_height_shows_in_depth() {
        let spec = quick_spec(32);
        let k = spec.intrinsics();
        let (_, _, gt) = make_scene(&spec, &k).unwrap();
        let field = HeightField::from_spec(&spec);
        // True view center sits between pixels at (15.5, 15.5).
        let c = (spec.resolution as f64 - 1.0) / 2.0;
        let h_center = field.height_at(c, c);
        assert!((h_center - spec.bump_amplitude).abs() < 1e-12, "first bump is centered at full amplitude");
        // Mean depth of the four pixels around the apex ≈ z0 − amplitude
        // (apex curvature over half a pixel is far below the tolerance).
        let mut mean = 0.0;
        for (i, j) in [(15, 15), (15, 16), (16, 15), (16, 16)] {
            assert!(gt.mask[i * 32 + j], "apex pixels are object");
            mean += gt.depth.at(i, j);
        }
        mean /= 4.0;
        assert!((mean - (spec.z0 - h_center)).abs() < 2e-3, "{mean} vs {}", spec.z0 - h_center);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = quick_spec(16);
        let k = spec.intrinsics();
        let (m1, _, _) = make_scene(&spec, &k).unwrap();
        let (m2, _, _) = make_scene(&spec, &k).unwrap();
        assert_eq!(m1.vertices, m2.vertices);
    }

    #[test]
    fn degenerate_amplitude_rejected() {
        let mut spec = quick_spec(16);
        spec.bump_amplitude = 0.6 * spec.z0;
        assert!(matches!(spec.validate(), Err(SynthError::BadSpec(_))));
    }

    #[test]
    fn tremor_zero_sigma_is_identity_and_gauge_pinned() {
        let spec = TremorSpec { sigma_t: 0.0, sigma_r: 0.0, ..TremorSpec::default() };
        let traj = sample_tremor(&spec, 5);
        assert!(traj.is_identity());
        for seed in 0..20 {
            let traj = sample_tremor(&TremorSpec::default(), seed);
            let p0 = pose_at(&traj, 0.0).unwrap();
            assert_eq!(p0.rotation, [0.0; 3]);
            assert_eq!(p0.translation, [0.0; 3]);
        }
    }

    #[test]
    fn tremor_endpoint_std_matches_sigma() {
        // pose_at(1) = last control point ~ N(0, sigma_t) per coordinate;
        // mid-curve variance follows the Bernstein weights.
        let spec = TremorSpec { sigma_t: 0.01, sigma_r: 0.0, degree: 2, ..TremorSpec::default() };
        let n = 1000;
        let (mut s_end, mut s_mid) = (0.0, 0.0);
        for seed in 0..n {
            let traj = sample_tremor(&spec, seed as u64);
            let e = pose_at(&traj, 1.0).unwrap().translation;
            let m = pose_at(&traj, 0.5).unwrap().translation;
            s_end += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
            s_mid += m[0] * m[0] + m[1] * m[1] + m[2] * m[2];
        }
        let std_end = (s_end / (3 * n) as f64).sqrt();
        let std_mid = (s_mid / (3 * n) as f64).sqrt();
        assert!((std_end / spec.sigma_t - 1.0).abs() < 0.1, "endpoint std {std_end}");
        // B(0.5) over free points (0.5, 0.25): sqrt(0.25 + 0.0625) ≈ 0.559.
        let expect_mid = spec.sigma_t * (0.3125f64).sqrt();
        assert!((std_mid / expect_mid - 1.0).abs() < 0.1, "mid std {std_mid} vs {expect_mid}");
    }

    #[test]
    fn burst_two_frames_zero_tremor_identical_noiseless() {
        let spec = quick_spec(16);
        let tremor = TremorSpec { frames: 2, sigma_t: 0.0, sigma_r: 0.0, ..TremorSpec::default() };
        let sensor = SensorConfig { mode: SensorMode::Rgb8, read_noise: 0.0, shot_gain: 0.0, gamma: 2.2, seed: 0 };
        let k = spec.intrinsics();
        let (burst, gt) = make_burst(&spec, &tremor, &sensor, &k).unwrap();
        assert_eq!(burst.frames[0].data(), burst.frames[1].data());
        assert!(gt.trajectory.is_identity());
        assert_eq!(gt_max_parallax_px(&burst, &gt), 0.0);
    }

    #[test]
    fn burst_stores_the_rendering_trajectory() {
        let spec = quick_spec(16);
        let tremor = TremorSpec { frames: 3, seed: 7, ..TremorSpec::default() };
        let sensor = SensorConfig::default();
        let k = spec.intrinsics();
        let (_, gt) = make_burst(&spec, &tremor, &sensor, &k).unwrap();
        assert_eq!(gt.trajectory, sample_tremor(&tremor, 7));
        assert!(norm3(&gt.trajectory.trans_ctrl[1]) > 0.0);
    }

    #[test]
    fn burst_self_consistency_noiseless_rgb8() {
        let mut spec = quick_spec(48);
        spec.texture = TextureSpec::ValueNoise { octaves: 3, base_period_px: 12.0, contrast: 0.8 };
        let tremor = TremorSpec { frames: 4, sigma_t: 4e-3, sigma_r: 2e-4, degree: 2, seed: 3 };
        let sensor = SensorConfig { mode: SensorMode::Rgb8, read_noise: 0.0, shot_gain: 0.0, gamma: 2.2, seed: 0 };
        let k = spec.intrinsics();
        let (burst, gt) = make_burst(&spec, &tremor, &sensor, &k).unwrap();
        burst.validate().unwrap();
        let (mean_abs, valid) = burst_consistency(&burst, &gt, 400, 9);
        assert!(valid > 0.9, "valid fraction {valid}");
        assert!(mean_abs < 2e-3, "residual {mean_abs}");
    }

    #[test]
    fn burst_self_consistency_noiseless_raw12() {
        let mut spec = quick_spec(48);
        // Half-resolution planes sample the texture at twice the pitch, so
        // the finest octave must stay comfortably above the plane Nyquist.
        spec.texture = TextureSpec::ValueNoise { octaves: 3, base_period_px: 24.0, contrast: 0.8 };
        let tremor = TremorSpec { frames: 4, sigma_t: 4e-3, sigma_r: 2e-4, degree: 2, seed: 4 };
        let sensor = SensorConfig { mode: SensorMode::Raw12, read_noise: 0.0, shot_gain: 0.0, gamma: 2.2, seed: 0 };
        let k = spec.intrinsics();
        let (burst, gt) = make_burst(&spec, &tremor, &sensor, &k).unwrap();
        burst.validate().unwrap();
        assert_eq!(burst.frames[0].shape(), &[24, 24, 4]);
        let (mean_abs, valid) = burst_consistency(&burst, &gt, 400, 9);
        assert!(valid > 0.9, "valid fraction {valid}");
        assert!(mean_abs < 2e-3, "residual {mean_abs}");
    }

    #[test]
    fn parallax_estimate_tracks_sigma() {
        let spec = quick_spec(32);
        let tremor = TremorSpec { frames: 4, sigma_t: 5e-3, sigma_r: 0.0, degree: 2, seed: 1 };
        let sensor = SensorConfig { mode: SensorMode::Rgb8, read_noise: 0.0, shot_gain: 0.0, gamma: 2.2, seed: 0 };
        let k = spec.intrinsics();
        let (burst, gt) = make_burst(&spec, &tremor, &sensor, &k).unwrap();
        let px = gt_max_parallax_px(&burst, &gt);
        assert!(px > 0.02 && px < 3.0, "parallax {px}px out of the tremor regime");
    }
}
