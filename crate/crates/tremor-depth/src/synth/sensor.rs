//! Two-mode sensor simulation over linear renders.
//!
//! `raw12`: mosaic to RGGB photosites, shot + read noise in the linear
//! domain, 12-bit quantization, emitted as four half-resolution planes
//! (R, G1, G2, B) in [0, 1]. The planes keep their quarter-pel phase — see
//! [`plane_offsets`] — and the reprojection path accounts for it.
//!
//! `rgb8`: the same noise in the linear domain, then gamma encoding and 8-bit
//! quantization at full resolution. No demosaic is simulated in either mode;
//! the render is already RGB, so the pair isolates bit depth and linearity.

use serde::{Deserialize, Serialize};

use crate::diffmath::DTensor;
use crate::rng::{stream, CounterRng};

use super::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorMode {
    Raw12,
    Rgb8,
}

impl SensorMode {
    pub fn channels(&self) -> usize {
        match self {
            SensorMode::Raw12 => 4,
            SensorMode::Rgb8 => 3,
        }
    }
}

impl std::fmt::Display for SensorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SensorMode::Raw12 => "raw12",
            SensorMode::Rgb8 => "rgb8",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub mode: SensorMode,
    /// Read-noise sigma in normalized signal units.
    pub read_noise: f64,
    /// Shot-noise variance per unit signal: sigma² = shot_gain · signal.
    pub shot_gain: f64,
    /// Display gamma for rgb8 encoding.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig { mode: SensorMode::Raw12, read_noise: 2e-3, shot_gain: 1e-4, gamma: 2.2, seed: 3 }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.read_noise < 0.0 || self.shot_gain < 0.0 {
            return Err(SynthError::BadSpec("noise parameters must be >= 0".into()));
        }
        if self.gamma <= 0.0 {
            return Err(SynthError::BadSpec("gamma must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-plane photosite offsets on the full-resolution grid, `(dx, dy)` for
/// planes [R, G1, G2, B]: half-res pixel `(i, j)` of plane p samples
/// full-res `(2j + dx, 2i + dy)`.
pub const fn plane_offsets() -> [(usize, usize); 4] {
    [(0, 0), (1, 0), (0, 1), (1, 1)]
}

/// Source RGB channel of each RGGB plane.
pub const fn plane_channel() -> [usize; 4] {
    [0, 1, 1, 2]
}

const RAW_MAX: f64 = 4095.0;
const RGB_MAX: f64 = 255.0;

fn noisy(x: f64, cfg: &SensorConfig, rng: &mut CounterRng) -> f64 {
    if cfg.read_noise == 0.0 && cfg.shot_gain == 0.0 {
        return x;
    }
    let sigma = (cfg.shot_gain * x.max(0.0) + cfg.read_noise * cfg.read_noise).sqrt();
    x + sigma * rng.next_normal()
}

/// Simulate one frame. `linear` is `[h, w, 3]` in [0, 1]; the output is
/// `[h/2, w/2, 4]` for raw12 (h, w even) or `[h, w, 3]` for rgb8, both
/// holding quantized codes rescaled to [0, 1].
pub fn simulate_sensor(linear: &DTensor, cfg: &SensorConfig) -> Result<DTensor, SynthError> {
    cfg.validate()?;
    let shape = linear.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SynthError::BadSpec(format!("expected [h, w, 3] linear image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let src = linear.data();
    let mut rng = CounterRng::new(cfg.seed, stream::SENSOR_NOISE);

    match cfg.mode {
        SensorMode::Raw12 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(SynthError::BadSpec(format!("raw12 needs even dimensions, got {h}x{w}")));
            }
            let (hh, hw) = (h / 2, w / 2);
            let offs = plane_offsets();
            let chan = plane_channel();
            let mut out = vec![0.0; hh * hw * 4];
            for i in 0..hh {
                for j in 0..hw {
                    for p in 0..4 {
                        let (dx, dy) = offs[p];
                        let full = ((2 * i + dy) * w + (2 * j + dx)) * 3 + chan[p];
                        let x = noisy(src[full], cfg, &mut rng);
                        let code = (x.clamp(0.0, 1.0) * RAW_MAX).round();
                        out[(i * hw + j) * 4 + p] = code / RAW_MAX;
                    }
                }
            }
            Ok(DTensor::new(vec![hh, hw, 4], out).expect("finite sensor output"))
        }
        SensorMode::Rgb8 => {
            let mut out = vec![0.0; h * w * 3];
            for (o, x) in out.iter_mut().zip(src) {
                let v = noisy(*x, cfg, &mut rng).clamp(0.0, 1.0);
                let code = (v.powf(1.0 / cfg.gamma) * RGB_MAX).round();
                *o = code / RGB_MAX;
            }
            Ok(DTensor::new(vec![h, w, 3], out).expect("finite sensor output"))
        }
    }
}

/// Invert the noiseless encoding of a stored value back to linear units.
pub fn delinearize(stored: f64, cfg: &SensorConfig) -> f64 {
    match cfg.mode {
        SensorMode::Raw12 => stored,
        SensorMode::Rgb8 => stored.powf(cfg.gamma),
    }
}
