//! Geometrically accurate affine depth from a long-burst image stack.
//!
//! A multi-second handheld burst carries millimeter-scale camera motion from
//! natural hand tremor. This crate jointly optimizes an implicit image model,
//! a plane-plus-offset implicit depth model, and a smooth camera trajectory
//! against a photometric reprojection loss over the burst, recovering depth up
//! to an affine gauge together with the camera path.
//!
//! Module map:
//!
//! - [`diffmath`] — tape-based reverse-mode differentiation over dense f64
//!   tensors, plus bilinear image sampling and a finite-difference check harness.
//! - [`camera`] — pinhole geometry and the Bézier pose trajectory.
//! - [`scene`] — the implicit RGB-D representation: coordinate-encoded image
//!   MLP, plane-plus-offset depth MLP, coarse-to-fine frequency window.
//! - [`trainer`] — the joint optimization loop (photometric loss, Adam,
//!   alpha schedule).
//! - [`synth`] — synthetic long-burst generator: height-field scenes, tremor
//!   trajectories, a z-buffered rasterizer, and a two-mode sensor simulator.
//! - [`evalx`] — evaluation: affine-aligned depth metrics, pose errors, plane
//!   segmentation, mesh export with edge culling.
//! - [`cli`] — command-line entry points and the on-disk burst container.

pub mod camera;
pub mod cli;
pub mod diffmath;
pub mod evalx;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod trainer;
