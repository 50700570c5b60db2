//! Tape graph builders for the scene model, plus the flattened parameter set
//! the trainer optimizes.
//!
//! Every nonlinearity here exists in two forms that mirror each other
//! operation-for-operation: an eager scalar function (used by rendering and
//! point evaluation) and a tape subgraph (used by training). Keeping the two
//! side by side is what lets the equivalence tests pin them together.

use crate::camera::{ray_direction, Intrinsics, PoseTrajectory};
use crate::diffmath::{DTensor, NodeId, Tape};

use super::{encode_batch, EncodingConfig, SceneModel};

// ── mirrored nonlinearities ──────────────────────────────────────────

/// Logistic sigmoid; the argument of the exp is clamped to ±40 where the
/// output has long saturated, so the tape never sees an overflow.
#[inline]
pub fn sigmoid_eager(x: f64) -> f64 {
    let c = (x * -1.0).clamp(-40.0, 40.0);
    1.0 / (c.exp() + 1.0)
}

pub fn sigmoid_graph(tape: &mut Tape, x: NodeId) -> NodeId {
    let neg = tape.scale(x, -1.0);
    let c = tape.clamp(neg, -40.0, 40.0);
    let e = tape.exp(c);
    let p = tape.add_const(e, 1.0);
    tape.recip(p)
}

/// SiLU, the smooth ReLU substitute used on all hidden layers.
#[inline]
pub fn silu_eager(x: f64) -> f64 {
    x * sigmoid_eager(x)
}

pub fn silu_graph(tape: &mut Tape, x: NodeId) -> NodeId {
    let s = sigmoid_graph(tape, x);
    tape.mul(x, s)
}

/// Smooth positivity barrier: `z_min + softplus(β(x - z_min))/β`.
///
/// β is large (and a power of two), so the barrier only bends within a
/// ~1/β-wide band above `z_min` and is exact at working depths — a fresh
/// scene's depth equals its plane depth to the last bit that matters. The
/// softplus is the cancellation-free form `max(y,0) + ln(1 + e^{-|y|})`,
/// whose pieces compose to sigmoid'd gradients everywhere including y = 0.
#[inline]
pub fn barrier_eager(x: f64, z_min: f64, beta: f64) -> f64 {
    let y = (x - z_min) * beta;
    let a = y.abs();
    let mx = (y + a) * 0.5;
    let lp = ((a * -1.0).exp() + 1.0).ln();
    ((mx + lp) * (1.0 / beta)) + z_min
}

pub fn barrier_graph(tape: &mut Tape, x: NodeId, z_min: f64, beta: f64) -> NodeId {
    let zc = tape.constant_scalar(z_min);
    let d = tape.sub(x, zc);
    let y = tape.scale(d, beta);
    let a = tape.abs(y);
    let ya = tape.add(y, a);
    let mx = tape.scale(ya, 0.5);
    let na = tape.scale(a, -1.0);
    let e = tape.exp(na);
    let p = tape.add_const(e, 1.0);
    let lp = tape.log(p);
    let s = tape.add(mx, lp);
    let sc = tape.scale(s, 1.0 / beta);
    tape.add(sc, zc)
}

// ── parameter set ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    ImageMlp,
    DepthMlp,
    PlaneNormal,
    PlaneDist,
    PoseRot,
    PoseTrans,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: DTensor,
}

/// The optimizable state flattened to named tensors in a fixed order:
/// image MLP layers, depth MLP layers, plane (normal, offset), then the free
/// trajectory control points. The first control point of each track is
/// pinned to zero (frame-0 gauge) and never appears here.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    /// `include_image = false` drops the image MLP from the optimizable set
    /// (the fixed-reference-frame ablation).
    pub fn from_model(scene: &SceneModel, traj: &PoseTrajectory, include_image: bool) -> ParamSet {
        let mut entries = Vec::new();
        if include_image {
            for (l, (w, b)) in scene.image_mlp.weights.iter().zip(&scene.image_mlp.biases).enumerate() {
                entries.push(ParamEntry { name: format!("img.w{l}"), group: ParamGroup::ImageMlp, value: w.clone() });
                entries.push(ParamEntry { name: format!("img.b{l}"), group: ParamGroup::ImageMlp, value: b.clone() });
            }
        }
        for (l, (w, b)) in scene.depth_mlp.weights.iter().zip(&scene.depth_mlp.biases).enumerate() {
            entries.push(ParamEntry { name: format!("depth.w{l}"), group: ParamGroup::DepthMlp, value: w.clone() });
            entries.push(ParamEntry { name: format!("depth.b{l}"), group: ParamGroup::DepthMlp, value: b.clone() });
        }
        entries.push(ParamEntry {
            name: "plane.n".into(),
            group: ParamGroup::PlaneNormal,
            value: DTensor::new(vec![3], scene.plane.normal_raw.to_vec()).unwrap(),
        });
        entries.push(ParamEntry {
            name: "plane.d".into(),
            group: ParamGroup::PlaneDist,
            value: DTensor::scalar(scene.plane.d_p),
        });
        let degree = traj.degree();
        let flat = |ctrl: &[[f64; 3]]| -> DTensor {
            let mut d = Vec::with_capacity(degree * 3);
            for c in &ctrl[1..] {
                d.extend_from_slice(c);
            }
            DTensor::new(vec![degree, 3], d).unwrap()
        };
        entries.push(ParamEntry { name: "pose.rot".into(), group: ParamGroup::PoseRot, value: flat(&traj.rot_ctrl) });
        entries.push(ParamEntry { name: "pose.trans".into(), group: ParamGroup::PoseTrans, value: flat(&traj.trans_ctrl) });
        ParamSet { entries }
    }

    pub fn values(&self) -> Vec<DTensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn index(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get(&self, name: &str) -> &DTensor {
        &self.entries[self.index(name)].value
    }

    /// Replace all values (same order as `entries`).
    pub fn set_values(&mut self, values: Vec<DTensor>) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(e.value.shape(), v.shape(), "parameter {} changed shape", e.name);
            e.value = v;
        }
    }

    /// Write the current values back into a scene and trajectory.
    pub fn write_back(&self, scene: &mut SceneModel, traj: &mut PoseTrajectory) {
        for e in &self.entries {
            match e.group {
                ParamGroup::ImageMlp | ParamGroup::DepthMlp => {
                    let (mlp, rest) = if e.name.starts_with("img.") {
                        (&mut scene.image_mlp, &e.name[4..])
                    } else {
                        (&mut scene.depth_mlp, &e.name[6..])
                    };
                    let l: usize = rest[1..].parse().expect("layer index");
                    if rest.starts_with('w') {
                        mlp.weights[l] = e.value.clone();
                    } else {
                        mlp.biases[l] = e.value.clone();
                    }
                }
                ParamGroup::PlaneNormal | ParamGroup::PlaneDist => {
                    if e.name == "plane.n" {
                        scene.plane.normal_raw = [e.value.data()[0], e.value.data()[1], e.value.data()[2]];
                    } else {
                        scene.plane.d_p = e.value.item();
                    }
                }
                ParamGroup::PoseRot | ParamGroup::PoseTrans => {
                    let ctrl = if e.name == "pose.rot" { &mut traj.rot_ctrl } else { &mut traj.trans_ctrl };
                    let d = e.value.data();
                    ctrl[0] = [0.0; 3];
                    for (i, c) in ctrl.iter_mut().skip(1).enumerate() {
                        *c = [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]];
                    }
                }
            }
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Declare one tape input per parameter entry, in order; returns their ids.
pub fn declare_inputs(tape: &mut Tape, params: &ParamSet) -> Vec<NodeId> {
    params.entries.iter().map(|e| tape.input(e.value.shape().to_vec())).collect()
}

/// Handles into a scene evaluation subgraph.
pub struct SceneNodes {
    /// Colors `[m, channels]` (sigmoid-mapped, or the fixed constant).
    pub colors: NodeId,
    /// Barriered depth `[m]`.
    pub depth: NodeId,
    /// Raw MLP offset `[m]`.
    pub offset: NodeId,
    /// Plane intersection depth `[m]`.
    pub plane_depth: NodeId,
}

/// Build the scene evaluation subgraph at `pixels` with window progress
/// `alpha`. `input_ids` must come from [`declare_inputs`] on the same
/// `ParamSet`. When `fixed_colors` is given, the color path is that constant
/// and the image MLP is not consulted (`params` then must not contain it).
pub fn build_scene_eval(
    tape: &mut Tape,
    scene: &SceneModel,
    params: &ParamSet,
    input_ids: &[NodeId],
    k: &Intrinsics,
    pixels: &[(f64, f64)],
    alpha: f64,
    fixed_colors: Option<DTensor>,
) -> SceneNodes {
    let m = pixels.len();
    let cfg = EncodingConfig { alpha, ..scene.encoding };
    let feats = tape.constant(encode_batch(pixels, k, &cfg));

    let colors = match fixed_colors {
        Some(c) => {
            assert_eq!(c.shape(), &[m, scene.channels]);
            tape.constant(c)
        }
        None => {
            let slots = mlp_slots(params, input_ids, "img", scene.image_mlp.weights.len());
            mlp_graph(tape, &slots, feats, true)
        }
    };

    let slots = mlp_slots(params, input_ids, "depth", scene.depth_mlp.weights.len());
    let off2d = mlp_graph(tape, &slots, feats, false);
    let offset = tape.reshape(off2d, vec![m]);

    // Rays through the batch pixels (constant), dotted with the normalized
    // plane normal. The z sign of the normal is resolved at build time; it
    // only flips when the optimizer has pushed the raw normal through the
    // horizon, at which point the next rebuild picks the flip up.
    let mut ray_data = Vec::with_capacity(m * 3);
    for &(u, v) in pixels {
        ray_data.extend_from_slice(&ray_direction(k, u, v).dir);
    }
    let rays = tape.constant(DTensor::new(vec![m, 3], ray_data).unwrap());

    let n_raw = input_ids[params.index("plane.n")];
    let d_p = input_ids[params.index("plane.d")];
    let nsq = tape.mul(n_raw, n_raw);
    let n2 = tape.sum(nsq);
    let len = tape.sqrt(n2);
    let unit = tape.div(n_raw, len);
    let sign = if params.get("plane.n").data()[2] < 0.0 { -1.0 } else { 1.0 };
    let n_hat = tape.scale(unit, sign);
    let ndotr = tape.matmul(rays, n_hat);
    let plane_depth = tape.div(d_p, ndotr);

    let pre = tape.add(plane_depth, offset);
    let depth = barrier_graph(tape, pre, scene.barrier_z_min, scene.barrier_beta);

    SceneNodes { colors, depth, offset, plane_depth }
}

struct MlpSlots {
    w: Vec<NodeId>,
    b: Vec<NodeId>,
}

fn mlp_slots(params: &ParamSet, input_ids: &[NodeId], prefix: &str, layers: usize) -> MlpSlots {
    let w = (0..layers).map(|l| input_ids[params.index(&format!("{prefix}.w{l}"))]).collect();
    let b = (0..layers).map(|l| input_ids[params.index(&format!("{prefix}.b{l}"))]).collect();
    MlpSlots { w, b }
}

fn mlp_graph(tape: &mut Tape, slots: &MlpSlots, x: NodeId, sigmoid_head: bool) -> NodeId {
    let last = slots.w.len() - 1;
    let mut h = x;
    for l in 0..slots.w.len() {
        let mm = tape.matmul(h, slots.w[l]);
        let z = tape.add(mm, slots.b[l]);
        h = if l < last {
            silu_graph(tape, z)
        } else if sigmoid_head {
            sigmoid_graph(tape, z)
        } else {
            z
        };
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, DTensor};
    use crate::scene::{depth_at, init_scene, plane_depth as plane_depth_eager, ModelConfig};

    fn small_cfg() -> ModelConfig {
        ModelConfig { image_hidden: vec![16, 16], depth_hidden: vec![12, 12], bands: 3, include_raw: true }
    }

    fn k32() -> Intrinsics {
        Intrinsics { fx: 40.0, fy: 40.0, cx: 16.0, cy: 16.0, width: 32, height: 32 }
    }

    #[test]
    fn mirrored_nonlinearities_agree() {
        for &x in &[-50.0, -3.2, -0.5, 0.0, 0.5, 4.1, 60.0] {
            let mut tape = Tape::new();
            let xin = tape.input(vec![1]);
            let s = silu_graph(&mut tape, xin);
            let g = sigmoid_graph(&mut tape, xin);
            let b = barrier_graph(&mut tape, xin, 0.05, 512.0);
            tape.mark_output(s);
            tape.mark_output(g);
            tape.mark_output(b);
            let out = tape.forward(&[DTensor::scalar(x)]).unwrap();
            assert_eq!(out[0].item(), silu_eager(x), "silu at {x}");
            assert_eq!(out[1].item(), sigmoid_eager(x), "sigmoid at {x}");
            assert_eq!(out[2].item(), barrier_eager(x, 0.05, 512.0), "barrier at {x}");
        }
    }

    #[test]
    fn barrier_exact_away_from_floor_and_floors_below() {
        let (z_min, beta) = (0.05, 512.0);
        assert!((barrier_eager(1.0, z_min, beta) - 1.0).abs() < 1e-12);
        assert!((barrier_eager(0.4, z_min, beta) - 0.4).abs() < 1e-12);
        assert!(barrier_eager(-5.0, z_min, beta) >= z_min * 0.999);
        assert!(barrier_eager(-5.0, z_min, beta) <= z_min * 1.001);
        // Monotone through the bend.
        let mut prev = barrier_eager(0.0, z_min, beta);
        let mut x = 0.0;
        while x < 0.2 {
            x += 1e-4;
            let b = barrier_eager(x, z_min, beta);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn tape_scene_matches_eager_evaluation() {
        let mut scene = init_scene(&small_cfg(), 3, 11);
        // Non-trivial offsets and a slightly tilted plane.
        let last = scene.depth_mlp.weights.len() - 1;
        let shape = scene.depth_mlp.weights[last].shape().to_vec();
        let n: usize = shape.iter().product();
        scene.depth_mlp.weights[last] =
            DTensor::new(shape, (0..n).map(|i| ((i % 7) as f64 - 3.0) * 4e-3).collect()).unwrap();
        scene.plane.normal_raw = [0.05, -0.03, 0.9];
        scene.plane.d_p = 1.2;
        scene.encoding.alpha = 1.7;

        let traj = PoseTrajectory::zero(2);
        let params = ParamSet::from_model(&scene, &traj, true);
        let k = k32();
        let pixels = vec![(3.2, 4.7), (16.0, 16.0), (28.9, 1.1)];

        let mut tape = Tape::new();
        let ids = declare_inputs(&mut tape, &params);
        let nodes = build_scene_eval(&mut tape, &scene, &params, &ids, &k, &pixels, 1.7, None);
        tape.mark_output(nodes.colors);
        tape.mark_output(nodes.depth);
        tape.mark_output(nodes.plane_depth);
        let out = tape.forward(&params.values()).unwrap();

        for (i, &px) in pixels.iter().enumerate() {
            let c_eager = crate::scene::color_at(&scene, &k, px);
            for ch in 0..3 {
                assert!((out[0].data()[i * 3 + ch] - c_eager[ch]).abs() < 1e-12);
            }
            let d_eager = depth_at(&scene, &k, px).unwrap();
            assert!((out[1].data()[i] - d_eager).abs() < 1e-12);
            let p_eager = plane_depth_eager(&scene.plane, &k, px).unwrap();
            assert!((out[2].data()[i] - p_eager).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_graph_gradients_check() {
        let mut scene = init_scene(&small_cfg(), 2, 21);
        let last = scene.depth_mlp.weights.len() - 1;
        let shape = scene.depth_mlp.weights[last].shape().to_vec();
        let n: usize = shape.iter().product();
        scene.depth_mlp.weights[last] =
            DTensor::new(shape, (0..n).map(|i| ((i % 5) as f64 - 2.0) * 3e-3).collect()).unwrap();
        let traj = PoseTrajectory::zero(2);
        let params = ParamSet::from_model(&scene, &traj, true);
        let k = k32();
        let pixels = vec![(7.3, 9.1), (20.6, 25.2)];

        let mut tape = Tape::new();
        let ids = declare_inputs(&mut tape, &params);
        let nodes = build_scene_eval(&mut tape, &scene, &params, &ids, &k, &pixels, 2.5, None);
        let csum = tape.sum(nodes.colors);
        let dsum = tape.sum(nodes.depth);
        let obj = tape.add(csum, dsum);
        tape.mark_output(obj);
        // Whole-graph tolerance: probes with near-zero gradients sit at the
        // FD noise floor (ulp(L)/eps ≈ 1e-11 absolute), so per-primitive
        // tightness does not transfer to the composed graph.
        let rep = grad_check(&mut tape, &params.values(), 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-3, "max rel err {}", rep.max_rel_err);
        assert!(!rep.has_kinks());
    }

    #[test]
    fn depth_gradient_wrt_plane_distance_on_tape() {
        // d(depth)/d(d_p) at init = 1/(n̂·r).
        let scene = init_scene(&small_cfg(), 3, 2);
        let traj = PoseTrajectory::zero(2);
        let params = ParamSet::from_model(&scene, &traj, true);
        let k = k32();
        let px = (5.0, 27.0);
        let mut tape = Tape::new();
        let ids = declare_inputs(&mut tape, &params);
        let nodes = build_scene_eval(&mut tape, &scene, &params, &ids, &k, &[px], 0.0, None);
        tape.mark_output(nodes.depth);
        tape.forward(&params.values()).unwrap();
        let grads = tape.backward(&[DTensor::from_vec(vec![1.0])]).unwrap();
        let g_dp = grads[params.index("plane.d")].item();
        let r = ray_direction(&k, px.0, px.1);
        let nrm = scene.plane.normalized();
        let expect = 1.0 / (nrm[0] * r.dir[0] + nrm[1] * r.dir[1] + nrm[2] * r.dir[2]);
        assert!((g_dp - expect).abs() < 1e-10, "{g_dp} vs {expect}");
    }

    #[test]
    fn param_set_round_trip() {
        let scene = init_scene(&small_cfg(), 3, 8);
        let mut traj = PoseTrajectory::zero(2);
        traj.rot_ctrl[1] = [0.01, 0.02, 0.03];
        traj.trans_ctrl[2] = [-0.1, 0.0, 0.2];
        let params = ParamSet::from_model(&scene, &traj, true);
        let mut scene2 = init_scene(&small_cfg(), 3, 999);
        let mut traj2 = PoseTrajectory::zero(2);
        params.write_back(&mut scene2, &mut traj2);
        assert_eq!(scene2.image_mlp.weights[0], scene.image_mlp.weights[0]);
        assert_eq!(scene2.plane, scene.plane);
        assert_eq!(traj2, traj);
        assert_eq!(traj2.rot_ctrl[0], [0.0; 3]);
    }
}
