use ndarray::linalg::{general_mat_mul, general_mat_vec_mul};
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::sample::{bilinear_backward, bilinear_forward, sample_mask_forward};
use super::tensor::DTensor;
use super::TapeError;

pub type NodeId = usize;

/// Broadcast pairing for elementwise binary ops, resolved at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Left operand is a single element.
    LeftScalar,
    /// Right operand is a single element.
    RightScalar,
    /// Left is `[m, n]`, right is `[n]`: right repeats across rows.
    RightRow,
    /// Left is `[m, n]`, right is `[m, 1]`: right repeats across columns.
    RightCol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnKind {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Recip,
    /// Subgradient 0 at the origin.
    Abs,
}

/// Tape node operations.
///
/// The differentiable math primitives are: add, sub, mul, div, matmul/matvec,
/// sin, cos, exp, log, sqrt, reciprocal, clamp, sum, mean, abs, and
/// bilinear_sample. The remaining variants are zero-arithmetic layout ops
/// (reshape, transpose, concat, slice) and the non-differentiable validity
/// mask companion to bilinear sampling.
#[derive(Clone, Debug)]
pub enum Op {
    Input { slot: usize },
    Const(DTensor),
    Bin { kind: BinKind, a: NodeId, b: NodeId, bc: Broadcast },
    Un { kind: UnKind, a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Matmul { a: NodeId, b: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// `image` is `[h, w, c]`, `coords` is `[m, 2]` as (x, y) pixel positions;
    /// output is `[m, c]`, zero where a sample falls outside the image.
    BilinearSample { image: NodeId, coords: NodeId },
    /// 0/1 validity of each bilinear sample, replicated per channel to
    /// `[m, c]`. Optionally also requires `z > z_min` per sample (`z` is
    /// `[m, 1]` or `[m]`). Carries no gradient to any of its inputs.
    SampleMask { image: NodeId, coords: NodeId, z: Option<NodeId>, z_min: f64 },
    Reshape { a: NodeId },
    Transpose { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Reverse-mode Wengert tape over [`DTensor`] values.
///
/// A tape is a reusable expression graph: build it once with the `input`/op
/// methods, then call [`Tape::forward`] with concrete input tensors (any
/// number of times — the graph replays deterministically) and
/// [`Tape::backward`] for input gradients. Node order is a topological order
/// by construction, and all reductions run sequentially in node order, so
/// both passes are bitwise reproducible.
///
/// A tape is single-writer: `forward`/`backward` take `&mut self`. Run
/// disjoint tapes for concurrent evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    input_ids: Vec<NodeId>,
    output_ids: Vec<NodeId>,
    values: Vec<Option<DTensor>>,
    adjoints: Vec<Option<Vec<f64>>>,
    forward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, needs_grad });
        self.forward_done = false;
        self.nodes.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn grad_of(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.input_ids.len()
    }

    pub fn input_shape(&self, slot: usize) -> &[usize] {
        self.shape_of(self.input_ids[slot])
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape_of(id)
    }

    // ── graph construction ───────────────────────────────────────────

    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        let slot = self.input_ids.len();
        let id = self.push(Op::Input { slot }, shape, true);
        self.input_ids.push(id);
        id
    }

    pub fn constant(&mut self, t: DTensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.constant(DTensor::scalar(x))
    }

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let (bc, out) = broadcast_shapes(&sa, &sb).unwrap_or_else(|| {
            panic!("{kind:?}: incompatible shapes {sa:?} and {sb:?}")
        });
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push(Op::Bin { kind, a, b, bc }, out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(BinKind::Div, a, b)
    }

    fn un(&mut self, kind: UnKind, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        let needs = self.grad_of(a);
        self.push(Op::Un { kind, a }, shape, needs)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Cos, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Sqrt, a)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Recip, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.un(UnKind::Abs, a)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp bounds {lo} >= {hi}");
        let shape = self.shape_of(a).to_vec();
        let needs = self.grad_of(a);
        self.push(Op::Clamp { a, lo, hi }, shape, needs)
    }

    /// Scale by a compile-time constant; sugar for `mul` with a scalar const.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let c = self.constant_scalar(k);
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let c = self.constant_scalar(k);
        self.add(a, c)
    }

    /// `[m, k] x [k, n] -> [m, n]`, or matvec `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D, got {sa:?}");
        let out = match sb.len() {
            2 => {
                assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
                vec![sa[0], sb[1]]
            }
            1 => {
                assert_eq!(sa[1], sb[0], "matvec inner dims: {sa:?} x {sb:?}");
                vec![sa[0]]
            }
            _ => panic!("matmul rhs must be 1-D or 2-D, got {sb:?}"),
        };
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push(Op::Matmul { a, b }, out, needs)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let needs = self.grad_of(a);
        self.push(Op::Sum { a }, vec![1], needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        assert!(self.shape_of(a).iter().product::<usize>() > 0, "mean of empty tensor");
        let needs = self.grad_of(a);
        self.push(Op::Mean { a }, vec![1], needs)
    }

    pub fn bilinear_sample(&mut self, image: NodeId, coords: NodeId) -> NodeId {
        let si = self.shape_of(image).to_vec();
        let sc = self.shape_of(coords).to_vec();
        assert_eq!(si.len(), 3, "image must be [h, w, c], got {si:?}");
        assert!(si[0] >= 1 && si[1] >= 1 && si[2] >= 1, "empty image {si:?}");
        assert_eq!(sc.len(), 2, "coords must be [m, 2], got {sc:?}");
        assert_eq!(sc[1], 2, "coords must be [m, 2], got {sc:?}");
        let needs = self.grad_of(image) || self.grad_of(coords);
        self.push(Op::BilinearSample { image, coords }, vec![sc[0], si[2]], needs)
    }

    pub fn sample_mask(&mut self, image: NodeId, coords: NodeId, z: Option<NodeId>, z_min: f64) -> NodeId {
        let si = self.shape_of(image).to_vec();
        let sc = self.shape_of(coords).to_vec();
        assert_eq!(si.len(), 3);
        assert_eq!(sc.len(), 2);
        assert_eq!(sc[1], 2);
        if let Some(z) = z {
            let sz = self.shape_of(z);
            assert_eq!(sz.iter().product::<usize>(), sc[0], "z count must match samples");
        }
        // The mask is a step function of its inputs: no gradient ever flows.
        self.push(Op::SampleMask { image, coords, z, z_min }, vec![sc[0], si[2]], false)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = self.shape_of(a).iter().product();
        assert_eq!(shape.iter().product::<usize>(), n, "reshape {:?} -> {shape:?}", self.shape_of(a));
        let needs = self.grad_of(a);
        self.push(Op::Reshape { a }, shape, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        assert_eq!(s.len(), 2, "transpose of {s:?}");
        let needs = self.grad_of(a);
        self.push(Op::Transpose { a }, vec![s[1], s[0]], needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape_of(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape_of(p);
            assert_eq!(s.len(), 2, "concat_rows part {s:?}");
            assert_eq!(s[1], cols, "concat_rows column mismatch");
            rows += s[0];
        }
        let needs = parts.iter().any(|&p| self.grad_of(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape_of(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape_of(p);
            assert_eq!(s.len(), 2, "concat_cols part {s:?}");
            assert_eq!(s[0], rows, "concat_cols row mismatch");
            cols += s[1];
        }
        let needs = parts.iter().any(|&p| self.grad_of(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, cols], needs)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape_of(a).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[0], "slice_rows {start}+{len} > {}", s[0]);
        let needs = self.grad_of(a);
        self.push(Op::SliceRows { a, start, len }, vec![len, s[1]], needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape_of(a).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[1], "slice_cols {start}+{len} > {}", s[1]);
        let needs = self.grad_of(a);
        self.push(Op::SliceCols { a, start, len }, vec![s[0], len], needs)
    }

    /// Single row as a 1-D vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let cols = self.shape_of(a)[1];
        let r = self.slice_rows(a, i, 1);
        self.reshape(r, vec![cols])
    }

    /// Single column as `[m, 1]`.
    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        self.slice_cols(a, j, 1)
    }

    pub fn mark_output(&mut self, id: NodeId) {
        assert!(id < self.nodes.len());
        self.output_ids.push(id);
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.output_ids
    }

    // ── execution ────────────────────────────────────────────────────

    /// Runs the graph on `inputs` (one tensor per declared input, in
    /// declaration order). All intermediate values are cached for
    /// [`Tape::backward`]. Identical inputs reproduce identical outputs
    /// bit-for-bit.
    pub fn forward(&mut self, inputs: &[DTensor]) -> Result<Vec<DTensor>, TapeError> {
        if inputs.len() != self.input_ids.len() {
            return Err(TapeError::InputCount { expected: self.input_ids.len(), got: inputs.len() });
        }
        for (slot, t) in inputs.iter().enumerate() {
            let want = self.shape_of(self.input_ids[slot]);
            if t.shape() != want {
                return Err(TapeError::ShapeMismatch(format!(
                    "input {slot}: expected {:?}, got {:?}",
                    want,
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(TapeError::NonFinite(format!("input {slot} contains NaN/Inf")));
            }
        }

        let n = self.nodes.len();
        self.values = vec![None; n];
        self.adjoints.clear();
        for id in 0..n {
            let value = self.eval_node(id, inputs)?;
            self.values[id] = Some(value);
        }
        self.forward_done = true;

        Ok(self
            .output_ids
            .iter()
            .map(|&id| {
                let mut t = self.values[id].clone().expect("forward filled all values");
                t.tape_id = Some(id);
                t
            })
            .collect())
    }

    /// Value of any node after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&DTensor> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    fn val(&self, id: NodeId) -> &DTensor {
        self.values[id].as_ref().expect("value not computed")
    }

    fn eval_node(&self, id: NodeId, inputs: &[DTensor]) -> Result<DTensor, TapeError> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Input { slot } => inputs[*slot].clone(),
            Op::Const(t) => t.clone(),
            Op::Bin { kind, a, b, bc } => bin_forward(*kind, self.val(*a), self.val(*b), *bc),
            Op::Un { kind, a } => un_forward(*kind, self.val(*a)),
            Op::Clamp { a, lo, hi } => {
                let d = self.val(*a).data().iter().map(|x| x.clamp(*lo, *hi)).collect();
                DTensor::from_parts(node.shape.clone(), d)
            }
            Op::Matmul { a, b } => matmul_forward(self.val(*a), self.val(*b)),
            Op::Sum { a } => DTensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean { a } => {
                let v = self.val(*a);
                DTensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)
            }
            Op::BilinearSample { image, coords } => bilinear_forward(self.val(*image), self.val(*coords)),
            Op::SampleMask { image, coords, z, z_min } => {
                let zv = z.map(|z| self.val(z));
                sample_mask_forward(self.val(*image), self.val(*coords), zv, *z_min)
            }
            Op::Reshape { a } => {
                let v = self.val(*a);
                DTensor::from_parts(node.shape.clone(), v.data().to_vec())
            }
            Op::Transpose { a } => {
                let v = self.val(*a);
                let (m, n) = (v.shape()[0], v.shape()[1]);
                let src = v.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = src[i * n + j];
                    }
                }
                DTensor::from_parts(vec![n, m], d)
            }
            Op::ConcatRows { parts } => {
                let mut d = Vec::with_capacity(node.shape.iter().product());
                for &p in parts {
                    d.extend_from_slice(self.val(p).data());
                }
                DTensor::from_parts(node.shape.clone(), d)
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let cols = node.shape[1];
                let mut d = vec![0.0; rows * cols];
                let mut off = 0;
                for &p in parts {
                    let v = self.val(p);
                    let pc = v.shape()[1];
                    let src = v.data();
                    for i in 0..rows {
                        d[i * cols + off..i * cols + off + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
                    }
                    off += pc;
                }
                DTensor::from_parts(node.shape.clone(), d)
            }
            Op::SliceRows { a, start, len } => {
                let v = self.val(*a);
                let n = v.shape()[1];
                let d = v.data()[start * n..(start + len) * n].to_vec();
                DTensor::from_parts(vec![*len, n], d)
            }
            Op::SliceCols { a, start, len } => {
                let v = self.val(*a);
                let (m, n) = (v.shape()[0], v.shape()[1]);
                let src = v.data();
                let mut d = Vec::with_capacity(m * len);
                for i in 0..m {
                    d.extend_from_slice(&src[i * n + start..i * n + start + len]);
                }
                DTensor::from_parts(vec![m, *len], d)
            }
        };
        debug_assert_eq!(out.shape(), node.shape.as_slice(), "node {id} shape drifted");
        Ok(out)
    }

    /// Reverse pass. `output_adjoints` pairs with the marked outputs; the
    /// implied objective is `L = sum_k sum(output_k ⊙ adjoint_k)`. Returns
    /// `dL/d(input)` per input slot. Adjoint accumulators are zeroed at the
    /// start of every call, and accumulation runs sequentially in reverse
    /// node order.
    pub fn backward(&mut self, output_adjoints: &[DTensor]) -> Result<Vec<DTensor>, TapeError> {
        if !self.forward_done {
            return Err(TapeError::BackwardBeforeForward);
        }
        if output_adjoints.len() != self.output_ids.len() {
            return Err(TapeError::InputCount {
                expected: self.output_ids.len(),
                got: output_adjoints.len(),
            });
        }
        let n = self.nodes.len();
        self.adjoints = vec![None; n];
        for (k, adj) in output_adjoints.iter().enumerate() {
            let id = self.output_ids[k];
            if adj.shape() != self.shape_of(id) {
                return Err(TapeError::ShapeMismatch(format!(
                    "output adjoint {k}: expected {:?}, got {:?}",
                    self.shape_of(id),
                    adj.shape()
                )));
            }
            acc_into(&mut self.adjoints[id], self.nodes[id].shape.iter().product(), adj.data());
        }

        for id in (0..n).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dz) = self.adjoints[id].take() else { continue };
            self.propagate(id, &dz);
            self.adjoints[id] = Some(dz);
        }

        Ok(self
            .input_ids
            .iter()
            .map(|&id| match &self.adjoints[id] {
                Some(a) => DTensor::from_parts(self.nodes[id].shape.clone(), a.clone()),
                None => DTensor::zeros(self.nodes[id].shape.clone()),
            })
            .collect())
    }

    fn propagate(&mut self, id: NodeId, dz: &[f64]) {
        // Split borrows: clone op metadata (cheap; Const never reaches here
        // with a gradient).
        let op = self.nodes[id].op.clone();
        match op {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Bin { kind, a, b, bc } => {
                let (ga, gb) = bin_backward(kind, self.val(a), self.val(b), self.val(id), bc, dz);
                if self.grad_of(a) {
                    self.acc(a, &ga);
                }
                if self.grad_of(b) {
                    self.acc(b, &gb);
                }
            }
            Op::Un { kind, a } => {
                if self.grad_of(a) {
                    let g = un_backward(kind, self.val(a), self.val(id), dz);
                    self.acc(a, &g);
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.grad_of(a) {
                    let av = self.val(a).data();
                    let g: Vec<f64> = av
                        .iter()
                        .zip(dz)
                        .map(|(x, d)| if *x > lo && *x < hi { *d } else { 0.0 })
                        .collect();
                    self.acc(a, &g);
                }
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = matmul_backward(self.val(a), self.val(b), dz);
                if self.grad_of(a) {
                    self.acc(a, &ga);
                }
                if self.grad_of(b) {
                    self.acc(b, &gb);
                }
            }
            Op::Sum { a } => {
                if self.grad_of(a) {
                    let g = vec![dz[0]; self.val(a).numel()];
                    self.acc(a, &g);
                }
            }
            Op::Mean { a } => {
                if self.grad_of(a) {
                    let n = self.val(a).numel();
                    let g = vec![dz[0] / n as f64; n];
                    self.acc(a, &g);
                }
            }
            Op::BilinearSample { image, coords } => {
                let (gi, gc) = bilinear_backward(self.val(image), self.val(coords), dz);
                if self.grad_of(image) {
                    self.acc(image, &gi);
                }
                if self.grad_of(coords) {
                    self.acc(coords, &gc);
                }
            }
            Op::SampleMask { .. } => {}
            Op::Reshape { a } => {
                if self.grad_of(a) {
                    self.acc(a, dz);
                }
            }
            Op::Transpose { a } => {
                if self.grad_of(a) {
                    let (m, n) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    // dz is [n, m]; transpose back.
                    let mut g = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            g[i * n + j] = dz[j * m + i];
                        }
                    }
                    self.acc(a, &g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in &parts {
                    let len = self.val(p).numel();
                    if self.grad_of(p) {
                        let g = dz[off..off + len].to_vec();
                        self.acc(p, &g);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[id].shape[0];
                let cols = self.nodes[id].shape[1];
                let mut off = 0;
                for &p in &parts {
                    let pc = self.val(p).shape()[1];
                    if self.grad_of(p) {
                        let mut g = vec![0.0; rows * pc];
                        for i in 0..rows {
                            g[i * pc..(i + 1) * pc].copy_from_slice(&dz[i * cols + off..i * cols + off + pc]);
                        }
                        self.acc(p, &g);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.grad_of(a) {
                    let (m, n) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    let mut g = vec![0.0; m * n];
                    g[start * n..(start + len) * n].copy_from_slice(dz);
                    self.acc(a, &g);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.grad_of(a) {
                    let (m, n) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    let mut g = vec![0.0; m * n];
                    for i in 0..m {
                        g[i * n + start..i * n + start + len].copy_from_slice(&dz[i * len..(i + 1) * len]);
                    }
                    self.acc(a, &g);
                }
            }
        }
    }

    fn acc(&mut self, id: NodeId, contribution: &[f64]) {
        let n = self.nodes[id].shape.iter().product();
        acc_into(&mut self.adjoints[id], n, contribution);
    }

    /// Nodes whose forward value sits within `eps` of a non-differentiable
    /// point: clamp bounds, the origin of abs, or an interpolation-cell
    /// boundary of a bilinear sample. Only nodes on a gradient path are
    /// reported. Requires a prior `forward`.
    pub fn kink_nodes(&self, eps: f64) -> Vec<NodeId> {
        let mut flagged = Vec::new();
        if !self.forward_done {
            return flagged;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                continue;
            }
            let hit = match &node.op {
                Op::Clamp { a, lo, hi } => self
                    .val(*a)
                    .data()
                    .iter()
                    .any(|x| (x - lo).abs() <= eps || (x - hi).abs() <= eps),
                Op::Un { kind: UnKind::Abs, a } => self.val(*a).data().iter().any(|x| x.abs() <= eps),
                Op::BilinearSample { coords, .. } => {
                    // Kinks in the coords argument; only relevant when the
                    // coordinates themselves carry gradient.
                    self.grad_of(*coords)
                        && self
                            .val(*coords)
                            .data()
                            .iter()
                            .any(|x| (x - x.round()).abs() <= eps)
                }
                _ => false,
            };
            if hit {
                flagged.push(id);
            }
        }
        flagged
    }
}

fn acc_into(slot: &mut Option<Vec<f64>>, numel: usize, contribution: &[f64]) {
    debug_assert_eq!(numel, contribution.len());
    match slot {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

/// Resolve the broadcast kind and output shape for a binary op, or `None`
/// if the shapes are incompatible.
pub fn broadcast_shapes(sa: &[usize], sb: &[usize]) -> Option<(Broadcast, Vec<usize>)> {
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    if sa == sb {
        return Some((Broadcast::Same, sa.to_vec()));
    }
    if na == 1 {
        return Some((Broadcast::LeftScalar, sb.to_vec()));
    }
    if nb == 1 {
        return Some((Broadcast::RightScalar, sa.to_vec()));
    }
    if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
        return Some((Broadcast::RightRow, sa.to_vec()));
    }
    if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
        return Some((Broadcast::RightCol, sa.to_vec()));
    }
    None
}

fn bin_apply(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

fn bin_forward(kind: BinKind, a: &DTensor, b: &DTensor, bc: Broadcast) -> DTensor {
    let ad = a.data();
    let bd = b.data();
    let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
        Broadcast::Same => (
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(x, y)| bin_apply(kind, *x, *y)).collect(),
        ),
        Broadcast::LeftScalar => {
            let x = ad[0];
            (b.shape().to_vec(), bd.iter().map(|y| bin_apply(kind, x, *y)).collect())
        }
        Broadcast::RightScalar => {
            let y = bd[0];
            (a.shape().to_vec(), ad.iter().map(|x| bin_apply(kind, *x, y)).collect())
        }
        Broadcast::RightRow => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut d = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    d.push(bin_apply(kind, ad[i * n + j], bd[j]));
                }
            }
            (a.shape().to_vec(), d)
        }
        Broadcast::RightCol => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut d = Vec::with_capacity(m * n);
            for i in 0..m {
                let y = bd[i];
                for j in 0..n {
                    d.push(bin_apply(kind, ad[i * n + j], y));
                }
            }
            (a.shape().to_vec(), d)
        }
    };
    DTensor::from_parts(shape, data)
}

/// Reduce a full-shape gradient back to a broadcast operand's shape.
fn reduce_to(full: &[f64], full_shape: &[usize], target_numel: usize, bc: Broadcast, left: bool) -> Vec<f64> {
    let needs_reduce = match (bc, left) {
        (Broadcast::Same, _) => false,
        (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false) => true,
        (Broadcast::LeftScalar, false) | (Broadcast::RightScalar, true) => false,
        (Broadcast::RightRow, false) | (Broadcast::RightCol, false) => true,
        (Broadcast::RightRow, true) | (Broadcast::RightCol, true) => false,
    };
    if !needs_reduce {
        return full.to_vec();
    }
    if target_numel == 1 {
        return vec![full.iter().sum()];
    }
    let (m, n) = (full_shape[0], full_shape[1]);
    match bc {
        Broadcast::RightRow => {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += full[i * n + j];
                }
            }
            out
        }
        Broadcast::RightCol => {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = full[i * n..(i + 1) * n].iter().sum();
            }
            out
        }
        _ => unreachable!(),
    }
}

fn bin_backward(
    kind: BinKind,
    a: &DTensor,
    b: &DTensor,
    z: &DTensor,
    bc: Broadcast,
    dz: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = z.numel();
    let get_a = broadcast_getter(a, z.shape(), bc, true);
    let get_b = broadcast_getter(b, z.shape(), bc, false);
    let mut da_full = vec![0.0; n];
    let mut db_full = vec![0.0; n];
    for i in 0..n {
        let (pa, pb) = match kind {
            BinKind::Add => (1.0, 1.0),
            BinKind::Sub => (1.0, -1.0),
            BinKind::Mul => (get_b(i), get_a(i)),
            BinKind::Div => {
                let bv = get_b(i);
                (1.0 / bv, -z.data()[i] / bv)
            }
        };
        da_full[i] = dz[i] * pa;
        db_full[i] = dz[i] * pb;
    }
    let ga = reduce_to(&da_full, z.shape(), a.numel(), bc, true);
    let gb = reduce_to(&db_full, z.shape(), b.numel(), bc, false);
    (ga, gb)
}

/// Indexer mapping an output element to the corresponding operand element
/// under the broadcast rule.
fn broadcast_getter<'t>(t: &'t DTensor, out_shape: &[usize], bc: Broadcast, left: bool) -> Box<dyn Fn(usize) -> f64 + 't> {
    let d = t.data();
    let broadcasted = match (bc, left) {
        (Broadcast::Same, _) => false,
        (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false) => true,
        (Broadcast::LeftScalar, false) | (Broadcast::RightScalar, true) => false,
        (Broadcast::RightRow, l) | (Broadcast::RightCol, l) => !l,
    };
    if !broadcasted {
        return Box::new(move |i| d[i]);
    }
    if t.numel() == 1 {
        let x = d[0];
        return Box::new(move |_| x);
    }
    let n = out_shape[1];
    match bc {
        Broadcast::RightRow => Box::new(move |i| d[i % n]),
        Broadcast::RightCol => Box::new(move |i| d[i / n]),
        _ => unreachable!(),
    }
}

fn un_forward(kind: UnKind, a: &DTensor) -> DTensor {
    let f: fn(f64) -> f64 = match kind {
        UnKind::Sin => f64::sin,
        UnKind::Cos => f64::cos,
        UnKind::Exp => f64::exp,
        UnKind::Log => f64::ln,
        UnKind::Sqrt => f64::sqrt,
        UnKind::Recip => |x| 1.0 / x,
        UnKind::Abs => f64::abs,
    };
    DTensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

fn un_backward(kind: UnKind, a: &DTensor, z: &DTensor, dz: &[f64]) -> Vec<f64> {
    let ad = a.data();
    let zd = z.data();
    (0..ad.len())
        .map(|i| {
            let d = match kind {
                UnKind::Sin => ad[i].cos(),
                UnKind::Cos => -ad[i].sin(),
                UnKind::Exp => zd[i],
                UnKind::Log => 1.0 / ad[i],
                UnKind::Sqrt => 0.5 / zd[i],
                UnKind::Recip => -zd[i] * zd[i],
                UnKind::Abs => {
                    if ad[i] > 0.0 {
                        1.0
                    } else if ad[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            };
            dz[i] * d
        })
        .collect()
}

/// Eager matmul/matvec sharing the tape's kernel, so eager evaluation paths
/// (scene rendering) match tape forward bit-for-bit.
pub fn matmul_eager(a: &DTensor, b: &DTensor) -> DTensor {
    matmul_forward(a, b)
}

fn matmul_forward(a: &DTensor, b: &DTensor) -> DTensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let av = ArrayView2::from_shape((m, k), a.data()).unwrap();
    if b.shape().len() == 2 {
        let n = b.shape()[1];
        let bv = ArrayView2::from_shape((k, n), b.data()).unwrap();
        let mut out = vec![0.0; m * n];
        {
            let mut ov = ArrayViewMut2::from_shape((m, n), out.as_mut_slice()).unwrap();
            general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
        }
        DTensor::from_parts(vec![m, n], out)
    } else {
        let bv = ArrayView1::from_shape(k, b.data()).unwrap();
        let mut out = vec![0.0; m];
        {
            let mut ov = ArrayViewMut1::from_shape(m, out.as_mut_slice()).unwrap();
            general_mat_vec_mul(1.0, &av, &bv, 0.0, &mut ov);
        }
        DTensor::from_parts(vec![m], out)
    }
}

fn matmul_backward(a: &DTensor, b: &DTensor, dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let av = ArrayView2::from_shape((m, k), a.data()).unwrap();
    if b.shape().len() == 2 {
        let n = b.shape()[1];
        let bv = ArrayView2::from_shape((k, n), b.data()).unwrap();
        let dzv = ArrayView2::from_shape((m, n), dz).unwrap();
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        {
            let mut gav = ArrayViewMut2::from_shape((m, k), ga.as_mut_slice()).unwrap();
            general_mat_mul(1.0, &dzv, &bv.t(), 0.0, &mut gav);
            let mut gbv = ArrayViewMut2::from_shape((k, n), gb.as_mut_slice()).unwrap();
            general_mat_mul(1.0, &av.t(), &dzv, 0.0, &mut gbv);
        }
        (ga, gb)
    } else {
        // z = A·b, dz is [m]: dA = dz ⊗ b, db = Aᵀ·dz.
        let bd = b.data();
        let mut ga = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                ga[i * k + j] = dz[i] * bd[j];
            }
        }
        let mut gb = vec![0.0; k];
        {
            let dzv = ArrayView1::from_shape(m, dz).unwrap();
            let mut gbv = ArrayViewMut1::from_shape(k, gb.as_mut_slice()).unwrap();
            general_mat_vec_mul(1.0, &av.t(), &dzv, 0.0, &mut gbv);
        }
        (ga, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> DTensor {
        DTensor::from_vec(data.to_vec())
    }

    #[test]
    fn identity_graph() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        tape.mark_output(x);
        let out = tape.forward(&[DTensor::scalar(5.0)]).unwrap();
        assert_eq!(out[0].item(), 5.0);
    }

    #[test]
    fn sin_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        let y = tape.sin(x);
        tape.mark_output(y);
        let out = tape.forward(&[DTensor::scalar(0.0)]).unwrap();
        assert_eq!(out[0].item(), 0.0);
    }

    #[test]
    fn affine_graph() {
        // y = Wx + b with W=[[2]], b=[1], x=[3] -> 7
        let mut tape = Tape::new();
        let w = tape.input(vec![1, 1]);
        let x = tape.input(vec![1]);
        let b = tape.input(vec![1]);
        let wx = tape.matmul(w, x);
        let y = tape.add(wx, b);
        tape.mark_output(y);
        let wv = DTensor::from_parts(vec![1, 1], vec![2.0]);
        let out = tape.forward(&[wv, t1(&[3.0]), t1(&[1.0])]).unwrap();
        assert_eq!(out[0].item(), 7.0);
    }

    #[test]
    fn square_gradient() {
        // y = x^2 at x=3, adjoint 1 -> grad 6
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        let y = tape.mul(x, x);
        tape.mark_output(y);
        tape.forward(&[DTensor::scalar(3.0)]).unwrap();
        let g = tape.backward(&[DTensor::scalar(1.0)]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn constant_graph_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        let c = tape.constant_scalar(4.0);
        tape.mark_output(c);
        let _ = x;
        tape.forward(&[DTensor::scalar(2.0)]).unwrap();
        let g = tape.backward(&[DTensor::scalar(1.0)]).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn product_rule() {
        // y = sin(x)·x at x = 1.2 -> grad = sin(1.2) + 1.2·cos(1.2)
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        let s = tape.sin(x);
        let y = tape.mul(s, x);
        tape.mark_output(y);
        tape.forward(&[DTensor::scalar(1.2)]).unwrap();
        let g = tape.backward(&[DTensor::scalar(1.0)]).unwrap();
        let expect = 1.2f64.sin() + 1.2 * 1.2f64.cos();
        assert!((g[0].item() - expect).abs() < 1e-14);
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1]);
        tape.mark_output(x);
        assert!(matches!(
            tape.backward(&[DTensor::scalar(1.0)]),
            Err(TapeError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn forward_rejects_shape_and_nonfinite() {
        let mut tape = Tape::new();
        let x = tape.input(vec![2]);
        tape.mark_output(x);
        assert!(matches!(
            tape.forward(&[DTensor::scalar(1.0)]),
            Err(TapeError::ShapeMismatch(_))
        ));
        let bad = DTensor::from_parts(vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(tape.forward(&[bad]), Err(TapeError::NonFinite(_))));
    }

    #[test]
    fn forward_bitwise_deterministic() {
        let mut tape = Tape::new();
        let x = tape.input(vec![3]);
        let s = tape.sin(x);
        let e = tape.exp(s);
        let m = tape.mean(e);
        tape.mark_output(m);
        let input = t1(&[0.3, -1.7, 2.9]);
        let a = tape.forward(&[input.clone()]).unwrap()[0].item();
        let b = tape.forward(&[input]).unwrap()[0].item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn row_broadcast_add_and_reduce() {
        // z = A + bias, dz all ones -> dbias = column counts
        let mut tape = Tape::new();
        let a = tape.input(vec![2, 3]);
        let b = tape.input(vec![3]);
        let z = tape.add(a, b);
        tape.mark_output(z);
        let av = DTensor::from_parts(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        tape.forward(&[av, t1(&[10., 20., 30.])]).unwrap();
        let ones = DTensor::from_parts(vec![2, 3], vec![1.0; 6]);
        let g = tape.backward(&[ones]).unwrap();
        assert_eq!(g[1].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn col_broadcast_mul() {
        let mut tape = Tape::new();
        let a = tape.input(vec![2, 2]);
        let c = tape.input(vec![2, 1]);
        let z = tape.mul(a, c);
        tape.mark_output(z);
        let av = DTensor::from_parts(vec![2, 2], vec![1., 2., 3., 4.]);
        let cv = DTensor::from_parts(vec![2, 1], vec![10., 100.]);
        let out = tape.forward(&[av, cv]).unwrap();
        assert_eq!(out[0].data(), &[10., 20., 300., 400.]);
        let ones = DTensor::from_parts(vec![2, 2], vec![1.0; 4]);
        let g = tape.backward(&[ones]).unwrap();
        assert_eq!(g[1].data(), &[3.0, 7.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let mut tape = Tape::new();
        let x = tape.input(vec![3]);
        let y = tape.abs(x);
        let s = tape.sum(y);
        tape.mark_output(s);
        tape.forward(&[t1(&[-2.0, 0.0, 2.0])]).unwrap();
        let g = tape.backward(&[DTensor::scalar(1.0)]).unwrap();
        assert_eq!(g[0].data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_manual() {
        // y = sum(A·B); dA = 1·Bᵀ rows, dB = Aᵀ·1
        let mut tape = Tape::new();
        let a = tape.input(vec![2, 2]);
        let b = tape.input(vec![2, 2]);
        let z = tape.matmul(a, b);
        let s = tape.sum(z);
        tape.mark_output(s);
        let av = DTensor::from_parts(vec![2, 2], vec![1., 2., 3., 4.]);
        let bv = DTensor::from_parts(vec![2, 2], vec![5., 6., 7., 8.]);
        tape.forward(&[av, bv]).unwrap();
        let g = tape.backward(&[DTensor::scalar(1.0)]).unwrap();
        assert_eq!(g[0].data(), &[11., 15., 11., 15.]);
        assert_eq!(g[1].data(), &[4., 4., 6., 6.]);
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let a = tape.input(vec![2, 3]);
        let left = tape.slice_cols(a, 0, 1);
        let right = tape.slice_cols(a, 1, 2);
        let back = tape.concat_cols(&[left, right]);
        tape.mark_output(back);
        let av = DTensor::from_parts(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let out = tape.forward(&[av.clone()]).unwrap();
        assert_eq!(out[0].data(), av.data());
        let dz = DTensor::from_parts(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let g = tape.backward(&[dz]).unwrap();
        assert_eq!(g[0].data(), &[1., 2., 3., 4., 5., 6.]);
    }
}
