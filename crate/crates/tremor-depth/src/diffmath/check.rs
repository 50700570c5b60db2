//! Finite-difference verification of tape gradients.
//!
//! The harness is the independent oracle for every backward rule: it never
//! looks at adjoints, only re-runs `forward` at perturbed inputs and compares
//! central differences against the analytic gradient. It reports and never
//! mutates the graph or the caller's tensors.

use crate::rng::{stream, CounterRng};

use super::tensor::DTensor;
use super::{NodeId, Tape, TapeError};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative discrepancy across all probed coordinates.
    pub max_rel_err: f64,
    /// (input slot, element index) of the worst probe.
    pub worst: (usize, usize),
    /// Number of coordinates probed.
    pub probes: usize,
    /// Nodes whose forward value sat on a kink (clamp bound, |0|, or a
    /// bilinear cell boundary) at the evaluation point. Gradients at such
    /// points are one-sided; finite differences there are not trustworthy.
    pub kinks: Vec<NodeId>,
}

impl GradCheckReport {
    pub fn has_kinks(&self) -> bool {
        !self.kinks.is_empty()
    }
}

fn scalar_objective(tape: &mut Tape, point: &[DTensor]) -> Result<f64, TapeError> {
    let outs = tape.forward(point)?;
    Ok(outs.iter().map(|t| t.data().iter().sum::<f64>()).sum())
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn run(
    tape: &mut Tape,
    point: &[DTensor],
    eps: f64,
    probe_filter: Option<(usize, u64)>,
) -> Result<GradCheckReport, TapeError> {
    tape.forward(point)?;
    let kinks = tape.kink_nodes(eps);
    let ones: Vec<DTensor> = tape
        .outputs()
        .to_vec()
        .iter()
        .map(|&id| {
            let shape = tape.node_shape(id).to_vec();
            let n = shape.iter().product();
            DTensor::from_parts(shape, vec![1.0; n])
        })
        .collect();
    let analytic = tape.backward(&ones)?;

    // Enumerate probe coordinates, optionally subsampled.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (slot, t) in point.iter().enumerate() {
        for j in 0..t.numel() {
            coords.push((slot, j));
        }
    }
    if let Some((max_probes, seed)) = probe_filter {
        if coords.len() > max_probes {
            let mut rng = CounterRng::new(seed, stream::GRAD_PROBE);
            let mut picked = Vec::with_capacity(max_probes);
            for _ in 0..max_probes {
                picked.push(coords.swap_remove(rng.uniform_usize(coords.len())));
            }
            coords = picked;
        }
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), probes: coords.len(), kinks };
    let mut work: Vec<DTensor> = point.to_vec();
    for (slot, j) in coords {
        work[slot] = point[slot].with_nudge(j, eps);
        let lp = scalar_objective(tape, &work)?;
        work[slot] = point[slot].with_nudge(j, -eps);
        let lm = scalar_objective(tape, &work)?;
        work[slot] = point[slot].clone();
        let fd = (lp - lm) / (2.0 * eps);
        let err = relative_error(analytic[slot].data()[j], fd);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (slot, j);
        }
    }
    // Leave the tape holding values for the unperturbed point.
    tape.forward(point)?;
    Ok(report)
}

/// Check every input coordinate against central finite differences with step
/// `eps`. Returns the worst relative discrepancy (floor 1e-6 on the
/// denominator so near-zero gradients compare absolutely).
pub fn grad_check(tape: &mut Tape, point: &[DTensor], eps: f64) -> Result<GradCheckReport, TapeError> {
    run(tape, point, eps, None)
}

/// Like [`grad_check`] but probes at most `max_probes` randomly chosen input
/// coordinates — the affordable variant for graphs with many parameters.
pub fn grad_check_sampled(
    tape: &mut Tape,
    point: &[DTensor],
    eps: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport, TapeError> {
    run(tape, point, eps, Some((max_probes, seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_near_exact() {
        let mut tape = Tape::new();
        let w = tape.input(vec![2, 3]);
        let x = tape.input(vec![3]);
        let y = tape.matmul(w, x);
        let s = tape.sum(y);
        tape.mark_output(s);
        let wv = DTensor::from_parts(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]);
        let xv = DTensor::from_vec(vec![1.5, -0.2, 0.8]);
        let rep = grad_check(&mut tape, &[wv, xv], 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
        assert!(!rep.has_kinks());
    }

    #[test]
    fn composite_graph_within_tolerance() {
        // mean(exp(sin(x)) / (1 + x^2)) over a small vector
        let mut tape = Tape::new();
        let x = tape.input(vec![5]);
        let s = tape.sin(x);
        let e = tape.exp(s);
        let x2 = tape.mul(x, x);
        let one = tape.constant_scalar(1.0);
        let denom = tape.add(x2, one);
        let q = tape.div(e, denom);
        let m = tape.mean(q);
        tape.mark_output(m);
        let xv = DTensor::from_vec(vec![0.3, -0.7, 1.9, 0.05, -1.4]);
        let rep = grad_check(&mut tape, &[xv], 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{}", rep.max_rel_err);
    }

    #[test]
    fn clamp_kink_is_flagged() {
        let mut tape = Tape::new();
        let x = tape.input(vec![2]);
        let c = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum(c);
        tape.mark_output(s);
        // One value exactly on the clamp bound.
        let rep = grad_check(&mut tape, &[DTensor::from_vec(vec![1.0, 0.4])], 1e-6).unwrap();
        assert!(rep.has_kinks());
        // Away from the bounds: clean.
        let rep = grad_check(&mut tape, &[DTensor::from_vec(vec![0.6, 0.4])], 1e-6).unwrap();
        assert!(!rep.has_kinks());
        assert!(rep.max_rel_err < 1e-9);
    }

    #[test]
    fn bilinear_coord_gradient_checks() {
        let mut tape = Tape::new();
        let mut img_data = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                img_data.push((x as f64 * 0.37).sin() + (y as f64 * 0.61).cos());
            }
        }
        let img = tape.constant(DTensor::from_parts(vec![5, 5, 1], img_data));
        let co = tape.input(vec![3, 2]);
        let v = tape.bilinear_sample(img, co);
        let s = tape.sum(v);
        tape.mark_output(s);
        let pts = DTensor::from_parts(vec![3, 2], vec![1.3, 2.6, 0.4, 0.9, 3.2, 1.7]);
        let rep = grad_check(&mut tape, &[pts], 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-7, "{}", rep.max_rel_err);
        assert!(!rep.has_kinks());
    }

    #[test]
    fn sampled_probe_subset() {
        let mut tape = Tape::new();
        let x = tape.input(vec![100]);
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        tape.mark_output(s);
        let xv = DTensor::from_vec((0..100).map(|i| 0.01 * i as f64 - 0.3).collect());
        let rep = grad_check_sampled(&mut tape, &[xv], 1e-5, 10, 42).unwrap();
        assert_eq!(rep.probes, 10);
        assert!(rep.max_rel_err < 1e-8);
    }
}
