//! Adam with bias correction, one state per parameter group.

use crate::diffmath::DTensor;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("non-finite gradient in parameter {param_index} (element {element})")]
pub struct NonFiniteGrad {
    pub param_index: usize,
    pub element: usize,
}

/// First/second moment accumulators mirroring a parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<DTensor>,
    pub v: Vec<DTensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &[DTensor], lr: f64) -> AdamState {
        AdamState {
            t: 0,
            m: params.iter().map(|p| DTensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| DTensor::zeros(p.shape().to_vec())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One Adam update over a parameter group. On a non-finite gradient nothing
/// is mutated (step count included) and the offending index is reported.
pub fn adam_step(state: &mut AdamState, params: &mut [DTensor], grads: &[DTensor]) -> Result<(), NonFiniteGrad> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "state does not mirror parameters");
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "shape mismatch in parameter {i}");
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(NonFiniteGrad { param_index: i, element: j });
        }
    }

    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m_old = state.m[i].data();
        let v_old = state.v[i].data();
        let p_old = params[i].data();
        let n = g.len();
        let mut m_new = Vec::with_capacity(n);
        let mut v_new = Vec::with_capacity(n);
        let mut p_new = Vec::with_capacity(n);
        for j in 0..n {
            let m = state.beta1 * m_old[j] + (1.0 - state.beta1) * g[j];
            let v = state.beta2 * v_old[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            m_new.push(m);
            v_new.push(v);
            p_new.push(p_old[j] - state.lr * m_hat / (v_hat.sqrt() + state.eps));
        }
        let shape = params[i].shape().to_vec();
        state.m[i] = DTensor::new(shape.clone(), m_new).expect("finite moment");
        state.v[i] = DTensor::new(shape.clone(), v_new).expect("finite moment");
        params[i] = DTensor::new(shape, p_new).expect("finite parameters");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_increments_t() {
        let mut params = vec![DTensor::from_vec(vec![1.0, -2.0])];
        let grads = vec![DTensor::zeros(vec![2])];
        let mut st = AdamState::new(&params, 0.1);
        adam_step(&mut st, &mut params, &grads).unwrap();
        assert_eq!(st.t, 1);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude() {
        // lr=0.1, g=4: bias-corrected update ≈ lr·g/(|g| + eps) ≈ 0.1.
        let mut params = vec![DTensor::from_vec(vec![0.0])];
        let grads = vec![DTensor::from_vec(vec![4.0])];
        let mut st = AdamState::new(&params, 0.1);
        adam_step(&mut st, &mut params, &grads).unwrap();
        let delta = -params[0].data()[0];
        let expect = 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((delta - expect).abs() < 1e-12, "{delta} vs {expect}");
    }

    #[test]
    fn update_opposes_gradient_sign() {
        let mut params = vec![DTensor::from_vec(vec![0.5, 0.5])];
        let grads = vec![DTensor::from_vec(vec![3.0, -0.7])];
        let mut st = AdamState::new(&params, 0.01);
        adam_step(&mut st, &mut params, &grads).unwrap();
        assert!(params[0].data()[0] < 0.5);
        assert!(params[0].data()[1] > 0.5);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = vec![DTensor::from_vec(vec![1.0])];
        let grads = vec![DTensor::from_parts(vec![1], vec![f64::NAN])];
        let mut st = AdamState::new(&params, 0.1);
        let err = adam_step(&mut st, &mut params, &grads).unwrap_err();
        assert_eq!(err.param_index, 0);
        assert_eq!(st.t, 0);
        assert_eq!(params[0].data(), &[1.0]);
    }
}
