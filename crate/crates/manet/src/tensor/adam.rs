//! Adam with bias correction. One `AdamState` tracks one parameter tensor;
//! the `Adam` bundle steps a whole parameter group and is the unit the
//! trainer's two-optimizer scheme is built from.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> AdamState {
        AdamState {
            step_count: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("lengths differ: params {}, grads {}, state {}", params.len(), grads.len(), st.m.len()),
        ));
    }
    st.step_count += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step_count as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step_count as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        params[i] -= st.learning_rate * m_hat / (v_hat.sqrt() + st.epsilon);
    }
    Ok(())
}

/// Optimizer over a fixed parameter group. A missing gradient counts as
/// zero, so untouched parameters still advance their moment estimates in
/// lockstep with the rest of the group.
pub struct Adam {
    params: Vec<Tensor>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, learning_rate: f64) -> Adam {
        let states = params.iter().map(|p| AdamState::new(p.numel(), learning_rate)).collect();
        Adam { params, states }
    }

    pub fn step(&mut self) -> Result<()> {
        for (p, st) in self.params.iter().zip(&mut self.states) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut data = p.to_vec();
            adam_step(&mut data, &grad, st)?;
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line reference Adam, kept deliberately independent of the
    /// implementation above.
    struct RefAdam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    }

    impl RefAdam {
        fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
            self.t += 1;
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            for i in 0..params.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
                let mh = self.m[i] / (1.0 - b1.powi(self.t as i32));
                let vh = self.v[i] / (1.0 - b2.powi(self.t as i32));
                params[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // From zero state, m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps) which is lr * sign(g) up to eps.
        let lr = 1e-4;
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![3.0, -0.7, 1e-3];
        let mut st = AdamState::new(3, lr);
        adam_step(&mut params, &grads, &mut st).unwrap();
        let expect = [1.0 - lr, -2.0 + lr, 0.5 - lr];
        for (p, e) in params.iter().zip(expect) {
            assert!((p - e).abs() < 1e-9, "{p} vs {e}");
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, 2.0];
        let mut st = AdamState::new(2, 1e-4);
        adam_step(&mut params, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn hundred_steps_match_reference_to_1e12() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 16;
        let lr = 1e-3;
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ref_params = params.clone();
        let mut st = AdamState::new(n, lr);
        let mut reference = RefAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
        for _ in 0..100 {
            let grads: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            adam_step(&mut params, &grads, &mut st).unwrap();
            reference.step(&mut ref_params, &grads, lr);
        }
        for (a, b) in params.iter().zip(&ref_params) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn optimizer_steps_tensor_group() {
        let p = Tensor::new(vec![2], vec![1.0, 1.0], true).unwrap();
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        p.accumulate_grad(&[1.0, -1.0]);
        opt.step().unwrap();
        let v = p.to_vec();
        assert!(v[0] < 1.0 && v[1] > 1.0);
        // Missing grad counts as zero: moments decay, params drift toward
        // the old direction but stay finite.
        opt.zero_grads();
        opt.step().unwrap();
        assert!(p.to_vec().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn length_mismatch_errors() {
        let mut params = vec![0.0; 2];
        let mut st = AdamState::new(3, 1e-4);
        assert!(adam_step(&mut params, &[0.0, 0.0], &mut st).is_err());
    }
}
