//! Layer primitives shared by every network component: affine layers with
//! Xavier-uniform init, batch norm with tracked running statistics, and
//! phase-aware dropout.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BnStats, Tape, Tensor};
use crate::error::Result;

/// Forward phase. Train uses batch statistics and live dropout masks; eval
/// uses running statistics and passes activations through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Xavier-uniform weights: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weight `[in_dim, out_dim]`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let w = xavier_uniform(in_dim, out_dim, rng);
        Linear {
            weight: Tensor::new(vec![in_dim, out_dim], w, true).expect("init shape"),
            bias: Tensor::zeros(vec![out_dim], true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(x, &self.weight)?;
        tape.add_row(&h, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Debug, Clone)]
struct Running {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Batch normalization layer. `gamma`/`beta` are trained parameters; the
/// running mean/variance are buffers updated only when a train-mode forward
/// asks for it, so a frozen component can be run through without drift.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
    running: RefCell<Running>,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::new(vec![dim], vec![1.0; dim], true).expect("init shape"),
            beta: Tensor::zeros(vec![dim], true),
            eps: 1e-5,
            momentum,
            running: RefCell::new(Running { mean: vec![0.0; dim], var: vec![1.0; dim] }),
        }
    }

    /// `update_stats` only matters in train phase: batch statistics always
    /// normalize, but the running buffers move only when requested.
    /// Running variance uses the unbiased estimate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        phase: Phase,
        update_stats: bool,
    ) -> Result<Tensor> {
        match phase {
            Phase::Train => {
                let n = self.gamma.numel();
                let mut mean = vec![0.0; n];
                let mut var = vec![0.0; n];
                let y = tape.batch_norm(
                    x,
                    &self.gamma,
                    &self.beta,
                    self.eps,
                    BnStats::Batch { out_mean: &mut mean, out_var: &mut var },
                )?;
                if update_stats {
                    let m = x.shape()[0] as f64;
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    let mut run = self.running.borrow_mut();
                    for j in 0..n {
                        run.mean[j] = (1.0 - self.momentum) * run.mean[j] + self.momentum * mean[j];
                        run.var[j] = (1.0 - self.momentum) * run.var[j] + self.momentum * var[j] * unbias;
                    }
                }
                Ok(y)
            }
            Phase::Eval => {
                let run = self.running.borrow();
                tape.batch_norm(
                    x,
                    &self.gamma,
                    &self.beta,
                    self.eps,
                    BnStats::Running { mean: &run.mean, var: &run.var },
                )
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let run = self.running.borrow();
        (run.mean.clone(), run.var.clone())
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) {
        let mut run = self.running.borrow_mut();
        assert_eq!(run.mean.len(), mean.len(), "running stats length");
        run.mean = mean;
        run.var = var;
    }
}

/// Phase-aware dropout. Eval is the identity and records nothing.
pub fn dropout(
    tape: &mut Tape,
    x: &Tensor,
    p: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match phase {
        Phase::Train => tape.dropout(x, p, rng),
        Phase::Eval => Ok(x.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_init_is_bounded_xavier_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(10, 20, &mut rng);
        let a = (6.0 / 30.0f64).sqrt();
        assert!(l.weight.to_vec().iter().all(|w| w.abs() < a));
        assert!(l.bias.to_vec().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn linear_forward_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Linear::new(2, 2, &mut rng);
        l.weight.set_data(&[1.0, 2.0, 3.0, 4.0]);
        l.bias.set_data(&[10.0, 20.0]);
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0], false).unwrap();
        let y = l.forward(&mut tape, &x).unwrap();
        assert_eq!(y.to_vec(), vec![14.0, 26.0]);
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm::new(1, 0.1);
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0], false).unwrap();
        bn.forward(&mut tape, &x, Phase::Train, true).unwrap();
        let (mean, var) = bn.running_stats();
        // batch mean 2, biased var 1, unbiased var 2
        assert!((mean[0] - 0.1 * 2.0).abs() < 1e-12);
        assert!((var[0] - (0.9 * 1.0 + 0.1 * 2.0)).abs() < 1e-12);

        // Frozen pass leaves buffers alone.
        let mut tape2 = Tape::new();
        let x2 = Tensor::new(vec![2, 1], vec![100.0, 200.0], false).unwrap();
        bn.forward(&mut tape2, &x2, Phase::Train, false).unwrap();
        assert_eq!(bn.running_stats().0, mean);
        let _ = rng.gen::<u64>();
    }

    #[test]
    fn eval_uses_running_stats() {
        let bn = BatchNorm::new(1, 0.1);
        bn.set_running_stats(vec![2.0], vec![4.0]);
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 1], vec![4.0], false).unwrap();
        let y = bn.forward(&mut tape, &x, Phase::Eval, false).unwrap();
        // (4 - 2) / sqrt(4 + eps) with gamma 1 beta 0
        assert!((y.item() - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0], false).unwrap();
        let y = dropout(&mut tape, &x, 0.9, Phase::Eval, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(tape.is_empty());
    }
}
