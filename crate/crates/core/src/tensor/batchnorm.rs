use alloc::vec;
use alloc::vec::Vec;

use super::Tensor4;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training mode normalizes by the batch statistics; evaluation mode by the running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Statistics a forward pass normalized with.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mode: NormMode,
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average of the batch statistics of a training pass.
    /// Evaluation-mode stats are ignored.
    pub fn update_running(&mut self, stats: &BatchNormStats) {
        if stats.mode != NormMode::Train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
        }
    }
}

fn check(op: &'static str, input: &Tensor4, bn: &BatchNorm) -> Result<()> {
    let c = bn.channels();
    if input.shape().c != c || bn.beta.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
        return Err(Error::shape(
            op,
            alloc::format!("input has {} channels, batch norm has {c}", input.shape().c),
        ));
    }
    Ok(())
}

pub fn batchnorm_forward(input: &Tensor4, bn: &BatchNorm, mode: NormMode) -> Result<(Tensor4, BatchNormStats)> {
    check("batchnorm_forward", input, bn)?;
    let s = input.shape();
    let count = (s.n * s.plane()) as f64;
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let sum: f64 = (0..s.n).map(|n| input.plane(n, c).iter().sum::<f64>()).sum();
                let mu = sum / count;
                let sq: f64 = (0..s.n)
                    .map(|n| input.plane(n, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                    .sum();
                mean[c] = mu;
                var[c] = sq / count;
            }
            (mean, var)
        }
        NormMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + bn.eps)).collect();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
            for (o, &x) in out.plane_mut(n, c).iter_mut().zip(input.plane(n, c)) {
                *o = g * ((x - mu) * is) + b;
            }
        }
    }
    Ok((out, BatchNormStats { mode, mean, var, inv_std }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    input: &Tensor4,
    bn: &BatchNorm,
    stats: &BatchNormStats,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    check("batchnorm_backward", input, bn)?;
    grad_out.expect_shape("batchnorm_backward", input.shape())?;
    let s = input.shape();
    if stats.mean.len() != s.c {
        return Err(Error::shape("batchnorm_backward", "statistics do not match channel count"));
    }
    let count = (s.n * s.plane()) as f64;
    let mut grad_input = Tensor4::zeros(s);
    let mut grad_gamma = vec![0.0; s.c];
    let mut grad_beta = vec![0.0; s.c];
    for c in 0..s.c {
        let (mu, is) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..s.n {
            for (&x, &dy) in input.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                sum_dy += dy;
                sum_dy_xhat += dy * (x - mu) * is;
            }
        }
        grad_gamma[c] = sum_dy_xhat;
        grad_beta[c] = sum_dy;
        let g = bn.gamma[c];
        for n in 0..s.n {
            let gin = grad_input.plane_mut(n, c);
            for ((o, &x), &dy) in gin.iter_mut().zip(input.plane(n, c)).zip(grad_out.plane(n, c)) {
                *o = match stats.mode {
                    NormMode::Train => {
                        let xhat = (x - mu) * is;
                        g * is * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                    }
                    NormMode::Eval => g * is * dy,
                };
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
