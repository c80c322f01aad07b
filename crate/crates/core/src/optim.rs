//! Adam and the cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// First/second moment estimates for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Float = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> AdamState<F> {
    /// Zeroed moments for parameters of the given shapes, with
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec())))
            .unzip();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update of every parameter. `step` advances by
    /// exactly one per call.
    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::domain(format!("learning rate must be positive, got {lr}")));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(format!(
                    "adam: parameter {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(t));
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (eps, lr) = (F::from_f64(self.eps), F::from_f64(lr));
        let one = F::one();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` to `lr_min` over `horizon` iterations,
/// held at `lr_min` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub horizon: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-5,
            lr_min: 1e-7,
            horizon: 10_000,
        }
    }
}

impl CosineSchedule {
    pub fn lr(&self, iteration: u64) -> f64 {
        if iteration >= self.horizon {
            return self.lr_min;
        }
        let frac = iteration as f64 / self.horizon as f64;
        // Written as a decrement from lr_max so t = 0 yields lr_max exactly.
        self.lr_max - 0.5 * (self.lr_max - self.lr_min) * (1.0 - (std::f64::consts::PI * frac).cos())
    }
}

pub fn cosine_lr(iteration: u64, sched: &CosineSchedule) -> f64 {
    sched.lr(iteration)
}
