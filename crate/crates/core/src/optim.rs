// RMSProp without momentum:
//   v     <- rho * v + (1 - rho) * g^2
//   theta <- theta - lr * g / (sqrt(v) + eps)

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Running average of squared gradients, one entry per parameter tensor.
    /// Empty until the first step fixes the parameter layout.
    v: Vec<Matrix>,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
            v: Vec::new(),
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn squared_averages(&self) -> &[Matrix] {
        &self.v
    }

    /// Applies one update to `params` using their accumulated gradients.
    ///
    /// The same parameter list, in the same order, must be passed on every
    /// call.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "invalid RMSProp hyperparameters lr={} decay={} eps={}",
                self.lr, self.decay, self.eps
            )));
        }
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.v.is_empty() {
            self.v = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        if self.v.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors but step received {}",
                self.v.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(&self.v) {
            if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "rmsprop step",
                    left: p.value.shape(),
                    right: v.shape(),
                });
            }
            if !p.grad.is_finite() {
                return Err(Error::Contract("non-finite gradient".into()));
            }
        }
        for (p, v) in params.into_iter().zip(&mut self.v) {
            let Tensor { value, grad } = p;
            for ((theta, &g), s) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut())
            {
                *s = self.decay * *s + (1.0 - self.decay) * g * g;
                *theta -= self.lr * g / (s.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn zero_grad<'a, I>(params: I)
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    params.into_iter().for_each(Tensor::zero_grad);
}

/// Minibatch schedule shared by both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement of the selection score before stopping.
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A fresh permutation of `0..n` cut into batches of `batch_size` (the last
/// one may be shorter).
pub fn shuffled_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
