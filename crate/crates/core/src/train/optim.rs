use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Real;

pub const MOMENTUM: f64 = 0.9;
/// Weight decay for MNIST and CIFAR.
pub const WEIGHT_DECAY: f64 = 0.0005;
/// Weight decay for large datasets.
pub const WEIGHT_DECAY_LARGE: f64 = 0.0001;

/// Momentum buffers, one per learnable tensor in registry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub buffers: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            lr: 0.0,
            buffers: Vec::new(),
        }
    }
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v` on one tensor.
pub fn sgd_update<T: Real>(w: &mut [T], g: Option<&[T]>, v: &mut [T], lr: f64, momentum: f64, decay: f64) {
    let (lr, mu, lambda) = (T::cast(lr), T::cast(momentum), T::cast(decay));
    match g {
        Some(g) => {
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + (g + lambda * *w);
                *w -= lr * *v;
            }
        }
        None => {
            for (w, v) in w.iter_mut().zip(v.iter_mut()) {
                *v = mu * *v + lambda * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// One momentum step over every parameter at `opt.lr`. A parameter without a
/// gradient is treated as having a zero gradient.
pub fn sgd_momentum_step<T: Real>(params: &mut [Param<'_, T>], opt: &mut OptimizerState<T>) -> Result<()> {
    if opt.buffers.is_empty() {
        opt.buffers = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
    }
    if opt.buffers.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer has {} buffers for {} parameters",
            opt.buffers.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(&mut opt.buffers) {
        if v.len() != p.value.len() || p.grad.is_some_and(|g| g.len() != p.value.len()) {
            return Err(Error::shape(format!(
                "parameter `{}` does not match its buffers",
                p.name
            )));
        }
        sgd_update(p.value, p.grad, v, opt.lr, opt.momentum, opt.weight_decay);
    }
    Ok(())
}
