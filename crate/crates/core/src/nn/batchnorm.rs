//! Spatial batch normalization with an optionally frozen affine.
//!
//! A frozen layer keeps `gamma = 1`, `beta = 0` for its whole life and
//! exposes no parameters to the optimizer; only its moments adapt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_EMA_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch moments, update running moments, keep a cache
    /// for the backward pass.
    Train,
    /// Normalize with batch moments and add them to the moment accumulator;
    /// running moments and caches are left alone.
    Calibrate,
    /// Normalize with the stored inference moments.
    Infer,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug, Default)]
struct MomentSums {
    mean: Vec<f64>,
    var: Vec<f64>,
    batches: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    channels: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
    learn_affine: bool,
    epsilon: f64,
    ema_decay: f64,
    grad_gamma: Option<Vec<T>>,
    grad_beta: Option<Vec<T>>,
    cache: Option<BnCache<T>>,
    sums: Option<MomentSums>,
}

/// Per-channel mean and biased variance over `N·H·W`, accumulated in f64.
pub fn channel_moments<T: Real>(x: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let (c, hw) = (x.c(), x.plane_len());
    let m = (x.n() * hw) as f64;
    let mut mean = vec![0.0; c];
    for n in 0..x.n() {
        for (ch, acc) in mean.iter_mut().enumerate() {
            *acc += x.plane(n, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for n in 0..x.n() {
        for (ch, acc) in var.iter_mut().enumerate() {
            let mu = mean[ch];
            *acc += x.plane(n, ch).iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, learn_affine: bool) -> Self {
        Self {
            channels,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            learn_affine,
            epsilon: DEFAULT_EPSILON,
            ema_decay: DEFAULT_EMA_DECAY,
            grad_gamma: None,
            grad_beta: None,
            cache: None,
            sums: None,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_ema_decay(mut self, decay: f64) -> Self {
        self.ema_decay = decay;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn learn_affine(&self) -> bool {
        self.learn_affine
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn beta(&self) -> &[T] {
        &self.beta
    }

    /// Overwrites the affine. Only meaningful for learned layers; a frozen
    /// layer rejects anything other than the identity affine.
    pub fn set_affine(&mut self, gamma: Vec<T>, beta: Vec<T>) -> Result<()> {
        if gamma.len() != self.channels || beta.len() != self.channels {
            return Err(Error::shape("affine length does not match channel count"));
        }
        if !self.learn_affine && (gamma.iter().any(|&g| g != T::one()) || beta.iter().any(|&b| b != T::zero())) {
            return Err(Error::Usage("frozen batch-norm affine must stay (1, 0)".into()));
        }
        self.gamma = gamma;
        self.beta = beta;
        Ok(())
    }

    pub fn set_moments(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::shape("moment length does not match channel count"));
        }
        if var.iter().any(|&v| v < T::zero()) {
            return Err(Error::arg("variance must be non-negative"));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Parameter gradients from the last backward pass; `None` for frozen layers.
    pub fn affine_grads(&self) -> Option<(&[T], &[T])> {
        match (&self.grad_gamma, &self.grad_beta) {
            (Some(g), Some(b)) => Some((g, b)),
            _ => None,
        }
    }

    /// `(gamma, beta, dgamma, dbeta)` for the optimizer. `None` when frozen.
    #[allow(clippy::type_complexity)]
    pub(crate) fn affine_params_mut(&mut self) -> Option<(&mut [T], &mut [T], Option<&[T]>, Option<&[T]>)> {
        if !self.learn_affine {
            return None;
        }
        Some((
            &mut self.gamma,
            &mut self.beta,
            self.grad_gamma.as_deref(),
            self.grad_beta.as_deref(),
        ))
    }

    pub fn begin_calibration(&mut self) {
        self.sums = Some(MomentSums {
            mean: vec![0.0; self.channels],
            var: vec![0.0; self.channels],
            batches: 0,
        });
    }

    /// Replaces the inference moments with the average of the batch moments
    /// seen since [`begin_calibration`](Self::begin_calibration).
    pub fn finish_calibration(&mut self) -> Result<()> {
        let sums = self
            .sums
            .take()
            .ok_or_else(|| Error::Usage("calibration was not started".into()))?;
        if sums.batches == 0 {
            return Err(Error::arg("no batches were seen during calibration"));
        }
        let k = sums.batches as f64;
        self.running_mean = sums.mean.iter().map(|&v| T::cast(v / k)).collect();
        self.running_var = sums.var.iter().map(|&v| T::cast(v / k)).collect();
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: BnMode) -> Result<Tensor4<T>> {
        if x.c() != self.channels {
            return Err(Error::shape(format!(
                "batch-norm expects {} channels, got {}",
                self.channels,
                x.c()
            )));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Infer => (
                self.running_mean.iter().map(|v| v.as_f64()).collect(),
                self.running_var.iter().map(|v| v.as_f64()).collect(),
            ),
            BnMode::Train | BnMode::Calibrate => {
                if x.n() * x.plane_len() < 2 {
                    return Err(Error::arg("batch statistics need at least two values per channel"));
                }
                channel_moments(x)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::cast(1.0 / (v + self.epsilon).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::cast(m)).collect();
        let hw = x.plane_len();
        let mut x_hat = Tensor4::zeros(x.dims());
        for (i, (dst, src)) in x_hat.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)).enumerate() {
            let ch = i % self.channels;
            let (mu, s) = (mean_t[ch], inv_std[ch]);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mu) * s;
            }
        }
        let mut y = x_hat.clone();
        if self.learn_affine {
            for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
                let ch = i % self.channels;
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for v in plane {
                    *v = *v * g + b;
                }
            }
        }

        match mode {
            BnMode::Train => {
                let d = T::cast(self.ema_decay);
                let keep = T::one() - d;
                for ch in 0..self.channels {
                    self.running_mean[ch] = d * self.running_mean[ch] + keep * T::cast(mean[ch]);
                    self.running_var[ch] = d * self.running_var[ch] + keep * T::cast(var[ch]);
                }
                self.cache = Some(BnCache { x_hat, inv_std });
            }
            BnMode::Calibrate => {
                if let Some(sums) = self.sums.as_mut() {
                    for ch in 0..self.channels {
                        sums.mean[ch] += mean[ch];
                        sums.var[ch] += var[ch];
                    }
                    sums.batches += 1;
                }
            }
            BnMode::Infer => {}
        }
        Ok(y)
    }

    /// Exact gradient of the last train-mode forward. Affine gradients are
    /// stored on the layer only when the affine is learned.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("batch-norm backward needs a train-mode forward".into()))?;
        if dy.dims() != cache.x_hat.dims() {
            return Err(Error::shape("batch-norm gradient dims differ from input"));
        }
        let c = self.channels;
        let hw = dy.plane_len();
        let m = (dy.n() * hw) as f64;

        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (g, xh)) in dy.data().chunks(hw).zip(cache.x_hat.data().chunks(hw)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_dy[ch] += gv.as_f64();
                sum_dy_xhat[ch] += gv.as_f64() * xv.as_f64();
            }
        }

        // dx = gamma·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
        let mut dx = Tensor4::zeros(dy.dims());
        for (i, ((out, g), xh)) in dx
            .data_mut()
            .chunks_mut(hw)
            .zip(dy.data().chunks(hw))
            .zip(cache.x_hat.data().chunks(hw))
            .enumerate()
        {
            let ch = i % c;
            let k = T::cast(self.gamma[ch].as_f64() * cache.inv_std[ch].as_f64() / m);
            let mt = T::cast(m);
            let sdy = T::cast(sum_dy[ch]);
            let sdx = T::cast(sum_dy_xhat[ch]);
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = k * (mt * gv - sdy - xv * sdx);
            }
        }

        if self.learn_affine {
            self.grad_gamma = Some(sum_dy_xhat.iter().map(|&v| T::cast(v)).collect());
            self.grad_beta = Some(sum_dy.iter().map(|&v| T::cast(v)).collect());
        } else {
            self.grad_gamma = None;
            self.grad_beta = None;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
