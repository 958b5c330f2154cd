//! Sign binarization of convolution weights with a constant per-layer scale.
//!
//! Each layer keeps full-precision *shadow* weights that the optimizer
//! updates. Forward and backward propagation see `s·sign(W)` instead, where
//! `s = gain/√(F²·Cin)` is the He-initialization standard deviation of the
//! layer and never changes. The gradient with respect to the propagated
//! weights is applied unchanged to the shadow weights (straight-through).

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, Real, Rng, Tensor4};

/// Gain for networks with identity skip connections.
pub const RESNET_GAIN: f64 = std::f64::consts::SQRT_2;
/// Gain for plain all-convolutional networks.
pub const PLAIN_GAIN: f64 = 2.0;

/// `gain / √(F²·Cin)`.
pub fn layer_scale(kernel: usize, in_channels: usize, gain: f64) -> Result<f64> {
    if kernel == 0 || in_channels == 0 || !(gain > 0.0) {
        return Err(Error::arg(format!(
            "layer scale needs positive arguments (F={kernel}, Cin={in_channels}, gain={gain})"
        )));
    }
    Ok(gain / ((kernel * kernel * in_channels) as f64).sqrt())
}

/// `s·sign(W)` elementwise, with `sign(0) = +1`.
pub fn binarize_weights<T: Real>(w: &Tensor4<T>, scale: T) -> Tensor4<T> {
    w.map(|v| if v >= T::zero() { scale } else { -scale })
}

/// Weight sign bit: `true` for `+1`.
#[inline]
pub fn sign_bit<T: Real>(v: T) -> bool {
    v >= T::zero()
}

#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    weights: Tensor4<T>,
    stride: usize,
    pad: usize,
    gain: f64,
    scale: f64,
    binarized: bool,
    grad: Option<Tensor4<T>>,
    cache: Option<(Tensor4<T>, Tensor4<T>)>,
}

impl<T: Real> ConvLayer<T> {
    /// A square `kernel×kernel` layer with "same" zero padding and zeroed
    /// shadow weights.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        binarized: bool,
    ) -> Result<Self> {
        if out_channels == 0 || stride == 0 || kernel.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "invalid conv layer: Cout={out_channels}, F={kernel}, stride={stride}"
            )));
        }
        let scale = layer_scale(kernel, in_channels, gain)?;
        Ok(Self {
            weights: Tensor4::zeros([out_channels, in_channels, kernel, kernel]),
            stride,
            pad: (kernel - 1) / 2,
            gain,
            scale,
            binarized,
            grad: None,
            cache: None,
        })
    }

    /// He initialization: shadow weights drawn from `N(0, s²)`.
    pub fn init(&mut self, rng: &mut Rng) -> Result<()> {
        self.weights = rng.gaussian(self.scale, self.weights.dims())?;
        Ok(())
    }

    pub fn kernel(&self) -> usize {
        self.weights.h()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.c()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    pub fn set_binarized(&mut self, on: bool) {
        self.binarized = on;
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn shadow_weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    pub fn set_shadow_weights(&mut self, w: Tensor4<T>) -> Result<()> {
        if w.dims() != self.weights.dims() {
            return Err(Error::shape(format!(
                "weights {:?} do not match layer {:?}",
                w.dims(),
                self.weights.dims()
            )));
        }
        self.weights = w;
        Ok(())
    }

    /// The tensor used for propagation: `s·sign(W)` when binarized, `W` otherwise.
    pub fn propagated_weights(&self) -> Tensor4<T> {
        if self.binarized {
            binarize_weights(&self.weights, T::cast(self.scale))
        } else {
            self.weights.clone()
        }
    }

    pub fn grad(&self) -> Option<&Tensor4<T>> {
        self.grad.as_ref()
    }

    pub(crate) fn param_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (self.weights.data_mut(), self.grad.as_ref().map(|g| g.data()))
    }

    /// Forward pass; with `keep_cache` the input is retained for `backward`.
    pub fn forward(&mut self, x: &Tensor4<T>, keep_cache: bool) -> Result<Tensor4<T>> {
        let w = self.propagated_weights();
        let y = conv2d_forward(x, &w, self.stride, self.pad)?;
        self.cache = keep_cache.then(|| (x.clone(), w));
        Ok(y)
    }

    /// Returns the input gradient and stores the shadow-weight gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (x, w) = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("conv backward needs a cached forward".into()))?;
        let (dx, dw) = conv2d_backward(&x, &w, dy, self.stride, self.pad)?;
        self.grad = Some(dw);
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// `conv2d_forward(x, s·sign(W))` for a binarized layer.
pub fn binarized_conv_forward<T: Real>(x: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<Tensor4<T>> {
    if !layer.binarized {
        return Err(Error::Usage("layer is not binarized".into()));
    }
    conv2d_forward(x, &layer.propagated_weights(), layer.stride, layer.pad)
}

/// Input gradient and straight-through shadow-weight gradient of a binarized layer.
pub fn binarized_conv_backward<T: Real>(
    x: &Tensor4<T>,
    layer: &ConvLayer<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if !layer.binarized {
        return Err(Error::Usage("layer is not binarized".into()));
    }
    conv2d_backward(x, &layer.propagated_weights(), dy, layer.stride, layer.pad)
}
