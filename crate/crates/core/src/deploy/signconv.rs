//! Multiplier-free convolution over sign bits.

use rayon::prelude::*;

use super::format::bit_at;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_forward, conv_output_dim, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    /// One bit per weight, `(Cout, Cin, kh, kw)` order, LSB first.
    Signs(Vec<u8>),
    /// Full-precision weights of an excluded layer.
    Float(Tensor4<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub scale: f32,
    pub weights: LayerWeights,
}

impl PackedConvLayer {
    /// A sign-encoded layer with "same" padding.
    pub fn from_signs(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        scale: f32,
        bits: Vec<u8>,
    ) -> Result<Self> {
        let n = kernel * kernel * in_channels * out_channels;
        if kernel.is_multiple_of(2) || stride == 0 || n == 0 || bits.len() != n.div_ceil(8) {
            return Err(Error::shape(format!(
                "sign layer F={kernel} Cin={in_channels} Cout={out_channels} stride={stride} needs {} bytes, got {}",
                n.div_ceil(8),
                bits.len()
            )));
        }
        Ok(Self {
            kernel,
            in_channels,
            out_channels,
            stride,
            pad: (kernel - 1) / 2,
            scale,
            weights: LayerWeights::Signs(bits),
        })
    }

    /// Sign of weight `(o, i, kh, kw)`; `None` for full-precision layers.
    pub fn sign(&self, o: usize, i: usize, kh: usize, kw: usize) -> Option<bool> {
        match &self.weights {
            LayerWeights::Signs(bits) => {
                let f = self.kernel;
                Some(bit_at(bits, ((o * self.in_channels + i) * f + kh) * f + kw))
            }
            LayerWeights::Float(_) => None,
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + k − pad` is in range.
fn valid_span(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let shift = k as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let last = in_len as isize - 1 - shift;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Convolution of `x` with `±s` weights using only additions and
/// subtractions of input elements, followed by a single multiplication of
/// each output element by `s`.
///
/// Full-precision (excluded) layers fall back to an ordinary convolution.
pub fn signconv_infer(x: &Tensor4<f32>, layer: &PackedConvLayer) -> Result<Tensor4<f32>> {
    let bits = match &layer.weights {
        LayerWeights::Float(w) => return conv2d_forward(x, w, layer.stride, layer.pad),
        LayerWeights::Signs(b) => b,
    };
    if x.c() != layer.in_channels {
        return Err(Error::shape(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels,
            x.c()
        )));
    }
    let (f, s, p) = (layer.kernel, layer.stride, layer.pad);
    let (h, w) = (x.h(), x.w());
    let ho = conv_output_dim(h, f, s, p).ok_or_else(|| Error::shape("kernel larger than padded input"))?;
    let wo = conv_output_dim(w, f, s, p).ok_or_else(|| Error::shape("kernel larger than padded input"))?;
    let cout = layer.out_channels;
    let cin = layer.in_channels;
    let rows: Vec<(usize, usize)> = (0..f).map(|k| valid_span(ho, h, k, s, p)).collect();
    let cols: Vec<(usize, usize)> = (0..f).map(|k| valid_span(wo, w, k, s, p)).collect();

    let mut y = Tensor4::zeros([x.n(), cout, ho, wo]);
    y.data_mut()
        .par_chunks_mut(cout * ho * wo)
        .zip(x.data().par_chunks(cin * h * w))
        .for_each(|(out, xs)| {
            for (o, acc) in out.chunks_mut(ho * wo).enumerate() {
                for i in 0..cin {
                    let plane = &xs[i * h * w..(i + 1) * h * w];
                    for kh in 0..f {
                        let (r0, r1) = rows[kh];
                        for kw in 0..f {
                            let (c0, c1) = cols[kw];
                            if c0 >= c1 {
                                continue;
                            }
                            let plus = bit_at(bits, ((o * cin + i) * f + kh) * f + kw);
                            for oh in r0..r1 {
                                let ih = oh * s + kh - p;
                                let src = &plane[ih * w..(ih + 1) * w];
                                let dst = &mut acc[oh * wo + c0..oh * wo + c1];
                                let iw0 = c0 * s + kw - p;
                                if s == 1 {
                                    let src = &src[iw0..iw0 + (c1 - c0)];
                                    if plus {
                                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                                    } else {
                                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d -= v);
                                    }
                                } else {
                                    let src = src[iw0..].iter().step_by(s);
                                    if plus {
                                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                                    } else {
                                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d -= v);
                                    }
                                }
                            }
                        }
                    }
                }
                acc.iter_mut().for_each(|v| *v *= layer.scale);
            }
        });
    Ok(y)
}
