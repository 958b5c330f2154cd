//! 2-D convolution via per-sample im2col + GEMM.
//!
//! Samples are processed in parallel for the forward pass and the input
//! gradient; the weight gradient is a fixed-order sum over samples so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use super::gemm::gemm;
use super::{check_positive_dims, Real, Tensor4};
use crate::error::{Error, Result};

/// Stride and zero-padding of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// `⌊(input + 2·pad − kernel)/stride⌋ + 1`, or `None` if the kernel does not
/// fit or the stride is zero.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

struct Plan {
    cin: usize,
    cout: usize,
    f: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    fn new<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize, pad: usize) -> Result<Self> {
        check_positive_dims(x.dims(), "conv input")?;
        check_positive_dims(w.dims(), "conv weights")?;
        if stride == 0 {
            return Err(Error::arg("conv stride must be positive"));
        }
        let [cout, cin, fh, fw] = w.dims();
        if fh != fw {
            return Err(Error::shape(format!("conv kernel must be square, got {fh}x{fw}")));
        }
        if x.c() != cin {
            return Err(Error::shape(format!(
                "conv input has {} channels but weights expect {}",
                x.c(),
                cin
            )));
        }
        let ho = conv_output_dim(x.h(), fh, stride, pad)
            .ok_or_else(|| Error::arg("conv kernel larger than padded input"))?;
        let wo = conv_output_dim(x.w(), fh, stride, pad)
            .ok_or_else(|| Error::arg("conv kernel larger than padded input"))?;
        Ok(Self {
            cin,
            cout,
            f: fh,
            h: x.h(),
            w: x.w(),
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.f * self.f
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.f == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ow*stride + kw − pad`
    /// falls inside the image.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kw).div_ceil(s);
        let hi_num = self.w + self.pad;
        let hi = if hi_num <= kw {
            0
        } else {
            (hi_num - kw).div_ceil(s).min(self.wo)
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.p();
        let (f, s) = (self.f, self.stride);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..f {
                for kw in 0..f {
                    let row = &mut col[((c * f + kh) * f + kw) * p..][..p];
                    let (lo, hi) = self.valid_cols(kw);
                    for oh in 0..self.ho {
                        let out = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        let ih = (oh * s + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if s == 1 {
                            let start = lo + kw - self.pad;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ow in lo..hi {
                                out[ow] = src[ow * s + kw - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let p = self.p();
        let (f, s) = (self.f, self.stride);
        dx.fill(T::zero());
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..f {
                for kw in 0..f {
                    let row = &col[((c * f + kh) * f + kw) * p..][..p];
                    let (lo, hi) = self.valid_cols(kw);
                    for oh in 0..self.ho {
                        let ih = (oh * s + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let src = &row[oh * self.wo..(oh + 1) * self.wo];
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in lo..hi {
                            dst[ow * s + kw - self.pad] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation of `x (N, Cin, H, W)` with
/// `w (Cout, Cin, F, F)`.
pub fn conv2d_forward<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize, pad: usize) -> Result<Tensor4<T>> {
    let plan = Plan::new(x, w, stride, pad)?;
    let (k, p, cout) = (plan.k(), plan.p(), plan.cout);
    let mut y = Tensor4::zeros([x.n(), cout, plan.ho, plan.wo]);
    let xs = x.sample_len();
    y.data_mut().par_chunks_mut(cout * p).enumerate().for_each_init(
        || vec![T::zero(); if plan.pointwise() { 0 } else { k * p }],
        |col, (n, out)| {
            let xn = &x.data()[n * xs..(n + 1) * xs];
            if plan.pointwise() {
                gemm(cout, k, p, w.data(), false, xn, false, out, false);
            } else {
                plan.im2col(xn, col);
                gemm(cout, k, p, w.data(), false, col, false, out, false);
            }
        },
    );
    Ok(y)
}

/// Gradients of `sum(conv2d_forward(x, w) · dy)` with respect to `x` and `w`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let plan = Plan::new(x, w, stride, pad)?;
    let expected = [x.n(), plan.cout, plan.ho, plan.wo];
    if dy.dims() != expected {
        return Err(Error::shape(format!(
            "conv output gradient has dims {:?}, expected {:?}",
            dy.dims(),
            expected
        )));
    }
    let (k, p, cout) = (plan.k(), plan.p(), plan.cout);
    let xs = x.sample_len();
    let ys = cout * p;

    let mut dx = Tensor4::zeros(x.dims());
    dx.data_mut().par_chunks_mut(xs).enumerate().for_each_init(
        || vec![T::zero(); if plan.pointwise() { 0 } else { k * p }],
        |dcol, (n, dxn)| {
            let dyn_ = &dy.data()[n * ys..(n + 1) * ys];
            if plan.pointwise() {
                gemm(k, cout, p, w.data(), true, dyn_, false, dxn, false);
            } else {
                gemm(k, cout, p, w.data(), true, dyn_, false, dcol, false);
                plan.col2im(dcol, dxn);
            }
        },
    );

    let mut dw = Tensor4::zeros(w.dims());
    let mut col = vec![T::zero(); if plan.pointwise() { 0 } else { k * p }];
    for n in 0..x.n() {
        let xn = &x.data()[n * xs..(n + 1) * xs];
        let dyn_ = &dy.data()[n * ys..(n + 1) * ys];
        let src: &[T] = if plan.pointwise() {
            xn
        } else {
            plan.im2col(xn, &mut col);
            &col
        };
        gemm(cout, p, k, dyn_, false, src, true, dw.data_mut(), n > 0);
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Direct seven-loop convolution used as an independent reference.
    fn direct_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
        let [cout, cin, f, _] = w.dims();
        let ho = conv_output_dim(x.h(), f, stride, pad).unwrap();
        let wo = conv_output_dim(x.w(), f, stride, pad).unwrap();
        Tensor4::from_fn([x.n(), cout, ho, wo], |n, co, oh, ow| {
            let mut s = 0.0;
            for ci in 0..cin {
                for kh in 0..f {
                    for kw in 0..f {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < x.h() && (iw as usize) < x.w() {
                            s += x.at(n, ci, ih as usize, iw as usize) * w.at(co, ci, kh, kw);
                        }
                    }
                }
            }
            s
        })
    }

    fn random(dims: [usize; 4], rng: &mut Rng) -> Tensor4<f64> {
        rng.gaussian(1.0, dims).unwrap()
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut rng = Rng::new(1);
        let x: Tensor4<f32> = rng.gaussian(1.0, [1, 3, 8, 8]).unwrap();
        let w = Tensor4::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_sliding_sum() {
        let x = Tensor4::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor4::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        let x = Tensor4::<f64>::full([1, 1, 4, 4], 1.0);
        let y = conv2d_forward(&x, &w, 2, 1).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn matches_direct_reference() {
        let mut rng = Rng::new(7);
        for &(n, cin, cout, h, w, f, stride, pad) in &[
            (2, 3, 4, 7, 6, 3, 1, 1),
            (1, 2, 5, 8, 8, 3, 2, 1),
            (2, 4, 3, 5, 5, 1, 1, 0),
            (1, 2, 2, 9, 7, 1, 2, 0),
            (1, 1, 2, 6, 6, 5, 1, 2),
            (3, 2, 3, 7, 7, 3, 2, 0),
        ] {
            let x = random([n, cin, h, w], &mut rng);
            let wt = random([cout, cin, f, f], &mut rng);
            let y = conv2d_forward(&x, &wt, stride, pad).unwrap();
            let r = direct_conv(&x, &wt, stride, pad);
            assert_eq!(y.dims(), r.dims());
            assert!(y.max_abs_diff(&r) < 1e-10);
        }
    }

    #[test]
    fn odd_kernel_same_padding_preserves_dims() {
        let mut rng = Rng::new(2);
        for f in [1usize, 3, 5] {
            let x: Tensor4<f32> = rng.gaussian(1.0, [2, 2, 9, 6]).unwrap();
            let w: Tensor4<f32> = rng.gaussian(1.0, [4, 2, f, f]).unwrap();
            let y = conv2d_forward(&x, &w, 1, (f - 1) / 2).unwrap();
            assert_eq!(y.dims(), [2, 4, 9, 6]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor4::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor4::<f32>::zeros([2, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, 1, 1), Err(Error::Shape(_))));
        let w = Tensor4::<f32>::zeros([2, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, 0, 1), Err(Error::Argument(_))));
        let empty = Tensor4::<f32>::zeros([0, 3, 4, 4]);
        assert!(matches!(conv2d_forward(&empty, &w, 1, 1), Err(Error::Argument(_))));
        let dy = Tensor4::<f32>::zeros([1, 2, 3, 3]);
        assert!(matches!(conv2d_backward(&x, &w, &dy, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let x = random([2, 2, 5, 5], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let dy = Tensor4::zeros([2, 3, 5, 5]);
        let (dx, dw) = conv2d_backward(&x, &w, &dy, 1, 1).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_is_analytic() {
        let mut rng = Rng::new(4);
        let (n, h, w) = (2, 4, 5);
        let x = random([n, 3, h, w], &mut rng);
        let wt = Tensor4::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let dy = Tensor4::full([n, 3, h, w], 1.0);
        let (dx, dw) = conv2d_backward(&x, &wt, &dy, 1, 0).unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
        // dw[o,i] = sum over positions of x[:, i]
        for o in 0..3 {
            for i in 0..3 {
                let expect: f64 = (0..n).flat_map(|s| x.plane(s, i).to_vec()).sum();
                assert!((dw.at(o, i, 0, 0) - expect).abs() < 1e-10);
            }
        }
        let ones = Tensor4::full([1, 3, h, w], 1.0);
        let dy1 = Tensor4::full([1, 3, h, w], 1.0);
        let (_, dw) = conv2d_backward(&ones, &wt, &dy1, 1, 0).unwrap();
        assert_eq!(dw.at(1, 1, 0, 0), (h * w) as f64);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = Rng::new(5);
        let x: Tensor4<f32> = rng.gaussian(1.0, [4, 3, 6, 6]).unwrap();
        let w: Tensor4<f32> = rng.gaussian(1.0, [2, 3, 3, 3]).unwrap();
        let dy: Tensor4<f32> = rng.gaussian(1.0, [4, 2, 3, 3]).unwrap();
        let a = conv2d_backward(&x, &w, &dy, 2, 1).unwrap();
        let b = conv2d_backward(&x, &w, &dy, 2, 1).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }
}
