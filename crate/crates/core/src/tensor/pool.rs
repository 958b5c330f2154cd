use rayon::prelude::*;

use super::{check_positive_dims, Real, Tensor4};
use crate::error::{Error, Result};

/// Output size of a pooling window; same arithmetic as convolution.
pub fn pool_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    super::conv_output_dim(input, kernel, stride, pad)
}

struct Window {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    /// In-image index range covered by output index `o` along an axis of length `len`.
    #[inline]
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

fn pool_dims<T: Real>(x: &Tensor4<T>, win: &Window) -> Result<(usize, usize)> {
    check_positive_dims(x.dims(), "pool input")?;
    if win.k == 0 || win.stride == 0 {
        return Err(Error::arg("pool kernel and stride must be positive"));
    }
    if win.pad >= win.k {
        return Err(Error::arg("pool padding must be smaller than the kernel"));
    }
    let ho = pool_output_dim(x.h(), win.k, win.stride, win.pad)
        .ok_or_else(|| Error::shape("pool window larger than padded input"))?;
    let wo = pool_output_dim(x.w(), win.k, win.stride, win.pad)
        .ok_or_else(|| Error::shape("pool window larger than padded input"))?;
    Ok((ho, wo))
}

/// Average pooling whose divisor counts only in-image elements, so constant
/// inputs stay constant at the borders.
///
/// The residual downsampling path uses `k = 3, stride = 2, pad = 1`, which
/// maps `H` to `⌈H/2⌉`.
pub fn avg_pool<T: Real>(x: &Tensor4<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor4<T>> {
    let win = Window { k, stride, pad };
    let (ho, wo) = pool_dims(x, &win)?;
    let (h, w) = (x.h(), x.w());
    let mut y = Tensor4::zeros([x.n(), x.c(), ho, wo]);
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane_idx, out)| {
            let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oh in 0..ho {
                let (h0, h1) = win.span(oh, h);
                for ow in 0..wo {
                    let (w0, w1) = win.span(ow, w);
                    let mut s = T::zero();
                    for ih in h0..h1 {
                        for v in &src[ih * w + w0..ih * w + w1] {
                            s += *v;
                        }
                    }
                    out[oh * wo + ow] = s / T::cast(((h1 - h0) * (w1 - w0)) as f64);
                }
            }
        });
    Ok(y)
}

/// Routes each output gradient equally to the in-image elements of its window.
pub fn avg_pool_backward<T: Real>(
    x_dims: [usize; 4],
    dy: &Tensor4<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let win = Window { k, stride, pad };
    let probe = Tensor4::<T>::zeros([1, 1, x_dims[2], x_dims[3]]);
    check_positive_dims(x_dims, "pool input")?;
    let (ho, wo) = pool_dims(&probe, &win)?;
    if dy.dims() != [x_dims[0], x_dims[1], ho, wo] {
        return Err(Error::shape(format!(
            "pool output gradient has dims {:?}, expected {:?}",
            dy.dims(),
            [x_dims[0], x_dims[1], ho, wo]
        )));
    }
    let (h, w) = (x_dims[2], x_dims[3]);
    let mut dx = Tensor4::zeros(x_dims);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, out)| {
            let g = &dy.data()[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
            for oh in 0..ho {
                let (h0, h1) = win.span(oh, h);
                for ow in 0..wo {
                    let (w0, w1) = win.span(ow, w);
                    let share = g[oh * wo + ow] / T::cast(((h1 - h0) * (w1 - w0)) as f64);
                    for ih in h0..h1 {
                        for v in &mut out[ih * w + w0..ih * w + w1] {
                            *v += share;
                        }
                    }
                }
            }
        });
    Ok(dx)
}

/// Mean over each `(n, c)` plane, giving `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let hw = x.plane_len();
    let inv = T::one() / T::cast(hw.max(1) as f64);
    let data = x
        .data()
        .chunks(hw.max(1))
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor4::from_vec([x.n(), x.c(), 1, 1], data).expect("plane count matches")
}

/// Broadcasts `dy / (H·W)` back over each plane.
pub fn global_avg_pool_backward<T: Real>(x_dims: [usize; 4], dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if dy.dims() != [x_dims[0], x_dims[1], 1, 1] {
        return Err(Error::shape(format!(
            "global pool gradient has dims {:?}, expected {:?}",
            dy.dims(),
            [x_dims[0], x_dims[1], 1, 1]
        )));
    }
    let hw = x_dims[2] * x_dims[3];
    let inv = T::one() / T::cast(hw as f64);
    let mut dx = Tensor4::zeros(x_dims);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}
