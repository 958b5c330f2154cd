use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Appends zero channels so the result has `c_out` channels.
pub fn zero_pad_channels<T: Real>(x: &Tensor4<T>, c_out: usize) -> Result<Tensor4<T>> {
    if c_out < x.c() {
        return Err(Error::arg(format!("cannot pad {} channels down to {}", x.c(), c_out)));
    }
    let mut y = Tensor4::zeros([x.n(), c_out, x.h(), x.w()]);
    let (src_len, dst_len) = (x.sample_len(), y.sample_len());
    for n in 0..x.n() {
        y.data_mut()[n * dst_len..n * dst_len + src_len].copy_from_slice(x.sample(n));
    }
    Ok(y)
}

/// Keeps the gradient of the first `c_in` channels and drops the rest.
pub fn zero_pad_channels_backward<T: Real>(dy: &Tensor4<T>, c_in: usize) -> Result<Tensor4<T>> {
    if c_in > dy.c() {
        return Err(Error::arg("original channel count exceeds padded count"));
    }
    let mut dx = Tensor4::zeros([dy.n(), c_in, dy.h(), dy.w()]);
    let keep = dx.sample_len();
    for n in 0..dy.n() {
        dx.data_mut()[n * keep..(n + 1) * keep].copy_from_slice(&dy.sample(n)[..keep]);
    }
    Ok(dx)
}
