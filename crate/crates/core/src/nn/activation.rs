use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// `max(x, 0)`; NaN passes through so non-finite activations stay visible.
pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes `dy` where `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.dims() != dy.dims() {
        return Err(Error::shape("relu gradient dims differ from input"));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.dims(), data)
}
