use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// How a guidance map is merged into the high-resolution feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FuseMode {
    Sum,
    Mul,
}

pub fn fuse<T: Float>(x_h: &Tensor<T>, x_s: &Tensor<T>, mode: FuseMode) -> Result<Tensor<T>> {
    match mode {
        FuseMode::Sum => x_h.zip_map(x_s, |a, b| a + b),
        FuseMode::Mul => x_h.zip_map(x_s, |a, b| a * b),
    }
}

/// Returns the gradients with respect to `(x_h, x_s)`.
pub fn fuse_backward<T: Float>(
    x_h: &Tensor<T>,
    x_s: &Tensor<T>,
    grad_out: &Tensor<T>,
    mode: FuseMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x_h.expect_same_dims(x_s)?;
    x_h.expect_same_dims(grad_out)?;
    match mode {
        FuseMode::Sum => Ok((grad_out.clone(), grad_out.clone())),
        FuseMode::Mul => Ok((grad_out.zip_map(x_s, |g, s| g * s)?, grad_out.zip_map(x_h, |g, h| g * h)?)),
    }
}
