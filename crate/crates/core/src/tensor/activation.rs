use rand::Rng as _;

use super::{OpContext, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Inverted dropout.
///
/// Returns the output and, in training mode, the multiplicative mask
/// (entries `0` or `1/(1−ratio)`). `stream` separates masks of different
/// layers that share one context seed.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    ratio: f64,
    ctx: &OpContext,
    stream: u64,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("dropout ratio {ratio} outside [0, 1)")));
    }
    if !ctx.training || ratio == 0.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = rng_for(ctx.seed, &[0xd80, stream]);
    let keep = T::lit(1.0 / (1.0 - ratio));
    let mask = Tensor::from_fn(input.shape().to_vec(), |_| {
        if rng.random::<f64>() < ratio {
            T::zero()
        } else {
            keep
        }
    });
    let out = input.zip_map(&mask, |x, m| x * m)?;
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&Tensor<T>>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(m) => grad_out.zip_map(m, |g, m| g * m),
    }
}
