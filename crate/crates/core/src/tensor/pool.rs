use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Windowed per-channel maximum (no padding).
pub fn maxpool<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool_with_indices(input, window, stride).map(|(out, _)| out)
}

/// Max pooling that also returns, for every output element, the flat input
/// index it was taken from. Ties resolve to the first position in row-major
/// scan order of the window.
pub fn maxpool_with_indices<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, h, w, c) = input.nhwc()?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!("maxpool window {window} larger than {h}×{w} input")));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut idx = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_i = ((b * h + oy * stride) * w + ox * stride) * c + ch;
                    let mut best = x[best_i];
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    idx.push(best_i);
                }
            }
        }
    }
    let shape = if input.rank() == 3 { vec![ho, wo, c] } else { vec![n, ho, wo, c] };
    Ok((Tensor::from_parts(shape, out), idx))
}

/// Route each output gradient to the input position that won the max.
pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    indices: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if indices.len() != grad_out.len() {
        return Err(Error::shape("maxpool_backward: index/gradient length mismatch"));
    }
    let mut grad = Tensor::zeros(input_shape.to_vec());
    let g = grad.data_mut();
    for (&i, &v) in indices.iter().zip(grad_out.data()) {
        g[i] = g[i] + v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_pool_extents() {
        let x = Tensor::<f32>::zeros(vec![212, 212, 16]);
        assert_eq!(maxpool(&x, 2, 2).unwrap().shape(), &[106, 106, 16]);
        let x = Tensor::<f32>::zeros(vec![53, 53, 32]);
        assert_eq!(maxpool(&x, 2, 2).unwrap().shape(), &[26, 26, 32]);
    }

    #[test]
    fn two_by_two() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool(&x, 2, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::<f32>::full(vec![6, 4, 2], 0.5);
        let y = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let x = Tensor::<f64>::full(vec![1, 2, 2, 1], 1.0);
        let (_, idx) = maxpool_with_indices(&x, 2, 2).unwrap();
        assert_eq!(idx, vec![0]);
        let g = maxpool_backward(x.shape(), &idx, &Tensor::full(vec![1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(g.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::<f32>::zeros(vec![3, 3, 1]);
        assert!(maxpool(&x, 4, 1).is_err());
    }
}
