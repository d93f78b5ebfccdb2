use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FcGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape(format!("fc input needs a leading batch axis, got {:?}", input.shape())));
    }
    let n = input.batch();
    let features = input.len() / n;
    let &[out, inner] = weights.shape() else {
        return Err(Error::shape(format!("fc weights must be out×in, got {:?}", weights.shape())));
    };
    if inner != features {
        return Err(Error::shape(format!(
            "fc: weight inner extent {inner} != flattened input extent {features}"
        )));
    }
    Ok((n, features, out))
}

/// Affine map `y = x·Wᵀ + b` applied to each batch item, flattening
/// everything after the leading batch axis. Output is `N×out`.
pub fn fc<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, features, out) = dims(input, weights)?;
    let mut y = vec![T::zero(); n * out];
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(Error::shape(format!("fc bias {:?} must be [{out}]", b.shape())));
        }
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        n,
        features,
        out,
        T::one(),
        input.data(),
        (features as isize, 1),
        weights.data(),
        (1, features as isize),
        T::one(),
        &mut y,
        (out as isize, 1),
    );
    Ok(Tensor::from_parts(vec![n, out], y))
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (n, features, out) = dims(input, weights)?;
    if grad_out.shape() != [n, out] {
        return Err(Error::shape(format!("fc_backward: grad {:?} != [{n}, {out}]", grad_out.shape())));
    }
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * features];
    T::gemm(
        n,
        out,
        features,
        T::one(),
        g,
        (out as isize, 1),
        weights.data(),
        (features as isize, 1),
        T::zero(),
        &mut dx,
        (features as isize, 1),
    );
    let mut dw = vec![T::zero(); out * features];
    T::gemm(
        out,
        n,
        features,
        T::one(),
        g,
        (1, out as isize),
        input.data(),
        (features as isize, 1),
        T::zero(),
        &mut dw,
        (features as isize, 1),
    );
    let bias = has_bias.then(|| {
        let mut db = vec![T::zero(); out];
        for row in g.chunks_exact(out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        Tensor::from_parts(vec![out], db)
    });
    Ok(FcGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        weights: Tensor::from_parts(weights.shape().to_vec(), dw),
        bias,
    })
}
