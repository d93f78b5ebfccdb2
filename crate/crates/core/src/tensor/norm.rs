use super::{OpContext, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the previous running estimate.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and (unbiased) variance used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(vec![channels]), var: Tensor::full(vec![channels], T::one()) }
    }

    /// Fold one training batch's statistics into the running estimate.
    pub fn update(&mut self, cache: &BnCache<T>) {
        let BnCache::Train { batch_mean, batch_var, count, .. } = cache else {
            return;
        };
        let m = BN_MOMENTUM;
        let correction = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = T::lit(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = T::lit(m * r.as_f64() + (1.0 - m) * b * correction);
        }
    }
}

#[derive(Debug, Clone)]
pub enum BnCache<T: Scalar> {
    Train {
        normalized: Tensor<T>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        count: usize,
    },
    Infer {
        normalized: Tensor<T>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct BnGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

fn channels<T: Scalar>(input: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<usize> {
    let c = *input.shape().last().unwrap();
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm: scale {:?} / shift {:?} must have {c} channels",
            scale.shape(),
            shift.shape()
        )));
    }
    Ok(c)
}

/// Per-channel batch normalization over every axis but the last.
///
/// In training mode statistics come from the batch (which must hold at least
/// two items); in inference mode from `running`. The returned cache carries
/// the batch statistics for [`RunningStats::update`].
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running: &RunningStats<T>,
    ctx: &OpContext,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = channels(input, scale, shift)?;
    let rows = input.len() / c;
    let x = input.data();

    let (mean, var) = if ctx.training {
        if input.rank() < 2 || input.batch() < 2 {
            return Err(Error::invalid("batchnorm in training mode needs a batch of at least 2"));
        }
        let mut mean = vec![0.0f64; c];
        for row in x.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for row in x.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        (mean, var)
    } else {
        (
            running.mean.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            running.var.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
        )
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for (j, &v) in row.iter().enumerate() {
            let xh = (v.as_f64() - mean[j]) * inv_std[j];
            normalized.push(T::lit(xh));
            out.push(T::lit(scale.data()[j].as_f64() * xh + shift.data()[j].as_f64()));
        }
    }
    let normalized = Tensor::from_parts(input.shape().to_vec(), normalized);
    let cache = if ctx.training {
        BnCache::Train { normalized, inv_std, batch_mean: mean, batch_var: var, count: rows }
    } else {
        BnCache::Infer { normalized, inv_std }
    };
    Ok((Tensor::from_parts(input.shape().to_vec(), out), cache))
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (normalized, inv_std) = match cache {
        BnCache::Train { normalized, inv_std, .. } | BnCache::Infer { normalized, inv_std } => {
            (normalized, inv_std)
        }
    };
    normalized.expect_same_shape(grad_out, "batchnorm_backward")?;
    let c = inv_std.len();
    let rows = grad_out.len() / c;
    let g = grad_out.data();
    let xh = normalized.data();

    let mut dshift = vec![0.0f64; c];
    let mut dscale = vec![0.0f64; c];
    for (grow, xrow) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for j in 0..c {
            let gv = grow[j].as_f64();
            dshift[j] += gv;
            dscale[j] += gv * xrow[j].as_f64();
        }
    }

    let s: Vec<f64> = scale.data().iter().map(|v| v.as_f64()).collect();
    let mut dx = Vec::with_capacity(g.len());
    match cache {
        BnCache::Train { .. } => {
            // dx = γ·inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))
            let m = rows as f64;
            for (grow, xrow) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
                for j in 0..c {
                    let v = s[j] * inv_std[j] / m
                        * (m * grow[j].as_f64() - dshift[j] - xrow[j].as_f64() * dscale[j]);
                    dx.push(T::lit(v));
                }
            }
        }
        BnCache::Infer { .. } => {
            for grow in g.chunks_exact(c) {
                for j in 0..c {
                    dx.push(T::lit(grow[j].as_f64() * s[j] * inv_std[j]));
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_parts(grad_out.shape().to_vec(), dx),
        scale: Tensor::from_parts(vec![c], dscale.into_iter().map(T::lit).collect()),
        shift: Tensor::from_parts(vec![c], dshift.into_iter().map(T::lit).collect()),
    })
}
