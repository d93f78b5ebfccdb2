use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct XentOutput<T: Scalar> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub probs: Tensor<T>,
    /// Gradient of the mean loss: `(probs − onehot)/N`.
    pub grad: Tensor<T>,
}

fn rows<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match *logits.shape() {
        [k] => Ok((1, k)),
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(format!("logits must be K or N×K, got {:?}", logits.shape()))),
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows(logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).as_f64().exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::lit(e / total)));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Softmax cross-entropy against integer labels, one per row.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let (n, k) = rows(logits)?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ClassOutOfRange { class: bad, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((row, prow), &label) in logits.data().chunks_exact(k).zip(probs.data().chunks_exact(k)).zip(labels) {
        // log-sum-exp form keeps −log p exact for saturated logits
        let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (j, &p) in prow.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::lit((p.as_f64() - onehot) / n as f64));
        }
    }
    Ok(XentOutput {
        loss: T::lit(loss / n as f64),
        probs,
        grad: Tensor::from_parts(logits.shape().to_vec(), grad),
    })
}
