use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [b, k] = logits.shape() else {
        return Err(Error::Shape {
            context: "softmax_cross_entropy logits".into(),
            expected: vec![targets.len(), 0],
            actual: logits.shape().to_vec(),
        });
    };
    let (b, k) = (*b, *k);
    if targets.len() != b {
        return Err(Error::Shape {
            context: "softmax_cross_entropy targets".into(),
            expected: vec![b],
            actual: vec![targets.len()],
        });
    }
    let scale = T::one() / T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(b * k);
    for (row, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::TargetOutOfRange {
                row,
                target: t,
                classes: k,
            });
        }
        let z = logits.row(row);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        // -log p_t = log Σ exp(z - max) - (z_t - max)
        loss += log_sum - (z[t] - max);
        for (j, &v) in z.iter().enumerate() {
            let p = (v - max - log_sum).exp();
            let onehot = if j == t { T::one() } else { T::zero() };
            grad.push((p - onehot) * scale);
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "cross-entropy loss".into(),
        });
    }
    Ok((loss, Tensor::new(vec![b, k], grad)?))
}
