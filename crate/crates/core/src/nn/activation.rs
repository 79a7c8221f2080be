use crate::tensor::{Scalar, Tensor};

use super::{mismatch, NnError};

/// Probability floor applied before taking logs in the loss.
const PROB_FLOOR: f64 = 1e-12;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given the layer *input* or *output* (both are positive on
/// the same support). The derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if activation.dims() != upstream.dims() {
        return Err(mismatch("relu upstream", upstream.dims(), activation.dims()));
    }
    let data = activation
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec(activation.dims().to_vec(), data)?)
}

/// Row-wise softmax over a `[B, classes]` tensor, with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let &[_, k] = logits.dims() else {
        return Err(mismatch("softmax", logits.dims(), &[0, 0]));
    };
    if !logits.all_finite() {
        return Err(NnError::Numeric("softmax received non-finite logits".into()));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(Tensor::from_vec(logits.dims().to_vec(), out)?)
}

/// Check that every row is a one-hot vector of the right width.
pub fn validate_one_hot<T: Scalar>(one_hot: &Tensor<T>, dims: &[usize]) -> Result<(), NnError> {
    if one_hot.dims() != dims || dims.len() != 2 {
        return Err(mismatch("one-hot labels", one_hot.dims(), dims));
    }
    for (i, row) in one_hot.data().chunks_exact(dims[1]).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(NnError::Argument(format!("row {i} is not a one-hot vector")));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy, `-(1/B) * sum log p_true`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, one_hot: &Tensor<T>) -> Result<T, NnError> {
    validate_one_hot(one_hot, probs.dims())?;
    let k = probs.dims()[1];
    let b = probs.dims()[0];
    let floor = T::from_f64(PROB_FLOOR);
    let mut total = T::zero();
    for (p, y) in probs.data().chunks_exact(k).zip(one_hot.data().chunks_exact(k)) {
        let idx = y.iter().position(|&v| v == T::one()).unwrap_or(0);
        total += -(p[idx].max(floor)).ln();
    }
    Ok(total / T::from_f64(b as f64))
}

/// Gradient of the mean softmax cross-entropy with respect to the logits:
/// `(probs - one_hot) / B`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, one_hot: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    validate_one_hot(one_hot, probs.dims())?;
    let inv_b = T::one() / T::from_f64(probs.dims()[0] as f64);
    let data = probs.data().iter().zip(one_hot.data()).map(|(&p, &y)| (p - y) * inv_b).collect();
    Ok(Tensor::from_vec(probs.dims().to_vec(), data)?)
}
