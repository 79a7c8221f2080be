use crate::tensor::{gemm, MatLayout, Scalar, Tensor};

use super::{mismatch, NnError};

/// Fully connected layer: `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        let &[_, out] = weights.dims() else {
            return Err(mismatch("dense weights", weights.dims(), &[0, 0]));
        };
        if bias.dims() != [out] {
            return Err(mismatch("dense bias", bias.dims(), &[out]));
        }
        Ok(Self { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense { weights: self.weights.cast(), bias: self.bias.cast() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn batch_of<T: Scalar>(x: &Tensor<T>, layer: &Dense<T>) -> Result<usize, NnError> {
    match *x.dims() {
        [b, i] if i == layer.inputs() => Ok(b),
        _ => Err(mismatch("dense input", x.dims(), &[0, layer.inputs()])),
    }
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, layer: &Dense<T>) -> Result<Tensor<T>, NnError> {
    let b = batch_of(x, layer)?;
    let (i, o) = (layer.inputs(), layer.outputs());
    let mut out: Vec<T> = layer.bias.data().iter().copied().cycle().take(b * o).collect();
    gemm(
        T::one(),
        x.data(),
        MatLayout::row_major(b, i),
        layer.weights.data(),
        MatLayout::row_major(i, o),
        T::one(),
        &mut out,
        MatLayout::row_major(b, o),
    );
    Ok(Tensor::from_vec([b, o], out)?)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &Dense<T>,
    upstream: &Tensor<T>,
) -> Result<DenseGrads<T>, NnError> {
    let b = batch_of(x, layer)?;
    let (i, o) = (layer.inputs(), layer.outputs());
    if upstream.dims() != [b, o] {
        return Err(mismatch("dense upstream", upstream.dims(), &[b, o]));
    }
    let mut grad_weights = vec![T::zero(); i * o];
    gemm(
        T::one(),
        x.data(),
        MatLayout::row_major(b, i).transposed(),
        upstream.data(),
        MatLayout::row_major(b, o),
        T::zero(),
        &mut grad_weights,
        MatLayout::row_major(i, o),
    );
    let mut grad_x = vec![T::zero(); b * i];
    gemm(
        T::one(),
        upstream.data(),
        MatLayout::row_major(b, o),
        layer.weights.data(),
        MatLayout::row_major(i, o).transposed(),
        T::zero(),
        &mut grad_x,
        MatLayout::row_major(b, i),
    );
    let mut grad_bias = vec![T::zero(); o];
    for row in upstream.data().chunks_exact(o) {
        for (g, &v) in grad_bias.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok(DenseGrads {
        grad_x: Tensor::from_vec([b, i], grad_x)?,
        grad_weights: Tensor::from_vec([i, o], grad_weights)?,
        grad_bias: Tensor::from_vec([o], grad_bias)?,
    })
}

/// Collapse every axis after the batch axis. The gradient of flatten is the
/// inverse reshape.
pub fn flatten<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>, NnError> {
    let b = x.dims()[0];
    let rest = x.numel() / b;
    Ok(x.reshape([b, rest])?)
}
