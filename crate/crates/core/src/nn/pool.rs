use crate::tensor::{Scalar, Tensor};

use super::{mismatch, NnError};

/// Flat input index of the selected maximum for every pooled output element,
/// plus the input shape the indices refer to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_dims: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2x2 max pooling. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices), NnError> {
    let &[b, h, w, c] = x.dims() else {
        return Err(mismatch("maxpool2x2", x.dims(), &[0, 0, 0, 0]));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(mismatch("maxpool2x2 (even spatial dims)", x.dims(), &[b, h + h % 2, w + w % 2, c]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = |dy: usize, dx: usize| ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                let offsets = [base(0, 0), base(0, 1), base(1, 0), base(1, 1)];
                for ch in 0..c {
                    let mut best = offsets[0] + ch;
                    for &o in &offsets[1..] {
                        if data[o + ch] > data[best] {
                            best = o + ch;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec([b, oh, ow, c], out)?, PoolIndices { input_dims: x.dims().to_vec(), argmax }))
}

/// Route each upstream gradient to the input position that won the max.
pub fn maxpool2x2_backward<T: Scalar>(indices: &PoolIndices, upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if upstream.numel() != indices.argmax.len() {
        return Err(mismatch("maxpool2x2 upstream", upstream.dims(), &[indices.argmax.len()]));
    }
    let mut grad = Tensor::zeros(indices.input_dims.clone())?;
    let g = grad.data_mut();
    for (&i, &u) in indices.argmax.iter().zip(upstream.data()) {
        g[i] += u;
    }
    Ok(grad)
}
