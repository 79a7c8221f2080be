//! Same-padded, stride-1 3x3 convolution (cross-correlation) over NHWC
//! tensors, lowered to GEMM through an im2col buffer.

use crate::tensor::{gemm, MatLayout, Scalar, Tensor};

use super::{mismatch, NnError};

const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

/// 3x3 convolution weights. Filters are `[K, 3, 3, C_in]`, bias is `[K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(filters: Tensor<T>, bias: Tensor<T>) -> Result<Self, NnError> {
        let &[k, kh, kw, _] = filters.dims() else {
            return Err(mismatch("conv2d filters", filters.dims(), &[0, KSIZE, KSIZE, 0]));
        };
        if kh != KSIZE || kw != KSIZE {
            return Err(mismatch("conv2d filters", filters.dims(), &[k, KSIZE, KSIZE, 0]));
        }
        if bias.dims() != [k] {
            return Err(mismatch("conv2d bias", bias.dims(), &[k]));
        }
        Ok(Self { filters, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.filters.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.dims()[3]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d { filters: self.filters.cast(), bias: self.bias.cast() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub grad_filters: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn check_input<T: Scalar>(x: &Tensor<T>, layer: &Conv2d<T>) -> Result<[usize; 4], NnError> {
    match *x.dims() {
        [b, h, w, c] if c == layer.in_channels() => Ok([b, h, w, c]),
        _ => Err(mismatch("conv2d input", x.dims(), &[0, 0, 0, layer.in_channels()])),
    }
}

/// Fill `col` (`[H*W, 9*C]`) with the zero-padded 3x3 neighbourhoods of one
/// image. Column index is `(ky * 3 + kx) * C + c`, matching the filter layout.
fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, col: &mut [T]) {
    let row_len = TAPS * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..KSIZE {
                let sy = y as isize + ky as isize - 1;
                for kx in 0..KSIZE {
                    let sx = x as isize + kx as isize - 1;
                    let dst = &mut row[(ky * KSIZE + kx) * c..(ky * KSIZE + kx + 1) * c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, c: usize, img: &mut [T]) {
    let row_len = TAPS * c;
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..KSIZE {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KSIZE {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &row[(ky * KSIZE + kx) * c..(ky * KSIZE + kx + 1) * c];
                    let dst = (sy as usize * w + sx as usize) * c;
                    for (d, &s) in img[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>, NnError> {
    let [b, h, w, c] = check_input(x, layer)?;
    let k = layer.out_channels();
    let pixels = h * w;
    let mut col = vec![T::zero(); pixels * TAPS * c];
    let mut out = vec![T::zero(); b * pixels * k];
    let filters = MatLayout::row_major(k, TAPS * c).transposed();
    for n in 0..b {
        let img = &x.data()[n * pixels * c..(n + 1) * pixels * c];
        im2col(img, h, w, c, &mut col);
        let dst = &mut out[n * pixels * k..(n + 1) * pixels * k];
        for row in dst.chunks_exact_mut(k) {
            row.copy_from_slice(layer.bias.data());
        }
        gemm(
            T::one(),
            &col,
            MatLayout::row_major(pixels, TAPS * c),
            layer.filters.data(),
            filters,
            T::one(),
            dst,
            MatLayout::row_major(pixels, k),
        );
    }
    Ok(Tensor::from_vec([b, h, w, k], out)?)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
) -> Result<Conv2dGrads<T>, NnError> {
    let (grad_x, grad_filters, grad_bias) = backward(x, layer, upstream, true)?;
    Ok(Conv2dGrads { grad_x: grad_x.expect("input gradient requested"), grad_filters, grad_bias })
}

/// Filter and bias gradients only, for layers whose input needs no gradient.
pub fn conv2d_param_grads<T: Scalar>(
    x: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (_, grad_filters, grad_bias) = backward(x, layer, upstream, false)?;
    Ok((grad_filters, grad_bias))
}

type Grads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
    input_grad: bool,
) -> Result<Grads<T>, NnError> {
    let [b, h, w, c] = check_input(x, layer)?;
    let k = layer.out_channels();
    if upstream.dims() != [b, h, w, k] {
        return Err(mismatch("conv2d upstream", upstream.dims(), &[b, h, w, k]));
    }
    let pixels = h * w;
    let mut col = vec![T::zero(); pixels * TAPS * c];
    let mut grad_col = vec![T::zero(); if input_grad { pixels * TAPS * c } else { 0 }];
    let mut grad_x = vec![T::zero(); if input_grad { x.numel() } else { 0 }];
    let mut grad_filters = vec![T::zero(); layer.filters.numel()];
    let mut grad_bias = vec![T::zero(); k];
    let up_layout = MatLayout::row_major(pixels, k);
    for n in 0..b {
        let img = &x.data()[n * pixels * c..(n + 1) * pixels * c];
        let dy = &upstream.data()[n * pixels * k..(n + 1) * pixels * k];
        im2col(img, h, w, c, &mut col);
        // dW[K, 9C] += dY^T[K, HW] * col[HW, 9C]
        gemm(
            T::one(),
            dy,
            up_layout.transposed(),
            &col,
            MatLayout::row_major(pixels, TAPS * c),
            T::one(),
            &mut grad_filters,
            MatLayout::row_major(k, TAPS * c),
        );
        for row in dy.chunks_exact(k) {
            for (g, &v) in grad_bias.iter_mut().zip(row) {
                *g += v;
            }
        }
        if !input_grad {
            continue;
        }
        // dcol[HW, 9C] = dY[HW, K] * W[K, 9C]
        gemm(
            T::one(),
            dy,
            up_layout,
            layer.filters.data(),
            MatLayout::row_major(k, TAPS * c),
            T::zero(),
            &mut grad_col,
            MatLayout::row_major(pixels, TAPS * c),
        );
        col2im(&grad_col, h, w, c, &mut grad_x[n * pixels * c..(n + 1) * pixels * c]);
    }
    Ok((
        if input_grad { Some(Tensor::from_vec(x.dims().to_vec(), grad_x)?) } else { None },
        Tensor::from_vec(layer.filters.dims().to_vec(), grad_filters)?,
        Tensor::from_vec([k], grad_bias)?,
    ))
}

/// Direct nested-loop convolution, independent of the im2col/GEMM path.
pub fn conv2d_naive<T: Scalar>(x: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>, NnError> {
    let [b, h, w, c] = check_input(x, layer)?;
    let k = layer.out_channels();
    let f = layer.filters.data();
    let xd = x.data();
    let mut out = vec![T::zero(); b * h * w * k];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for o in 0..k {
                    let mut acc = layer.bias.data()[o];
                    for ky in 0..KSIZE {
                        for kx in 0..KSIZE {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xv = xd[((n * h + sy as usize) * w + sx as usize) * c + ci];
                                let fv = f[((o * KSIZE + ky) * KSIZE + kx) * c + ci];
                                acc += xv * fv;
                            }
                        }
                    }
                    out[((n * h + y) * w + xx) * k + o] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_vec([b, h, w, k], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 4, 5, 1], &mut rng);
        let mut f = vec![0.0f32; 9];
        f[4] = 1.0;
        let layer = Conv2d::new(Tensor::from_vec([1, 3, 3, 1], f).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        assert_eq!(conv2d_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_padded_support() {
        let x = Tensor::<f32>::new([1, 5, 5, 1], 1.0).unwrap();
        let layer = Conv2d::new(Tensor::new([1, 3, 3, 1], 1.0).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        let naive = conv2d_naive(&x, &layer).unwrap();
        assert_eq!(y, naive);
        let at = |r: usize, c: usize| y.get(&[0, r, c, 0]).unwrap();
        assert_eq!(at(2, 2), 9.0);
        assert_eq!(at(1, 3), 9.0);
        assert_eq!(at(0, 2), 6.0);
        assert_eq!(at(2, 4), 6.0);
        assert_eq!(at(0, 0), 4.0);
        assert_eq!(at(4, 4), 4.0);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (b, h, w, c, k) = (
                rng.gen_range(1..3),
                rng.gen_range(1..7),
                rng.gen_range(1..7),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let x = random(&[b, h, w, c], &mut rng);
            let layer = Conv2d::new(random(&[k, 3, 3, c], &mut rng), random(&[k], &mut rng)).unwrap();
            let fast = conv2d_forward(&x, &layer).unwrap();
            let slow = conv2d_naive(&x, &layer).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_bias_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4, 2], &mut rng);
        let layer = Conv2d::new(random(&[3, 3, 3, 2], &mut rng), random(&[3], &mut rng)).unwrap();
        let g = conv2d_backward(&x, &layer, &Tensor::zeros([2, 3, 4, 3]).unwrap()).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_filters.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.data().iter().all(|&v| v == 0.0));

        let up = random(&[2, 3, 4, 3], &mut rng);
        let g = conv2d_backward(&x, &layer, &up).unwrap();
        for o in 0..3 {
            let want: f32 = up.data().iter().skip(o).step_by(3).sum();
            assert!((g.grad_bias.data()[o] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 4, 4, 2]).unwrap();
        let layer = Conv2d::new(Tensor::zeros([1, 3, 3, 3]).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        assert!(matches!(conv2d_forward(&x, &layer), Err(NnError::Shape(_))));
        assert!(Conv2d::new(Tensor::<f32>::zeros([1, 5, 5, 3]).unwrap(), Tensor::zeros([1]).unwrap()).is_err());
        assert!(Conv2d::new(Tensor::<f32>::zeros([2, 3, 3, 3]).unwrap(), Tensor::zeros([1]).unwrap()).is_err());
    }

    #[test]
    fn param_grads_match_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 5, 4, 3], &mut rng);
        let layer = Conv2d::new(random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng)).unwrap();
        let up = random(&[2, 5, 4, 4], &mut rng);
        let full = conv2d_backward(&x, &layer, &up).unwrap();
        let (gf, gb) = conv2d_param_grads(&x, &layer, &up).unwrap();
        assert_eq!(gf, full.grad_filters);
        assert_eq!(gb, full.grad_bias);
    }
}
