//! Finite-difference gradient checking.
//!
//! Every check runs the production layer kernels in `f64`, reduces the layer
//! output to a scalar `L = sum(g * f(x))` with a random projection `g`, and
//! compares the analytic backward pass against central differences of `L`.
//! Coordinates within one step of a relu kink or a max-pool tie are excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{
    conv2d_backward, conv2d_forward, cross_entropy, dense_backward, dense_forward, dropout_backward, dropout_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, softmax, softmax_cross_entropy_backward,
    Conv2d, Dense, DropoutSpec, Mode, NnError,
};

pub const STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn numerical_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn record(&mut self, analytic: &[f64], numeric: &[f64], excluded: &[bool]) {
        for ((&a, &n), &skip) in analytic.iter().zip(numeric).zip(excluded) {
            if skip {
                self.excluded += 1;
                continue;
            }
            let err = relative_error(a, n);
            self.checked += 1;
            if err < REL_TOLERANCE {
                self.passed += 1;
            }
            self.max_rel_error = self.max_rel_error.max(err);
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.excluded += other.excluded;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid random shape")
}

fn project(out: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

fn with_data(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(dims.to_vec(), data.to_vec()).expect("same shape")
}

fn random_nhwc(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, mut h, mut w, c) = (dim(1, 2), dim(2, 8), dim(2, 8), dim(1, 4));
    if even {
        h -= h % 2;
        w -= w % 2;
    }
    [b, h, w, c]
}

/// Conv3x3: gradients with respect to input, filters and bias.
pub fn check_conv(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_nhwc(&mut rng, false);
    let k = rng.gen_range(1..=4);
    let x = random(&dims, &mut rng);
    let layer = Conv2d::new(random(&[k, 3, 3, dims[3]], &mut rng), random(&[k], &mut rng))?;
    let g = random(&[dims[0], dims[1], dims[2], k], &mut rng);
    let grads = conv2d_backward(&x, &layer, &g)?;
    let mut report = GradReport::default();

    let num =
        numerical_gradient(x.data(), STEP, |v| project(&conv2d_forward(&with_data(x.dims(), v), &layer).unwrap(), &g));
    report.record(grads.grad_x.data(), &num, &vec![false; num.len()]);

    let num = numerical_gradient(layer.filters.data(), STEP, |v| {
        let l = Conv2d { filters: with_data(layer.filters.dims(), v), bias: layer.bias.clone() };
        project(&conv2d_forward(&x, &l).unwrap(), &g)
    });
    report.record(grads.grad_filters.data(), &num, &vec![false; num.len()]);

    let num = numerical_gradient(layer.bias.data(), STEP, |v| {
        let l = Conv2d { filters: layer.filters.clone(), bias: with_data(layer.bias.dims(), v) };
        project(&conv2d_forward(&x, &l).unwrap(), &g)
    });
    report.record(grads.grad_bias.data(), &num, &vec![false; num.len()]);
    Ok(report)
}

pub fn check_dense(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=8));
    let x = random(&[b, i], &mut rng);
    let layer = Dense::new(random(&[i, o], &mut rng), random(&[o], &mut rng))?;
    let g = random(&[b, o], &mut rng);
    let grads = dense_backward(&x, &layer, &g)?;
    let mut report = GradReport::default();

    let num =
        numerical_gradient(x.data(), STEP, |v| project(&dense_forward(&with_data(x.dims(), v), &layer).unwrap(), &g));
    report.record(grads.grad_x.data(), &num, &vec![false; num.len()]);

    let num = numerical_gradient(layer.weights.data(), STEP, |v| {
        let l = Dense { weights: with_data(layer.weights.dims(), v), bias: layer.bias.clone() };
        project(&dense_forward(&x, &l).unwrap(), &g)
    });
    report.record(grads.grad_weights.data(), &num, &vec![false; num.len()]);

    let num = numerical_gradient(layer.bias.data(), STEP, |v| {
        let l = Dense { weights: layer.weights.clone(), bias: with_data(layer.bias.dims(), v) };
        project(&dense_forward(&x, &l).unwrap(), &g)
    });
    report.record(grads.grad_bias.data(), &num, &vec![false; num.len()]);
    Ok(report)
}

pub fn check_relu(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_nhwc(&mut rng, false);
    let x = random(&dims, &mut rng);
    let g = random(&dims, &mut rng);
    let analytic = relu_backward(&x, &g)?;
    let num = numerical_gradient(x.data(), STEP, |v| project(&relu_forward(&with_data(&dims, v)), &g));
    let excluded: Vec<bool> = x.data().iter().map(|v| v.abs() <= 2.0 * STEP).collect();
    let mut report = GradReport::default();
    report.record(analytic.data(), &num, &excluded);
    Ok(report)
}

pub fn check_maxpool(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_nhwc(&mut rng, true);
    let x = random(&dims, &mut rng);
    let (y, idx) = maxpool2x2_forward(&x)?;
    let g = random(y.dims(), &mut rng);
    let analytic = maxpool2x2_backward(&idx, &g)?;
    let num = numerical_gradient(x.data(), STEP, |v| project(&maxpool2x2_forward(&with_data(&dims, v)).unwrap().0, &g));
    // Exclude every element of a window whose top two values are within a
    // perturbation of each other.
    let [b, h, w, c] = dims;
    let mut excluded = vec![false; x.numel()];
    for n in 0..b {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let members: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch)
                        .collect();
                    let mut vals: Vec<f64> = members.iter().map(|&i| x.data()[i]).collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] <= 2.0 * STEP {
                        for &i in &members {
                            excluded[i] = true;
                        }
                    }
                }
            }
        }
    }
    let mut report = GradReport::default();
    report.record(analytic.data(), &num, &excluded);
    Ok(report)
}

/// Combined softmax + mean cross-entropy, gradient with respect to logits.
pub fn check_softmax_cross_entropy(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=8);
    let k = 4;
    let logits = random(&[b, k], &mut rng).map(|v| v * 3.0);
    let mut labels = vec![0.0; b * k];
    for row in 0..b {
        labels[row * k + rng.gen_range(0..k)] = 1.0;
    }
    let one_hot = with_data(&[b, k], &labels);
    let probs = softmax(&logits)?;
    let analytic = softmax_cross_entropy_backward(&probs, &one_hot)?;
    let num = numerical_gradient(logits.data(), STEP, |v| {
        cross_entropy(&softmax(&with_data(&[b, k], v)).unwrap(), &one_hot).unwrap()
    });
    let mut report = GradReport::default();
    report.record(analytic.data(), &num, &vec![false; num.len()]);
    Ok(report)
}

/// Dropout with rate 0 in train mode and rate 0.5 in inference mode: both
/// are the identity and must back-propagate as such.
pub fn check_dropout_off(seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_nhwc(&mut rng, false);
    let x = random(&dims, &mut rng);
    let g = random(&dims, &mut rng);
    let mut report = GradReport::default();
    for (rate, mode) in [(0.0, Mode::Train), (0.5, Mode::Infer)] {
        let spec = DropoutSpec::new(rate)?;
        let mut layer_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (_, mask) = dropout_forward(&x, spec, mode, &mut layer_rng)?;
        let analytic = dropout_backward(mask.as_ref(), &g)?;
        let num = numerical_gradient(x.data(), STEP, |v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            project(&dropout_forward(&with_data(&dims, v), spec, mode, &mut r).unwrap().0, &g)
        });
        report.record(analytic.data(), &num, &vec![false; num.len()]);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_gradient_of_quadratic() {
        let g = numerical_gradient(&[1.0, -2.0, 0.5], 1e-3, |v| v.iter().map(|x| x * x).sum());
        for (got, want) in g.iter().zip([2.0, -4.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn every_layer_matches_finite_differences() {
        type Check = fn(u64) -> Result<GradReport, NnError>;
        let checks: [(&str, Check); 6] = [
            ("conv", check_conv),
            ("dense", check_dense),
            ("relu", check_relu),
            ("maxpool", check_maxpool),
            ("softmax_ce", check_softmax_cross_entropy),
            ("dropout_off", check_dropout_off),
        ];
        for (name, check) in checks {
            for seed in 0..3 {
                let r = check(seed).unwrap();
                assert!(r.checked > 0, "{name}");
                assert_eq!(r.passed, r.checked, "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-6) < REL_TOLERANCE);
        assert!(relative_error(1.0, 1.1) > REL_TOLERANCE);
    }
}
