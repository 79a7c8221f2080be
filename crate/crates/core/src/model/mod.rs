//! Declarative architectures, instantiated models and the `.ccur` file
//! format.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CarrotClass;
use crate::image::{preprocess, FuzzyFilterConfig, ImageError, RgbImage};
use crate::nn::{
    conv2d_backward, conv2d_forward, conv2d_param_grads, dense_backward, dense_forward, dropout_backward,
    dropout_forward, flatten, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, softmax,
    softmax_cross_entropy_backward, Conv2d, Dense, DropoutSpec, Mode, NnError, PoolIndices,
};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

mod format;
mod spec;
mod zoo;

pub use format::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use spec::{Activation, LayerShape, LayerSpec, ModelSpec};
pub use zoo::{proposed_spec, variant_spec, VARIANTS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("bad magic: expected \"CCUR\", found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated model file: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid model header: {0}")]
    Header(String),
    #[error("tensor '{name}' has shape {found:?} but the layer spec requires {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Nn(NnError::Shape(e))
    }
}

/// Provenance recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub epochs_trained: usize,
    /// 1-based epoch whose weights were kept; 0 for untrained weights.
    pub best_epoch: usize,
    pub corpus_size: usize,
    pub fuzzy: FuzzyFilterConfig,
}

impl ModelMetadata {
    pub fn new(seed: u64) -> Self {
        Self { seed, epochs_trained: 0, best_epoch: 0, corpus_size: 0, fuzzy: FuzzyFilterConfig::default() }
    }
}

/// Weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(Conv2d),
    Dense(Dense),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    class_keys: Vec<String>,
    params: Vec<LayerParams>,
    pub metadata: ModelMetadata,
}

/// Gradients for every parameter tensor, in [`Model::tensors`] order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Tensor>);

/// Intermediate values kept by a training forward pass.
pub struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Tensor>,
    pools: Vec<Option<PoolIndices>>,
    masks: Vec<Option<Tensor>>,
}

impl Trace {
    pub fn probabilities(&self) -> &Tensor {
        self.acts.last().expect("trace holds the network output")
    }
}

const INIT_STREAM: u64 = 0x1417;

fn uniform(dims: &[usize], limit: f64, rng: &mut seed::Rng) -> Result<Tensor, ModelError> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Ok(Tensor::from_vec(dims.to_vec(), data)?)
}

impl Model {
    /// Seeded initialisation: He-uniform (`sqrt(6 / fan_in)`) for relu
    /// layers, Glorot-uniform (`sqrt(6 / (fan_in + fan_out))`) otherwise,
    /// zero biases. Layer `i` draws from its own stream.
    pub fn init(spec: ModelSpec, seed_value: u64) -> Result<Self, ModelError> {
        let shapes = spec.infer_shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let mut rng = seed::rng(seed_value, &[INIT_STREAM, i as u64]);
            let p = match *layer {
                LayerSpec::Conv3x3 { activation, .. } | LayerSpec::Dense { activation, .. } => {
                    let w = &shape.params[0];
                    let (fan_in, fan_out) = match *w.as_slice() {
                        [k, kh, kw, c] => (kh * kw * c, kh * kw * k),
                        [i, o] => (i, o),
                        _ => unreachable!("parameter shapes come from shape inference"),
                    };
                    let limit = match activation {
                        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    };
                    let weights = uniform(w, limit, &mut rng)?;
                    let bias = Tensor::zeros(shape.params[1].clone())?;
                    if matches!(layer, LayerSpec::Conv3x3 { .. }) {
                        LayerParams::Conv(Conv2d::new(weights, bias)?)
                    } else {
                        LayerParams::Dense(Dense::new(weights, bias)?)
                    }
                }
                _ => LayerParams::None,
            };
            params.push(p);
        }
        Ok(Self { spec, class_keys: CarrotClass::keys(), params, metadata: ModelMetadata::new(seed_value) })
    }

    /// Assemble a model from parameter tensors in [`Model::tensors`] order.
    pub fn from_parts(
        spec: ModelSpec,
        class_keys: Vec<String>,
        metadata: ModelMetadata,
        tensors: Vec<Tensor>,
    ) -> Result<Self, ModelError> {
        let shapes = spec.infer_shapes()?;
        if class_keys != CarrotClass::keys() {
            return Err(ModelError::Header(format!(
                "class keys must be {:?} in that order, got {class_keys:?}",
                CarrotClass::keys()
            )));
        }
        let expected: usize = shapes.iter().map(|s| s.params.len()).sum();
        if tensors.len() != expected {
            return Err(ModelError::Header(format!("expected {expected} tensors, got {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut params = Vec::with_capacity(shapes.len());
        for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let mut take = |k: usize| {
                let t = it.next().expect("tensor count checked");
                if t.dims() != shape.params[k].as_slice() {
                    return Err(ModelError::ShapeMismatch {
                        name: tensor_name(i, layer, k),
                        expected: shape.params[k].clone(),
                        found: t.dims().to_vec(),
                    });
                }
                Ok(t)
            };
            params.push(match layer {
                LayerSpec::Conv3x3 { .. } => LayerParams::Conv(Conv2d::new(take(0)?, take(1)?)?),
                LayerSpec::Dense { .. } => LayerParams::Dense(Dense::new(take(0)?, take(1)?)?),
                _ => LayerParams::None,
            });
        }
        Ok(Self { spec, class_keys, params, metadata })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn class_keys(&self) -> &[String] {
        &self.class_keys
    }

    pub fn input_size(&self) -> usize {
        self.spec.input[0]
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.params
    }

    /// Named parameter tensors in a fixed order: per layer, weights then bias.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            match p {
                LayerParams::Conv(c) => {
                    out.push((tensor_name(i, layer, 0), &c.filters));
                    out.push((tensor_name(i, layer, 1), &c.bias));
                }
                LayerParams::Dense(d) => {
                    out.push((tensor_name(i, layer, 0), &d.weights));
                    out.push((tensor_name(i, layer, 1), &d.bias));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Mutable access in [`Model::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (layer, p)) in self.spec.layers.iter().zip(self.params.iter_mut()).enumerate() {
            match p {
                LayerParams::Conv(c) => {
                    out.push((tensor_name(i, layer, 0), &mut c.filters));
                    out.push((tensor_name(i, layer, 1), &mut c.bias));
                }
                LayerParams::Dense(d) => {
                    out.push((tensor_name(i, layer, 0), &mut d.weights));
                    out.push((tensor_name(i, layer, 1), &mut d.bias));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let [h, w, c] = self.spec.input;
        match *x.dims() {
            [_, xh, xw, xc] if (xh, xw, xc) == (h, w, c) => Ok(()),
            _ => Err(ModelError::Nn(NnError::Shape(TensorError::Mismatch {
                op: "model input",
                left: x.dims().to_vec(),
                right: vec![0, h, w, c],
            }))),
        }
    }

    fn run(&self, x: &Tensor, mode: Mode, rng: &mut seed::Rng, keep: bool) -> Result<Trace, ModelError> {
        self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut trace = Trace {
            acts: Vec::with_capacity(if keep { n + 1 } else { 1 }),
            pools: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut cur = x.clone();
        for (layer, p) in self.spec.layers.iter().zip(&self.params) {
            let mut pool = None;
            let mut mask = None;
            let next = match (layer, p) {
                (LayerSpec::Conv3x3 { activation, .. }, LayerParams::Conv(c)) => {
                    activate(conv2d_forward(&cur, c)?, *activation)?
                }
                (LayerSpec::Dense { activation, .. }, LayerParams::Dense(d)) => {
                    activate(dense_forward(&cur, d)?, *activation)?
                }
                (LayerSpec::Maxpool2x2, _) => {
                    let (y, idx) = maxpool2x2_forward(&cur)?;
                    pool = Some(idx);
                    y
                }
                (LayerSpec::Flatten, _) => flatten(cur.clone())?,
                (LayerSpec::Dropout { rate }, _) => {
                    let (y, m) = dropout_forward(&cur, DropoutSpec::new(*rate)?, mode, rng)?;
                    mask = m;
                    y
                }
                _ => unreachable!("parameters are built from the layer spec"),
            };
            if keep {
                trace.acts.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
            trace.pools.push(pool);
            trace.masks.push(mask);
        }
        trace.acts.push(cur);
        Ok(trace)
    }

    /// Training-mode forward pass keeping every intermediate for
    /// [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor, rng: &mut seed::Rng) -> Result<Trace, ModelError> {
        self.run(x, Mode::Train, rng, true)
    }

    /// Inference: dropout is the identity and the result is `[B, 4]`
    /// class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut unused = seed::rng(0, &[]);
        let trace = self.run(x, Mode::Infer, &mut unused, false)?;
        Ok(trace.acts.into_iter().next_back().expect("output"))
    }

    /// Class probabilities for raw decoded images, applying the same fuzzy
    /// filter, resize and scaling used in training.
    pub fn classify(&self, images: &[&RgbImage]) -> Result<Tensor, ModelError> {
        let size = self.input_size();
        let mut data = Vec::with_capacity(images.len() * size * size * 3);
        for img in images {
            data.extend_from_slice(preprocess(img, &self.metadata.fuzzy, size)?.data());
        }
        self.predict(&Tensor::from_vec([images.len(), size, size, 3], data)?)
    }

    /// Gradients of the mean cross-entropy of `trace`'s output against
    /// `one_hot`.
    pub fn backward(&self, trace: &Trace, one_hot: &Tensor) -> Result<Gradients, ModelError> {
        let n = self.spec.layers.len();
        if trace.acts.len() != n + 1 {
            return Err(ModelError::Nn(NnError::Argument("trace was not recorded for training".into())));
        }
        let mut grad = softmax_cross_entropy_backward(trace.probabilities(), one_hot)?;
        let mut grads: Vec<Tensor> = Vec::new();
        for i in (0..n).rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let need_input = i > 0;
            match (&self.spec.layers[i], &self.params[i]) {
                (LayerSpec::Conv3x3 { activation, .. }, LayerParams::Conv(c)) => {
                    let g = deactivate(output, grad, *activation, i == n - 1)?;
                    if need_input {
                        let r = conv2d_backward(input, c, &g)?;
                        grads.extend([r.grad_bias, r.grad_filters]);
                        grad = r.grad_x;
                    } else {
                        let (gf, gb) = conv2d_param_grads(input, c, &g)?;
                        grads.extend([gb, gf]);
                        grad = g;
                    }
                }
                (LayerSpec::Dense { activation, .. }, LayerParams::Dense(d)) => {
                    let g = deactivate(output, grad, *activation, i == n - 1)?;
                    let r = dense_backward(input, d, &g)?;
                    grads.extend([r.grad_bias, r.grad_weights]);
                    grad = r.grad_x;
                }
                (LayerSpec::Maxpool2x2, _) => {
                    let idx = trace.pools[i].as_ref().expect("pool indices recorded");
                    grad = maxpool2x2_backward(idx, &grad)?;
                }
                (LayerSpec::Flatten, _) => grad = grad.reshape(input.dims().to_vec())?,
                (LayerSpec::Dropout { .. }, _) => grad = dropout_backward(trace.masks[i].as_ref(), &grad)?,
                _ => unreachable!("parameters are built from the layer spec"),
            }
        }
        grads.reverse();
        Ok(Gradients(grads))
    }
}

fn tensor_name(i: usize, layer: &LayerSpec, k: usize) -> String {
    let what = match (layer, k) {
        (LayerSpec::Conv3x3 { .. }, 0) => "filters",
        (LayerSpec::Dense { .. }, 0) => "weights",
        _ => "bias",
    };
    format!("layer{i}.{what}")
}

fn activate(x: Tensor, a: Activation) -> Result<Tensor, NnError> {
    match a {
        Activation::Relu => Ok(relu_forward(&x)),
        Activation::Softmax => softmax(&x),
        Activation::None => Ok(x),
    }
}

/// Map an upstream gradient through the layer's activation. The output
/// softmax is skipped because the loss gradient already targets the logits.
fn deactivate(output: &Tensor, upstream: Tensor, a: Activation, is_output: bool) -> Result<Tensor, NnError> {
    match a {
        Activation::Relu => relu_backward(output, &upstream),
        Activation::Softmax if is_output => Ok(upstream),
        Activation::Softmax => Err(NnError::Argument("softmax is only supported on the output layer".into())),
        Activation::None => Ok(upstream),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input: [4, 4, 2],
            layers: vec![
                LayerSpec::conv(3),
                LayerSpec::Maxpool2x2,
                LayerSpec::dropout(0.0),
                LayerSpec::Flatten,
                LayerSpec::dense(5),
                LayerSpec::output(),
            ],
        }
    }

    fn random_input(dims: &[usize], s: u64) -> Tensor {
        let mut rng = seed::rng(s, &[]);
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::init(tiny_spec(), 3).unwrap();
        assert_eq!(a, Model::init(tiny_spec(), 3).unwrap());
        assert_ne!(a, Model::init(tiny_spec(), 4).unwrap());
        let LayerParams::Conv(c) = &a.layer_params()[0] else { panic!() };
        let limit = (6.0f32 / 18.0).sqrt();
        assert!(c.filters.data().iter().all(|v| v.abs() <= limit));
        assert!(c.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.tensors().len(), 6);
    }

    #[test]
    fn predict_rows_are_distributions() {
        let m = Model::init(tiny_spec(), 1).unwrap();
        let p = m.predict(&random_input(&[3, 4, 4, 2], 9)).unwrap();
        assert_eq!(p.dims(), [3, 4]);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p, m.predict(&random_input(&[3, 4, 4, 2], 9)).unwrap());
        assert!(m.predict(&random_input(&[1, 4, 4, 3], 9)).is_err());
    }

    /// Whole-network gradient against central differences of the loss, on
    /// a handful of parameters per tensor.
    #[test]
    fn backward_matches_finite_differences() {
        let mut model = Model::init(tiny_spec(), 5).unwrap();
        let x = random_input(&[2, 4, 4, 2], 6);
        let y = crate::dataset::one_hot(&[CarrotClass::Healthy, CarrotClass::LeafBlight]);
        let mut rng = seed::rng(0, &[]);
        let trace = model.forward_train(&x, &mut rng).unwrap();
        let grads = model.backward(&trace, &y).unwrap();
        let loss = |m: &Model| -> f64 { cross_entropy(&m.predict(&x).unwrap(), &y).unwrap() as f64 };
        let h = 1e-2f32;
        let count = model.tensors().len();
        for t in 0..count {
            let n = model.tensors()[t].1.numel();
            for j in (0..n).step_by((n / 4).max(1)) {
                let orig = model.tensors()[t].1.data()[j];
                model.tensors_mut()[t].1.data_mut()[j] = orig + h;
                let up = loss(&model);
                model.tensors_mut()[t].1.data_mut()[j] = orig - h;
                let down = loss(&model);
                model.tensors_mut()[t].1.data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h as f64);
                let analytic = grads.0[t].data()[j] as f64;
                assert!((numeric - analytic).abs() < 2e-3, "tensor {t} index {j}: {analytic} vs {numeric}");
            }
        }
    }
}
