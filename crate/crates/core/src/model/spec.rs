use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

/// One entry of a declarative layer list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { filters: usize, activation: Activation },
    Maxpool2x2,
    Flatten,
    Dense { units: usize, activation: Activation },
    Dropout { rate: f32 },
}

impl LayerSpec {
    pub fn conv(filters: usize) -> Self {
        LayerSpec::Conv3x3 { filters, activation: Activation::Relu }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, activation: Activation::Relu }
    }

    pub fn output() -> Self {
        LayerSpec::Dense { units: NUM_CLASSES, activation: Activation::Softmax }
    }

    pub fn dropout(rate: f32) -> Self {
        LayerSpec::Dropout { rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Height, width, channels.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Per-layer shape information produced by [`ModelSpec::infer_shapes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    /// Output dims without the batch axis.
    pub output: Vec<usize>,
    /// Parameter tensor shapes (weights first, then bias); empty for
    /// parameter-free layers.
    pub params: Vec<Vec<usize>>,
}

fn checked_product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl ModelSpec {
    /// Walk the layer list, checking each layer against the incoming shape.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>, ModelError> {
        let err = |i: usize, msg: String| ModelError::Spec(format!("{}: layer {i}: {msg}", self.name));
        if self.input.contains(&0) {
            return Err(ModelError::Spec(format!("{}: input dims must be positive, got {:?}", self.name, self.input)));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Spec(format!("{}: empty layer list", self.name)));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let params = match *layer {
                LayerSpec::Conv3x3 { filters, activation } => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(err(i, format!("conv3x3 needs a [H, W, C] input, got {shape:?}")));
                    };
                    if filters == 0 {
                        return Err(err(i, "conv3x3 needs at least one filter".into()));
                    }
                    if activation == Activation::Softmax {
                        return Err(err(i, "softmax is only allowed on the output dense layer".into()));
                    }
                    shape = vec![h, w, filters];
                    vec![vec![filters, 3, 3, c], vec![filters]]
                }
                LayerSpec::Maxpool2x2 => {
                    let &[h, w, c] = shape.as_slice() else {
                        return Err(err(i, format!("maxpool2x2 needs a [H, W, C] input, got {shape:?}")));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(err(i, format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
                    }
                    shape = vec![h / 2, w / 2, c];
                    Vec::new()
                }
                LayerSpec::Flatten => {
                    let n = checked_product(&shape).ok_or_else(|| err(i, format!("flatten of {shape:?} overflows")))?;
                    shape = vec![n];
                    Vec::new()
                }
                LayerSpec::Dense { units, .. } => {
                    let &[n] = shape.as_slice() else {
                        return Err(err(i, format!("dense needs a flat input, got {shape:?}")));
                    };
                    if units == 0 {
                        return Err(err(i, "dense needs at least one unit".into()));
                    }
                    shape = vec![units];
                    vec![vec![n, units], vec![units]]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(i, format!("dropout rate must lie in [0, 1), got {rate}")));
                    }
                    Vec::new()
                }
            };
            if params.iter().any(|p| checked_product(p).is_none()) {
                return Err(err(i, "parameter tensor size overflows".into()));
            }
            out.push(LayerShape { output: shape.clone(), params });
        }
        let softmaxes: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { activation: Activation::Softmax, .. }))
            .map(|(i, _)| i)
            .collect();
        let last = self.layers.len() - 1;
        match (softmaxes.as_slice(), self.layers[last]) {
            ([only], LayerSpec::Dense { units, .. }) if *only == last && units == NUM_CLASSES => Ok(out),
            _ => Err(ModelError::Spec(format!(
                "{}: the final layer must be the only softmax layer, dense with {NUM_CLASSES} units",
                self.name
            ))),
        }
    }

    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self.infer_shapes()?.iter().flat_map(|l| l.params.iter().map(|p| p.iter().product::<usize>())).sum())
    }

    pub fn count(&self, pred: impl Fn(&LayerSpec) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }

    pub fn maxpool_layers(&self) -> usize {
        self.count(|l| matches!(l, LayerSpec::Maxpool2x2))
    }

    pub fn dense_layers(&self) -> usize {
        self.count(|l| matches!(l, LayerSpec::Dense { .. }))
    }
}
