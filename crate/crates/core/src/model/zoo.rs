//! The proposed network and the four comparison variants.

use crate::image::INPUT_SIZE;

use super::spec::{LayerSpec, ModelSpec};
use super::ModelError;

pub const VARIANTS: std::ops::RangeInclusive<usize> = 1..=5;

fn conv_stack(filters: &[usize]) -> Vec<LayerSpec> {
    filters.iter().flat_map(|&f| [LayerSpec::conv(f), LayerSpec::Maxpool2x2]).collect()
}

/// conv32, conv64, conv128, conv256 each followed by a 2x2 pool, then
/// dropout 0.5, flatten, dense128, dropout 0.25 and the softmax output.
pub fn proposed_spec() -> ModelSpec {
    let mut layers = conv_stack(&[32, 64, 128, 256]);
    layers.extend([
        LayerSpec::dropout(0.5),
        LayerSpec::Flatten,
        LayerSpec::dense(128),
        LayerSpec::dropout(0.25),
        LayerSpec::output(),
    ]);
    ModelSpec { name: "proposed".into(), input: [INPUT_SIZE, INPUT_SIZE, 3], layers }
}

/// Comparison model `k` (1 to 5). Model 5 is the proposed network.
pub fn variant_spec(k: usize) -> Result<ModelSpec, ModelError> {
    let (filters, hidden): (&[usize], &[usize]) = match k {
        1 => (&[16, 32, 64, 128, 256], &[256, 128]),
        2 => (&[32, 64, 128], &[]),
        3 => (&[32, 64, 128, 256], &[]),
        4 => (&[32, 64], &[]),
        5 => return Ok(ModelSpec { name: "model5".into(), ..proposed_spec() }),
        _ => return Err(ModelError::Spec(format!("model variant must be 1..=5, got {k}"))),
    };
    let mut layers = conv_stack(filters);
    layers.push(LayerSpec::Flatten);
    layers.extend(hidden.iter().map(|&u| LayerSpec::dense(u)));
    layers.push(LayerSpec::output());
    Ok(ModelSpec { name: format!("model{k}"), input: [INPUT_SIZE, INPUT_SIZE, 3], layers })
}
