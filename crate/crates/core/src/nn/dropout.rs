use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

use super::{mismatch, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f32,
}

impl DropoutSpec {
    pub fn new(rate: f32) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Argument(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        Ok(Self { rate })
    }
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// returned mask holds the per-element multiplier. Inference is the identity
/// and returns no mask.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    spec: DropoutSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Tensor<T>>), NnError> {
    let spec = DropoutSpec::new(spec.rate)?;
    if mode == Mode::Infer || spec.rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - spec.rate as f64));
    let p = spec.rate as f64;
    let mask: Vec<T> = (0..x.numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    let mask = Tensor::from_vec(x.dims().to_vec(), mask)?;
    Ok((x.mul(&mask)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&Tensor<T>>, upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    match mask {
        None => Ok(upstream.clone()),
        Some(m) if m.dims() == upstream.dims() => Ok(upstream.mul(m)?),
        Some(m) => Err(mismatch("dropout upstream", upstream.dims(), m.dims())),
    }
}
