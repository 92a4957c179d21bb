use crate::error::{Error, Result};

use super::array::{numel, Tensor};
use super::rng::Rng;

/// Fan-in / fan-out for a weight laid out as `[.., in, out]`; leading dims
/// count as receptive field.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Contract(format!(
            "xavier init needs rank >= 2, got shape {shape:?}"
        )));
    }
    let r = shape.len();
    let field = numel(&shape[..r - 2]);
    Ok((shape[r - 2] * field, shape[r - 1] * field))
}

/// Xavier/Glorot uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let (fan_in, fan_out) = fans(shape)?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..numel(shape)).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data)
}
