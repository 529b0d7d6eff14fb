use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Glorot-uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
///
/// A 1-D shape `[n]` is treated as a `1×n` row.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let (fan_in, fan_out) = match *shape {
        [n] => (1, n),
        [rows, cols] => (cols, rows),
        _ => {
            return Err(Error::Shape(format!(
                "xavier_init needs a 1-D or 2-D shape, got {shape:?}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_with(shape, fan_in, fan_out, &mut rng)
}

pub(crate) fn xavier_with(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let bound = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
