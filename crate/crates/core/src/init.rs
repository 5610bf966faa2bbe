use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)); `rows` is fan-out, `cols` fan-in.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-bound..bound))
}
