//! Weight initializers.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, suited to relu layers.
pub fn he_uniform<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
}
