use rand::Rng;

use crate::{Scalar, TensorData};

/// Xavier-uniform initialization for a `fan_in x fan_out` weight matrix.
pub fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> TensorData<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::cast(rng.gen_range(-limit..limit)))
        .collect();
    TensorData::matrix(fan_in, fan_out, data).expect("xavier shape")
}
