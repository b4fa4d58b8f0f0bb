//! Weight initializers. All draws go through the caller's RNG so that model
//! construction is reproducible from a seed.

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_shape_simple_fn(IxDyn(shape), || T::from_f64_lossy(dist.sample(rng)))
}

/// He-normal for a conv weight `[O, C, K, K]` (fan-in = C*K*K).
pub fn kaiming_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> ArrayD<T> {
    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
    normal(shape, gain / (fan_in as f64).sqrt(), rng)
}

/// Random unit vector, used to seed power iteration.
pub fn unit_vector<T: Real, R: Rng + ?Sized>(len: usize, rng: &mut R) -> ArrayD<T> {
    let v: ArrayD<f64> = normal(&[len], 1.0, rng);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.mapv(|x| T::from_f64_lossy(x / norm))
}
