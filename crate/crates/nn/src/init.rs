use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal conv weight `(cout, cin, k, k)`.
pub fn kaiming_conv<R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    normal(rng, &[cout, cin, k, k], std)
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}
