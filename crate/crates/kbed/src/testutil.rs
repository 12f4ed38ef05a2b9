//! Shared helpers for unit tests.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::ComplexField;
use crate::mask::{MaskField, MaskMode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> ComplexField {
    let re = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
    let im = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
    ComplexField::from_parts(re, im).unwrap()
}

pub fn random_unit_plane<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

pub fn random_hard_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> MaskField {
    let w = Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    });
    MaskField::new(w, MaskMode::Hard).unwrap()
}

pub fn random_state<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}
