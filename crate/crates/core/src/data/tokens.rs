use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Seed of the frozen class vocabulary. Models and the synthetic generator
/// both read tokens from it, so a class name maps to the same vector in
/// every run.
pub const VOCABULARY_SEED: u64 = 0x7e47_0cab;

/// Frozen unit-norm embedding per class name, one row per class.
///
/// Each row depends only on `(seed, name)`, so renaming or reordering other
/// classes never changes it.
pub fn class_token_embeddings(classes: &[String], dim: usize, seed: u64) -> Result<Tensor> {
    if classes.len() < 2 {
        return Err(Error::contract("class tokens need k >= 2"));
    }
    if dim == 0 {
        return Err(Error::contract("class tokens need D >= 1"));
    }
    let mut seen = HashSet::new();
    let mut data = Vec::with_capacity(classes.len() * dim);
    for name in classes {
        if !seen.insert(name.as_str()) {
            return Err(Error::contract(format!("duplicate class name {name:?}")));
        }
        data.extend(token_for(name, dim, seed));
    }
    Tensor::matrix(classes.len(), dim, data)
}

fn token_for(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &format!("class-token/{name}"));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
