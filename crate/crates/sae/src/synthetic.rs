//! Planted-dictionary datasets with a known sparse generative structure.

use patchlab_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SaeError};

pub struct PlantedData {
    /// `[n_rows, dim]`
    pub rows: Tensor<f32>,
    /// Orthonormal generating directions.
    pub directions: Vec<Vec<f32>>,
}

/// Rows that are positive combinations of `active` out of `n_dirs`
/// orthonormal directions in `dim` dimensions, with coefficients in [1, 3).
pub fn planted_dictionary(
    dim: usize,
    n_dirs: usize,
    n_rows: usize,
    active: usize,
    seed: u64,
) -> Result<PlantedData> {
    if n_dirs == 0 || n_dirs > dim {
        return Err(SaeError::Invalid(format!(
            "cannot fit {n_dirs} orthogonal directions in {dim} dims"
        )));
    }
    if active == 0 || active > n_dirs {
        return Err(SaeError::Invalid(format!(
            "active = {active} outside 1..={n_dirs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n_dirs);
    while directions.len() < n_dirs {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &directions {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            directions.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut data = vec![0.0f32; n_rows * dim];
    for row in data.chunks_exact_mut(dim) {
        for j in sample(&mut rng, n_dirs, active) {
            let c: f64 = rng.random_range(1.0..3.0);
            for (r, u) in row.iter_mut().zip(&directions[j]) {
                *r += (c * u) as f32;
            }
        }
    }
    Ok(PlantedData {
        rows: Tensor::new(vec![n_rows, dim], data)?,
        directions: directions
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect(),
    })
}
