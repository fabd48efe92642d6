//! Vendi score of a set of feature vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::SearchRng;

/// `exp(-Σ λ ln λ)` over the eigenvalues of a Gram matrix scaled to unit
/// trace.
pub fn vendi_from_gram(gram: &DMatrix<f64>) -> Result<f64> {
    let trace = gram.trace();
    if !(trace > 0.0) {
        return Err(Error::InvalidData("Gram matrix has zero trace".into()));
    }
    let eig = SymmetricEigen::new(gram / trace);
    let h: f64 = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l > 1e-15)
        .map(|&l| -l * l.ln())
        .sum();
    Ok(h.exp())
}

/// Vendi score of unit-normalized vectors. When the dimension exceeds
/// `proj_dim`, vectors are first mapped through a seeded Gaussian random
/// projection to `proj_dim` coordinates. Zero vectors are dropped.
pub fn g_vendi(vectors: &[Vec<f64>], proj_dim: usize, seed: u64) -> Result<f64> {
    let dim = vectors
        .first()
        .ok_or_else(|| Error::InvalidData("no vectors".into()))?
        .len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: v.len(),
        });
    }
    if proj_dim == 0 {
        return Err(Error::config("proj_dim", "must be at least 1"));
    }
    let mut rows = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            log::warn!("dropping vector {i}: zero or non-finite norm");
            continue;
        }
        rows.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("every vector was zero".into()));
    }
    let n = rows.len();
    let mut x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    if dim > proj_dim {
        let mut rng = SearchRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (proj_dim as f64).sqrt()).expect("finite sigma");
        let p = DMatrix::from_fn(dim, proj_dim, |_, _| normal.sample(&mut rng));
        x *= p;
    }
    let gram = &x * x.transpose();
    vendi_from_gram(&gram)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_score_one() {
        let v = vec![vec![1.0, 2.0, 3.0]; 6];
        assert!((g_vendi(&v, 8, 1).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthonormal_vectors_score_n() {
        for n in [1, 2, 5, 16, 32] {
            let v: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 3.0 } else { 0.0 }).collect())
                .collect();
            let s = g_vendi(&v, 4 * n, 7).unwrap();
            assert!((s - n as f64).abs() / (n as f64) < 1e-9, "{n}: {s}");
        }
    }

    #[test]
    fn zero_vectors_are_dropped() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
        assert!((g_vendi(&v, 4, 0).unwrap() - 2.0).abs() < 1e-9);
        assert!(g_vendi(&[vec![0.0, 0.0]], 4, 0).is_err());
    }

    #[test]
    fn projection_is_seeded() {
        let v: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                (0..40)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0)
                    .collect()
            })
            .collect();
        assert_eq!(g_vendi(&v, 8, 3).unwrap(), g_vendi(&v, 8, 3).unwrap());
    }
}
