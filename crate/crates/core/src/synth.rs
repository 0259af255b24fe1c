//! Seeded synthetic datasets with generating labels.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Isotropic Gaussian blobs, `n` points dealt round-robin over `centres`.
///
/// Labels are `c0`, `c1`, ... by centre.
pub fn gaussian_blobs(n: usize, centres: &[Vec<f64>], sigma: f64, seed: u64) -> Result<Dataset> {
    let d = centres.first().map_or(0, Vec::len);
    if centres.is_empty() || d == 0 || centres.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidConfig("centres must be non-empty with a common dimension".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig("sigma must be positive".into()));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let c = j % centres.len();
        for (x, m) in points.row_mut(j).iter_mut().zip(&centres[c]) {
            *x = m + noise.sample(&mut rng);
        }
        labels.push(format!("c{c}"));
    }
    Dataset::new(points, Some(labels))
}

/// Four unit-variance Gaussians at `(±a, 0)` and `(0, ±a)`.
///
/// The three ways of pairing the blobs into two groups (east/west against
/// north/south, and the two diagonal splits) are all representable by two
/// axis-aligned components with similar likelihood.
pub fn four_gaussians(n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    let a = separation;
    gaussian_blobs(n, &[vec![a, 0.0], vec![0.0, a], vec![-a, 0.0], vec![0.0, -a]], 1.0, seed)
}

pub const DEFAULT_SEPARATION: f64 = 3.0;

/// Four unit-variance blobs in 2-D: three far apart and one pair `gap` units apart.
pub fn overlapping_pair(n: usize, gap: f64, seed: u64) -> Result<Dataset> {
    gaussian_blobs(
        n,
        &[vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 10.0], vec![10.0 + gap, 10.0]],
        1.0,
        seed,
    )
}

/// `k` blobs in `d` dimensions with centres drawn from `N(0, spread²)`.
pub fn random_blobs(n: usize, d: usize, k: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidConfig("k and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    gaussian_blobs(n, &centres, 1.0, rng.random())
}
