//! Initial Gaussians from a point cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{Gaussian, Vec3};

pub const INIT_OPACITY: f64 = 0.1;
/// Standard deviation of the random initial appearance features.
pub const INIT_FEATURE_STD: f64 = 0.1;
const NEIGHBORS: usize = 3;

/// Mean distance of each point to its three nearest neighbours, floored at
/// `1e-7`. Brute force, quadratic in the point count.
pub fn neighbor_scales(points: &[Vec3]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; NEIGHBORS];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[NEIGHBORS - 1] {
                    best[NEIGHBORS - 1] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.iter().filter(|d| d.is_finite()).map(|d| d.sqrt()).collect();
            if found.is_empty() {
                1e-2
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).max(1e-7)
            }
        })
        .collect()
}

/// Isotropic Gaussians at `points`, sized by [`neighbor_scales`], with
/// diffuse `colors` (grey when absent) and random features.
pub fn gaussians_from_points(points: &[Vec3], colors: Option<&[[f64; 3]]>, seed: u64) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_FEATURE_STD).expect("valid std");
    let scales = neighbor_scales(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = Gaussian::new(*p, scales[i], INIT_OPACITY);
            if let Some(c) = colors {
                for ch in 0..3 {
                    g.sh[0][ch] = (c[i][ch] - 0.5) / crate::appearance::SH_C0;
                }
            }
            for f in &mut g.feature {
                *f = normal.sample(&mut rng);
            }
            g
        })
        .collect()
}

/// Uniform points in the cube `[-half, half]³`.
pub fn random_points(n: usize, half: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

/// Replaces every appearance feature with a fresh `N(0, INIT_FEATURE_STD)` draw.
pub fn randomize_features(gaussians: &mut [Gaussian], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_FEATURE_STD).expect("valid std");
    for g in gaussians {
        for f in &mut g.feature {
            *f = normal.sample(&mut rng);
        }
    }
}

/// Keeps geometry and opacity, replaces appearance with grey SH and random features.
pub fn reset_appearance(gaussians: &mut [Gaussian], seed: u64) {
    for g in gaussians.iter_mut() {
        g.sh = [[0.0; 3]; crate::geometry::SH_COEFFS];
    }
    randomize_features(gaussians, seed);
}
