//! Synthetic uniform samples on the unit sphere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::nn::standard_normal;

/// Draw `n` points uniformly on the unit sphere in `dim` dimensions
/// (normalized Gaussians). Rows have unit Euclidean norm.
pub fn sample_sphere(dim: usize, n: usize, seed: u64) -> Dataset {
    assert!(dim >= 2, "sphere needs dim >= 2");
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let start = points.len();
        loop {
            points.truncate(start);
            let mut norm2 = 0.0;
            for _ in 0..dim {
                let v = standard_normal(&mut rng);
                norm2 += v * v;
                points.push(v);
            }
            if norm2 > 1e-24 {
                let inv = 1.0 / norm2.sqrt();
                points[start..].iter_mut().for_each(|v| *v *= inv);
                break;
            }
        }
    }
    Dataset::from_rows(points, n, dim).expect("finite by construction")
}

/// Split a sphere sample into two equal halves labelled as timepoints 0/1.
pub fn sample_sphere_two_timepoints(dim: usize, n: usize, seed: u64) -> Dataset {
    let mut ds = sample_sphere(dim, n, seed);
    let half = n / 2;
    ds.timepoint = Some((0..n).map(|i| i64::from(i >= half)).collect());
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_have_unit_norm() {
        let ds = sample_sphere(10, 500, 3);
        for row in ds.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_means_vanish() {
        let ds = sample_sphere(3, 100_000, 11);
        let mut mean = [0.0; 3];
        for row in ds.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= ds.n() as f64;
            assert!(m.abs() < 0.01, "coordinate mean {m}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = sample_sphere(4, 10, 99);
        let b = sample_sphere(4, 10, 99);
        assert_eq!(a, b);
    }
}
