//! PCA with whitening via exact eigendecomposition of the covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Fitted PCA transform. `components` is column-orthonormal (d x k) and
/// `scales` holds the standard deviations along each component, so the
/// transformed training data is whitened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// Row-major d x k.
    pub components: Vec<f64>,
    pub scales: Vec<f64>,
    pub d: usize,
    pub k: usize,
}

impl PcaTransform {
    pub fn apply_point(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d);
        let mut out = vec![0.0; self.k];
        for j in 0..self.k {
            let mut acc = 0.0;
            for i in 0..self.d {
                acc += (x[i] - self.mean[i]) * self.components[i * self.k + j];
            }
            out[j] = acc / self.scales[j];
        }
        out
    }

    /// Map a whitened point back to the ambient space.
    pub fn invert_point(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.k);
        let mut out = self.mean.clone();
        for i in 0..self.d {
            for j in 0..self.k {
                out[i] += self.components[i * self.k + j] * self.scales[j] * y[j];
            }
        }
        out
    }
}

/// Fit PCA with whitening on the dataset and return the transform together
/// with the transformed points (zero mean, unit covariance).
pub fn pca_whiten(ds: &Dataset, k: usize) -> Result<(PcaTransform, Dataset)> {
    let n = ds.n();
    let d = ds.dim();
    if k < 1 || n <= k {
        return Err(Error::Config(format!(
            "pca requires n > k >= 1, got n={n}, k={k}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in ds.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Sample covariance with 1/(n-1); whitening uses the same convention.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in ds.rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let mut components = vec![0.0; d * k];
    let mut scales = vec![0.0; k];
    for (rank, &idx) in order.iter().take(k).enumerate() {
        let ev = eig.eigenvalues[idx];
        if ev <= 1e-12 * max_ev.max(1e-300) {
            return Err(Error::Config(format!(
                "data is rank deficient at component {rank} (eigenvalue {ev:.3e}); use a smaller k"
            )));
        }
        scales[rank] = ev.sqrt();
        let col: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        // Fix the sign deterministically: largest-magnitude entry positive.
        let mut lead = 0usize;
        for i in 0..d {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[i * k + rank] = sign * col[i];
        }
    }

    let transform = PcaTransform {
        mean,
        components,
        scales,
        d,
        k,
    };
    let mut out = Vec::with_capacity(n * k);
    for row in ds.rows() {
        out.extend_from_slice(&transform.apply_point(row));
    }
    let mut transformed = Dataset::from_rows(out, n, k)?;
    transformed.timepoint = ds.timepoint.clone();
    transformed.cluster_id = ds.cluster_id.clone();
    transformed.weight = ds.weight.clone();
    Ok((transform, transformed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_cov(ds: &Dataset) -> Vec<f64> {
        let (n, d) = (ds.n(), ds.dim());
        let mut mean = vec![0.0; d];
        for row in ds.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for row in ds.rows() {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        cov
    }

    #[test]
    fn whitened_output_has_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        // Anisotropic Gaussian, variances 4 and 1.
        let pts: Vec<f64> = (0..n)
            .flat_map(|_| {
                let a = 2.0 * standard_normal(&mut rng);
                let b = standard_normal(&mut rng);
                [a + 0.5 * b, b]
            })
            .collect();
        let ds = Dataset::from_rows(pts, n, 2).unwrap();
        let (_, white) = pca_whiten(&ds, 2).unwrap();
        let cov = sample_cov(&white);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[i * 2 + j] - want).abs() < 1e-8,
                    "cov[{i}{j}] = {}",
                    cov[i * 2 + j]
                );
            }
        }
    }

    #[test]
    fn anisotropic_variances_unit_after_whitening() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let pts: Vec<f64> = (0..n)
            .flat_map(|_| [2.0 * standard_normal(&mut rng), standard_normal(&mut rng)])
            .collect();
        let ds = Dataset::from_rows(pts, n, 2).unwrap();
        let (_, white) = pca_whiten(&ds, 2).unwrap();
        let cov = sample_cov(&white);
        assert!((cov[0] - 1.0).abs() < 0.05);
        assert!((cov[3] - 1.0).abs() < 0.05);
    }

    #[test]
    fn line_in_3d_reconstructs_with_k1() {
        let dir = [0.6, -0.64, 0.48];
        let n = 200;
        let pts: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = i as f64 / (n - 1) as f64 * 4.0 - 2.0;
                [dir[0] * t, dir[1] * t, dir[2] * t]
            })
            .collect();
        let ds = Dataset::from_rows(pts, n, 3).unwrap();
        let (transform, white) = pca_whiten(&ds, 1).unwrap();
        for (i, row) in ds.rows().enumerate() {
            let rec = transform.invert_point(white.row(i));
            for (a, b) in rec.iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "reconstruction error {a} vs {b}");
            }
        }
    }

    #[test]
    fn rank_deficient_suggests_smaller_k() {
        // All points on a 1d line, ask for 2 components.
        let pts: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let ds = Dataset::from_rows(pts, 50, 2).unwrap();
        let err = pca_whiten(&ds, 2).unwrap_err();
        assert!(err.to_string().contains("smaller k"), "{err}");
    }
}
