//! Dataset container, ingestion, PCA whitening, synthetic manifolds,
//! clustering, and weighted minibatch sampling.

pub mod cluster;
pub mod io;
pub mod pca;
pub mod sphere;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An n x d point cloud with optional per-row timepoint labels, cluster
/// assignments, and sampling weights. Weights, when present, sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    n: usize,
    d: usize,
    pub timepoint: Option<Vec<i64>>,
    pub cluster_id: Option<Vec<usize>>,
    pub weight: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_rows(points: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if points.len() != n * d {
            return Err(Error::shape("dataset storage", n * d, points.len()));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                location: format!("row {}", pos / d.max(1)),
                reason: "non-finite value".into(),
            });
        }
        Ok(Dataset {
            points,
            n,
            d,
            timepoint: None,
            cluster_id: None,
            weight: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.d)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Effective sampling weight of row `i` (uniform `1/n` when unset).
    pub fn weight_of(&self, i: usize) -> f64 {
        match &self.weight {
            Some(w) => w[i],
            None => 1.0 / self.n as f64,
        }
    }

    /// Replace the sampling weights; they must be nonnegative with positive
    /// total and are renormalized to sum exactly to one.
    pub fn set_weights(&mut self, mut w: Vec<f64>) -> Result<()> {
        if w.len() != self.n {
            return Err(Error::shape("weights", self.n, w.len()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data {
                location: "weights".into(),
                reason: "negative or non-finite weight".into(),
            });
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data {
                location: "weights".into(),
                reason: "weights sum to zero".into(),
            });
        }
        w.iter_mut().for_each(|v| *v /= total);
        self.weight = Some(w);
        Ok(())
    }

    pub fn set_clusters(&mut self, assignment: Vec<usize>, n_clusters: usize) -> Result<()> {
        if assignment.len() != self.n {
            return Err(Error::shape("cluster assignment", self.n, assignment.len()));
        }
        if assignment.iter().any(|&c| c >= n_clusters) {
            return Err(Error::Data {
                location: "cluster assignment".into(),
                reason: format!("id out of range [0,{n_clusters})"),
            });
        }
        self.cluster_id = Some(assignment);
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        match &self.cluster_id {
            Some(ids) => ids.iter().copied().max().map_or(1, |m| m + 1),
            None => 1,
        }
    }

    /// Indices of rows in cluster `j` (all rows when no clustering is set
    /// and `j == 0`).
    pub fn cluster_members(&self, j: usize) -> Vec<usize> {
        match &self.cluster_id {
            Some(ids) => (0..self.n).filter(|&i| ids[i] == j).collect(),
            None => {
                assert_eq!(j, 0, "dataset has a single implicit cluster");
                (0..self.n).collect()
            }
        }
    }

    /// Rows with the given timepoint label.
    pub fn timepoint_members(&self, t: i64) -> Vec<usize> {
        match &self.timepoint {
            Some(ts) => (0..self.n).filter(|&i| ts[i] == t).collect(),
            None => Vec::new(),
        }
    }

    /// Sorted distinct timepoint labels.
    pub fn observed_timepoints(&self) -> Vec<i64> {
        let mut ts: Vec<i64> = match &self.timepoint {
            Some(v) => v.clone(),
            None => return Vec::new(),
        };
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    /// A new dataset holding only the selected rows (labels carried over,
    /// weights dropped).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut points = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            points.extend_from_slice(self.row(i));
        }
        Dataset {
            points,
            n: indices.len(),
            d: self.d,
            timepoint: self.timepoint.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
            cluster_id: self.cluster_id.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            weight: None,
        }
    }
}

/// Draw `batch_size` row indices i.i.d. proportional to the dataset weights.
pub fn weighted_minibatch(ds: &Dataset, batch_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &ds.weight {
        Some(w) => {
            let dist = WeightedIndex::new(w).expect("weights validated on set");
            (0..batch_size).map(|_| dist.sample(&mut rng)).collect()
        }
        None => {
            let dist = rand::distributions::Uniform::from(0..ds.n);
            (0..batch_size).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

/// Draw indices from a subset of rows, weighted by the dataset weights
/// restricted to that subset.
pub fn weighted_minibatch_from(ds: &Dataset, subset: &[usize], batch_size: usize, seed: u64) -> Vec<usize> {
    assert!(!subset.is_empty(), "cannot sample from an empty subset");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &ds.weight {
        Some(w) => {
            let sub_w: Vec<f64> = subset.iter().map(|&i| w[i]).collect();
            if sub_w.iter().sum::<f64>() <= 0.0 {
                let dist = rand::distributions::Uniform::from(0..subset.len());
                return (0..batch_size).map(|_| subset[dist.sample(&mut rng)]).collect();
            }
            let dist = WeightedIndex::new(&sub_w).expect("positive weights");
            (0..batch_size).map(|_| subset[dist.sample(&mut rng)]).collect()
        }
        None => {
            let dist = rand::distributions::Uniform::from(0..subset.len());
            (0..batch_size).map(|_| subset[dist.sample(&mut rng)]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::from_rows(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, 2).unwrap()
    }

    #[test]
    fn all_mass_on_one_point_returns_only_that_point() {
        let mut ds = toy();
        ds.set_weights(vec![1.0, 0.0, 0.0]).unwrap();
        let idx = weighted_minibatch(&ds, 50, 123);
        assert!(idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn uniform_frequencies() {
        let ds = Dataset::from_rows(vec![0.0; 20], 10, 2).unwrap();
        let draws = 1_000_000;
        let idx = weighted_minibatch(&ds, draws, 42);
        let mut counts = [0usize; 10];
        for i in idx {
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() < 0.003, "frequency {f}");
        }
    }

    #[test]
    fn ratio_weights() {
        let mut ds = Dataset::from_rows(vec![0.0; 4], 2, 2).unwrap();
        ds.set_weights(vec![1.0, 2.0]).unwrap();
        let draws = 300_000;
        let idx = weighted_minibatch(&ds, draws, 7);
        let ones = idx.iter().filter(|&&i| i == 1).count() as f64;
        let zeros = idx.iter().filter(|&&i| i == 0).count() as f64;
        let ratio = ones / zeros;
        assert!((ratio - 2.0).abs() / 2.0 < 0.02, "ratio {ratio}");
    }

    #[test]
    fn non_finite_row_rejected() {
        let err = Dataset::from_rows(vec![0.0, f64::NAN, 1.0, 2.0], 2, 2).unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
    }

    #[test]
    fn select_carries_labels() {
        let mut ds = toy();
        ds.timepoint = Some(vec![0, 1, 2]);
        let sub = ds.select(&[2, 0]);
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.row(0), &[0.0, 1.0]);
        assert_eq!(sub.timepoint, Some(vec![2, 0]));
    }
}
