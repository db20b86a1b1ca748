//! Clustering used for stratified score matching: k-means, or community
//! detection on a kNN graph (single-level modularity local moves).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    GraphCommunity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub method: ClusterMethod,
    /// Cluster count for k-means.
    pub n_clusters: usize,
    /// Neighbor count for the kNN graph.
    pub n_neighbors: usize,
    /// Modularity resolution; 0 merges every connected component.
    pub resolution: f64,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            method: ClusterMethod::Kmeans,
            n_clusters: 1,
            n_neighbors: 10,
            resolution: 0.3,
            seed: 0,
        }
    }
}

/// A fitted clustering: per-point assignment plus per-cluster centers
/// (community means for the graph method, centroids for k-means).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub method: ClusterMethod,
    pub n_clusters: usize,
    pub assignment: Vec<usize>,
    pub centers: Vec<f64>,
    pub dim: usize,
}

impl ClusterModel {
    /// Cluster of an arbitrary point: nearest center.
    pub fn assign_point(&self, x: &[f64]) -> usize {
        assert_eq!(x.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.n_clusters {
            let c = &self.centers[j * self.dim..(j + 1) * self.dim];
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn fit_clusters(ds: &Dataset, params: &ClusterParams) -> Result<ClusterModel> {
    match params.method {
        ClusterMethod::Kmeans => {
            if params.n_clusters < 1 || params.n_clusters > ds.n() {
                return Err(Error::Config(format!(
                    "k-means needs 1 <= J <= n, got J={} with n={}",
                    params.n_clusters,
                    ds.n()
                )));
            }
            Ok(kmeans(ds, params.n_clusters, params.seed))
        }
        ClusterMethod::GraphCommunity => {
            if ds.n() < 2 {
                return Err(Error::Config("graph community needs n >= 2".into()));
            }
            Ok(graph_community(ds, params.n_neighbors, params.resolution))
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(ds: &Dataset, j: usize, seed: u64) -> ClusterModel {
    let (n, d) = (ds.n(), ds.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding.
    let mut centers = Vec::with_capacity(j * d);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(ds.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(ds.row(i), ds.row(first))).collect();
    while centers.len() < j * d {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.extend_from_slice(ds.row(pick));
        let c = centers.len() / d - 1;
        for i in 0..n {
            let dd = sq_dist(ds.row(i), &centers[c * d..(c + 1) * d]);
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _iter in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..j {
                let dd = sq_dist(ds.row(i), &centers[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // Recompute centers; revive any empty cluster with the point
        // farthest from its current center.
        let mut counts = vec![0usize; j];
        let mut sums = vec![0.0; j * d];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i] * d..(assignment[i] + 1) * d]
                .iter_mut()
                .zip(ds.row(i))
            {
                *s += v;
            }
        }
        for c in 0..j {
            if counts[c] == 0 {
                // Take the point farthest from its center, from a donor
                // cluster that keeps at least one member.
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(ds.row(a), &centers[assignment[a] * d..(assignment[a] + 1) * d]);
                        let db = sq_dist(ds.row(b), &centers[assignment[b] * d..(assignment[b] + 1) * d]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("j <= n guarantees a donor");
                let old = assignment[far];
                counts[old] -= 1;
                for (s, v) in sums[old * d..(old + 1) * d].iter_mut().zip(ds.row(far)) {
                    *s -= v;
                }
                assignment[far] = c;
                counts[c] = 1;
                sums[c * d..(c + 1) * d].copy_from_slice(ds.row(far));
                changed = true;
            }
        }
        for c in 0..j {
            for k in 0..d {
                centers[c * d + k] = sums[c * d + k] / counts[c].max(1) as f64;
            }
        }
        if !changed {
            break;
        }
    }
    ClusterModel {
        method: ClusterMethod::Kmeans,
        n_clusters: j,
        assignment,
        centers,
        dim: d,
    }
}

/// Weighted undirected graph for the modularity passes; self-loop weight is
/// stored once and counts twice toward the degree.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
}

impl LevelGraph {
    fn degrees(&self) -> Vec<f64> {
        (0..self.adj.len())
            .map(|i| self.adj[i].iter().map(|(_, w)| w).sum::<f64>() + 2.0 * self.self_loop[i])
            .collect()
    }
}

/// One pass of modularity local moves; returns the community of each node.
fn local_moves(g: &LevelGraph, resolution: f64) -> Vec<usize> {
    let n = g.adj.len();
    let degree = g.degrees();
    let two_m: f64 = degree.iter().sum();
    let mut community: Vec<usize> = (0..n).collect();
    let mut total_degree = degree.clone();
    for _pass in 0..100 {
        let mut moved = false;
        for i in 0..n {
            let own = community[i];
            total_degree[own] -= degree[i];
            let mut link: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
            for &(j, w) in &g.adj[i] {
                *link.entry(community[j]).or_insert(0.0) += w;
            }
            let gain = |c: usize, kin: f64| kin - resolution * total_degree[c] * degree[i] / two_m;
            let mut best_c = own;
            let mut best_gain = gain(own, link.get(&own).copied().unwrap_or(0.0));
            for (&c, &kin) in &link {
                let gv = gain(c, kin);
                if gv > best_gain + 1e-12 {
                    best_gain = gv;
                    best_c = c;
                }
            }
            total_degree[best_c] += degree[i];
            if best_c != own {
                community[i] = best_c;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    community
}

fn relabel_contiguous(community: &[usize]) -> (Vec<usize>, usize) {
    let mut relabel: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    let mut out = vec![0usize; community.len()];
    for (i, &c) in community.iter().enumerate() {
        let next = relabel.len();
        out[i] = *relabel.entry(c).or_insert(next);
    }
    let count = relabel.len();
    (out, count)
}

/// Collapse communities into super-nodes, summing edge weights.
fn aggregate(g: &LevelGraph, labels: &[usize], n_comm: usize) -> LevelGraph {
    let mut self_loop = vec![0.0; n_comm];
    let mut maps: Vec<std::collections::BTreeMap<usize, f64>> = vec![std::collections::BTreeMap::new(); n_comm];
    for i in 0..g.adj.len() {
        let ci = labels[i];
        self_loop[ci] += g.self_loop[i];
        for &(j, w) in &g.adj[i] {
            let cj = labels[j];
            if ci == cj {
                // Each undirected edge visited from both ends.
                self_loop[ci] += w / 2.0;
            } else {
                *maps[ci].entry(cj).or_insert(0.0) += w;
            }
        }
    }
    let adj = maps
        .into_iter()
        .map(|m| m.into_iter().collect::<Vec<(usize, f64)>>())
        .collect();
    LevelGraph { adj, self_loop }
}

fn graph_community(ds: &Dataset, n_neighbors: usize, resolution: f64) -> ClusterModel {
    let n = ds.n();
    let d = ds.dim();
    let k = n_neighbors.min(n - 1).max(1);

    // Symmetrized kNN graph, unit edge weights.
    let mut neighbor_sets: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(ds.row(i), ds.row(j)), j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in dists.iter().take(k) {
            neighbor_sets[i].insert(j);
            neighbor_sets[j].insert(i);
        }
    }
    let mut graph = LevelGraph {
        adj: neighbor_sets
            .into_iter()
            .map(|s| s.into_iter().map(|j| (j, 1.0)).collect::<Vec<_>>())
            .collect(),
        self_loop: vec![0.0; n],
    };

    // Louvain: local moves, aggregate, repeat until no further merging.
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut n_comm = n;
    for _level in 0..32 {
        let community = local_moves(&graph, resolution);
        let (labels, count) = relabel_contiguous(&community);
        for a in assignment.iter_mut() {
            *a = labels[*a];
        }
        if count == n_comm {
            break;
        }
        graph = aggregate(&graph, &labels, count);
        n_comm = count;
    }
    let (assignment, j) = relabel_contiguous(&assignment);
    let mut centers = vec![0.0; j * d];
    let mut counts = vec![0usize; j];
    for i in 0..n {
        counts[assignment[i]] += 1;
        for (s, v) in centers[assignment[i] * d..(assignment[i] + 1) * d]
            .iter_mut()
            .zip(ds.row(i))
        {
            *s += v;
        }
    }
    for c in 0..j {
        for kd in 0..d {
            centers[c * d + kd] /= counts[c] as f64;
        }
    }
    ClusterModel {
        method: ClusterMethod::GraphCommunity,
        n_clusters: j,
        assignment,
        centers,
        dim: d,
    }
}
