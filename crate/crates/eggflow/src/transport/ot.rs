//! Optimal transport couplings on minibatches. The exact solver is a dense
//! shortest-augmenting-path assignment (Jonker-Volgenant style, O(n^3));
//! an entropic Sinkhorn solver is available as a faster approximation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Minimum-cost assignment on a dense row-major `n x n` cost matrix.
/// Returns the column assigned to each row and the total cost.
pub fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    // Potentials and column assignments, 1-indexed with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
            total += cost[(p[j] - 1) * n + (j - 1)];
        }
    }
    (assignment, total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtSolver {
    Exact,
    Entropic { epsilon: f64, iterations: usize, seed: u64 },
}

/// A minibatch coupling: paired indices into the two batches, the realized
/// total cost, and tags recording how it was produced.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub cost_tag: String,
    pub solver_tag: String,
}

/// Euclidean distance between two points.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Build the dense cost matrix for two equal-size batches.
pub fn cost_matrix(a: &[Vec<f64>], b: &[Vec<f64>], cost: impl Fn(&[f64], &[f64]) -> f64) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n * b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            c[i * b.len() + j] = cost(x, y);
        }
    }
    c
}

/// Couple two equal-size batches under the given precomputed cost matrix.
pub fn ot_couple(cost: &[f64], n_a: usize, n_b: usize, solver: OtSolver, cost_tag: &str) -> Result<Coupling> {
    if n_a != n_b {
        return Err(Error::Config(format!(
            "exact coupling needs equal batch sizes, got {n_a} and {n_b}"
        )));
    }
    match solver {
        OtSolver::Exact => {
            let (assignment, total) = solve_assignment(cost, n_a);
            Ok(Coupling {
                pairs: assignment.into_iter().enumerate().collect(),
                total_cost: total,
                cost_tag: cost_tag.into(),
                solver_tag: "exact_assignment".into(),
            })
        }
        OtSolver::Entropic { epsilon, iterations, seed } => {
            if epsilon <= 0.0 {
                return Err(Error::Config("entropic epsilon must be positive".into()));
            }
            let n = n_a;
            // Sinkhorn with uniform marginals in the kernel domain.
            let kernel: Vec<f64> = cost.iter().map(|c| (-c / epsilon).exp()).collect();
            let mut u = vec![1.0; n];
            let mut v = vec![1.0; n];
            let marginal = 1.0 / n as f64;
            for _ in 0..iterations {
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| kernel[i * n + j] * v[j]).sum();
                    u[i] = marginal / s.max(1e-300);
                }
                for j in 0..n {
                    let s: f64 = (0..n).map(|i| kernel[i * n + j] * u[i]).sum();
                    v[j] = marginal / s.max(1e-300);
                }
            }
            // Sample one partner per row from the plan.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::with_capacity(n);
            let mut total = 0.0;
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|j| u[i] * kernel[i * n + j] * v[j]).collect();
                let rsum: f64 = row.iter().sum();
                let mut target = rng.gen::<f64>() * rsum;
                let mut pick = n - 1;
                for (j, w) in row.iter().enumerate() {
                    target -= w;
                    if target <= 0.0 {
                        pick = j;
                        break;
                    }
                }
                total += cost[i * n + pick];
                pairs.push((i, pick));
            }
            Ok(Coupling {
                pairs,
                total_cost: total,
                cost_tag: cost_tag.into(),
                solver_tag: format!("entropic(eps={epsilon})"),
            })
        }
    }
}
