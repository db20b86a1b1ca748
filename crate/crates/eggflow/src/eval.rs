//! Quantitative evaluation: analytic sphere geodesics and average geodesic
//! error, exact Wasserstein-1 between point clouds, metric line integrals,
//! energy-grid exports, and the leave-one-timepoint-out protocol.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{MetricField, Pair};
use crate::nn::mix_seed;
use crate::score::EnergyModel;
use crate::transport::ot::{euclidean, solve_assignment};
use crate::transport::{integrate_flow, FlowModel, IntegrateMethod, TimepointSchedule};

/// Great-circle interpolation on the unit sphere. Errors on an (almost)
/// antipodal pair, where the geodesic is not unique.
pub fn sphere_geodesic(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    let dot: f64 = x0.iter().zip(x1).map(|(a, b)| a * b).sum();
    let dot = dot.clamp(-1.0, 1.0);
    if dot < -1.0 + 1e-9 {
        return Err(Error::Config("antipodal pair: sphere geodesic not unique".into()));
    }
    let omega = dot.acos();
    if omega < 1e-9 {
        // Coincident endpoints; the chord renormalized is exact here.
        let mut out: Vec<f64> = x0
            .iter()
            .zip(x1)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter_mut().for_each(|v| *v /= norm);
        return Ok(out);
    }
    let sin_omega = omega.sin();
    let ca = ((1.0 - t) * omega).sin() / sin_omega;
    let cb = (t * omega).sin() / sin_omega;
    Ok(x0.iter().zip(x1).map(|(a, b)| ca * a + cb * b).collect())
}

/// Monte Carlo average geodesic error `E ||gamma - gamma*||^2` over the
/// given endpoint pairs with `n_t` uniform time draws per pair.
pub fn average_geodesic_error(
    gamma: impl Fn(&[f64], &[f64], f64) -> Vec<f64>,
    gamma_star: impl Fn(&[f64], &[f64], f64) -> Vec<f64>,
    pairs: &[Pair],
    n_t: usize,
    seed: u64,
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (idx, (x0, x1)) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx as u64, 0));
        for _ in 0..n_t {
            let t: f64 = rng.gen::<f64>();
            let a = gamma(x0, x1, t);
            let b = gamma_star(x0, x1, t);
            acc += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            count += 1;
        }
    }
    acc / count as f64
}

/// Exact Wasserstein-1 between two uniform empirical measures under the
/// Euclidean ground cost. Clouds larger than `max_n` are subsampled without
/// replacement; unequal sizes are matched by subsampling the larger cloud.
pub fn wasserstein1(a: &[Vec<f64>], b: &[Vec<f64>], max_n: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("wasserstein1 needs nonempty clouds".into()));
    }
    let m = a.len().min(b.len()).min(max_n);
    let pick = |cloud: &[Vec<f64>], salt: u64| -> Vec<Vec<f64>> {
        if cloud.len() == m {
            return cloud.to_vec();
        }
        let mut idx: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt, cloud.len() as u64));
        for i in 0..m {
            let j = i + rng.gen_range(0..cloud.len() - i);
            idx.swap(i, j);
        }
        idx[..m].iter().map(|&i| cloud[i].clone()).collect()
    };
    let sa = pick(a, 0xA);
    let sb = pick(b, 0xB);
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = euclidean(&sa[i], &sb[j]);
        }
    }
    let (_, total) = solve_assignment(&cost, m);
    Ok(total / m as f64)
}

/// Line integral of the metric along a path, `sum G(mid) * |segment|`,
/// with `n` segments on t in [0, 1].
pub fn metric_line_integral(path: impl Fn(f64) -> Vec<f64>, metric: &MetricField, n: usize) -> f64 {
    let mut acc = 0.0;
    let mut prev = path(0.0);
    for k in 1..=n {
        let t = k as f64 / n as f64;
        let cur = path(t);
        let mid: Vec<f64> = prev.iter().zip(&cur).map(|(a, b)| 0.5 * (a + b)).collect();
        let seg = euclidean(&prev, &cur);
        acc += metric.metric_at(&mid) * seg;
        prev = cur;
    }
    acc
}

/// A 2d slice through the ambient space for grid exports: either two
/// coordinate axes with the rest pinned, or two spanning directions from an
/// origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlaneSpec {
    Axes {
        axis_i: usize,
        axis_j: usize,
        origin: Vec<f64>,
        range_i: (f64, f64),
        range_j: (f64, f64),
    },
    Spanned {
        origin: Vec<f64>,
        dir_u: Vec<f64>,
        dir_v: Vec<f64>,
        range_i: (f64, f64),
        range_j: (f64, f64),
    },
}

impl PlaneSpec {
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            PlaneSpec::Axes {
                axis_i,
                axis_j,
                origin,
                ..
            } => {
                let mut p = origin.clone();
                p[*axis_i] = a;
                p[*axis_j] = b;
                p
            }
            PlaneSpec::Spanned {
                origin, dir_u, dir_v, ..
            } => origin
                .iter()
                .enumerate()
                .map(|(k, o)| o + a * dir_u[k] + b * dir_v[k])
                .collect(),
        }
    }

    pub fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        match self {
            PlaneSpec::Axes { range_i, range_j, .. } => (*range_i, *range_j),
            PlaneSpec::Spanned { range_i, range_j, .. } => (*range_i, *range_j),
        }
    }
}

/// Energy (and metric) values on a `resolution x resolution` grid over a
/// plane. Row r sweeps axis j, column c sweeps axis i.
#[derive(Debug, Clone)]
pub struct EnergyGrid {
    pub spec: PlaneSpec,
    pub resolution: usize,
    pub energy: Vec<f64>,
    pub metric: Vec<f64>,
}

/// Evaluate the (metric-field) energy and metric over the plane.
pub fn export_energy_grid(metric: &MetricField, spec: &PlaneSpec, resolution: usize) -> Result<EnergyGrid> {
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be >= 2".into()));
    }
    let energy_model: Option<&EnergyModel> = metric.energy.as_ref();
    let ((i_lo, i_hi), (j_lo, j_hi)) = spec.ranges();
    let mut energy = vec![0.0; resolution * resolution];
    let mut gvals = vec![0.0; resolution * resolution];
    for r in 0..resolution {
        let bval = j_lo + (j_hi - j_lo) * r as f64 / (resolution - 1) as f64;
        for c in 0..resolution {
            let aval = i_lo + (i_hi - i_lo) * c as f64 / (resolution - 1) as f64;
            let p = spec.point(aval, bval);
            energy[r * resolution + c] = match energy_model {
                Some(e) => e.energy_at(&p, e.schedule.sigma_min(), None),
                None => 0.0,
            };
            gvals[r * resolution + c] = metric.metric_at(&p);
        }
    }
    Ok(EnergyGrid {
        spec: spec.clone(),
        resolution,
        energy,
        metric: gvals,
    })
}

impl EnergyGrid {
    /// CSV with the plane spec recorded verbatim in a `# plane:` header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&format!("# plane: {}\n", serde_json::to_string(&self.spec)?));
        out.push_str("row,col,axis_i,axis_j,energy,metric\n");
        let ((i_lo, i_hi), (j_lo, j_hi)) = self.spec.ranges();
        let res = self.resolution;
        for r in 0..res {
            let b = j_lo + (j_hi - j_lo) * r as f64 / (res - 1) as f64;
            for c in 0..res {
                let a = i_lo + (i_hi - i_lo) * c as f64 / (res - 1) as f64;
                out.push_str(&format!(
                    "{r},{c},{a},{b},{},{}\n",
                    self.energy[r * res + c],
                    self.metric[r * res + c]
                ));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Minimal SVG heatmap of the metric values.
    pub fn write_svg(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let res = self.resolution;
        let cell = 6usize;
        let size = res * cell;
        let lo = self.metric.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.metric.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n"
        );
        for r in 0..res {
            for c in 0..res {
                let v = (self.metric[r * res + c] - lo) / span;
                let shade = (255.0 * (1.0 - v)) as u8;
                svg.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>\n",
                    c * cell,
                    (res - 1 - r) * cell
                ));
            }
        }
        svg.push_str("</svg>\n");
        std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Parse the `# plane:` header back out of a grid CSV.
pub fn read_plane_header(path: impl AsRef<Path>) -> Result<PlaneSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let line = text.lines().next().ok_or_else(|| Error::Data {
        location: path.display().to_string(),
        reason: "empty grid file".into(),
    })?;
    let json = line.strip_prefix("# plane: ").ok_or_else(|| Error::Data {
        location: path.display().to_string(),
        reason: "missing plane header".into(),
    })?;
    Ok(serde_json::from_str(json)?)
}

/// One evaluation result, emitted as JSON and appended to a CSV ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    /// Dispersion across seeds (or pairs, as labelled by `dispersion_over`).
    pub dispersion: f64,
    pub dispersion_over: String,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Append to the results ledger, writing the header if the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if fresh {
            writeln!(file, "metric,value,dispersion,dispersion_over,n,seeds,config_hash")
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            self.metric, self.value, self.dispersion, self.dispersion_over, self.n, seeds, self.config_hash
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Integrate the marginal below a held-out timepoint forward to the holdout
/// and report W1 against the held-out marginal.
pub fn leave_one_out_w1(
    flow: &FlowModel,
    ds: &Dataset,
    schedule: &TimepointSchedule,
    n_steps: usize,
    max_n: usize,
    seed: u64,
) -> Result<f64> {
    let holdout = schedule
        .holdout
        .ok_or_else(|| Error::Config("schedule carries no holdout".into()))?;
    let from_rows = ds.timepoint_members(holdout.t_from);
    let held_rows = ds.timepoint_members(holdout.t_star);
    if from_rows.is_empty() || held_rows.is_empty() {
        return Err(Error::Data {
            location: "leave_one_out_w1".into(),
            reason: format!(
                "missing marginal rows for timepoints {} or {}",
                holdout.t_from, holdout.t_star
            ),
        });
    }
    let u_from = segment_u_from(schedule, holdout.t_from)?;
    // Transport every source point from its segment start to the holdout.
    let mut predicted = Vec::with_capacity(from_rows.len());
    for &i in &from_rows {
        let traj = integrate_flow(flow, ds.row(i), u_from, holdout.u_star, n_steps, IntegrateMethod::Rk4)?;
        predicted.push(traj.last().unwrap().clone());
    }
    let held: Vec<Vec<f64>> = held_rows.iter().map(|&i| ds.row(i).to_vec()).collect();
    wasserstein1(&predicted, &held, max_n, seed)
}

fn segment_u_from(schedule: &TimepointSchedule, t_from: i64) -> Result<f64> {
    schedule
        .segments
        .iter()
        .find(|s| s.t_from == t_from)
        .map(|s| s.u_from)
        .ok_or_else(|| Error::Config(format!("no segment starts at timepoint {t_from}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sphere::sample_sphere;

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let x0 = vec![1.0, 0.0];
        let x1 = vec![0.0, 1.0];
        let p0 = sphere_geodesic(&x0, &x1, 0.0).unwrap();
        let p1 = sphere_geodesic(&x0, &x1, 1.0).unwrap();
        for (a, b) in p0.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p1.iter().zip(&x1) {
            assert!((a - b).abs() < 1e-12);
        }
        let mid = sphere_geodesic(&x0, &x1, 0.5).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - s).abs() < 1e-12);
        assert!((mid[1] - s).abs() < 1e-12);
    }

    #[test]
    fn slerp_output_unit_norm() {
        let ds = sample_sphere(5, 40, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let i = rng.gen_range(0..ds.n());
            let j = rng.gen_range(0..ds.n());
            let t: f64 = rng.gen();
            if let Ok(p) = sphere_geodesic(ds.row(i), ds.row(j), t) {
                let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
            }
        }
    }

    #[test]
    fn antipodal_rejected() {
        let err = sphere_geodesic(&[1.0, 0.0], &[-1.0, 0.0], 0.5).unwrap_err();
        assert!(err.to_string().contains("antipodal"));
    }

    #[test]
    fn ave_zero_for_same_curve() {
        let pairs: Vec<Pair> = vec![(vec![1.0, 0.0], vec![0.0, 1.0])];
        let chord = |x0: &[f64], x1: &[f64], t: f64| -> Vec<f64> {
            x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
        };
        let ave = average_geodesic_error(chord, chord, &pairs, 16, 3);
        assert_eq!(ave, 0.0);
    }

    #[test]
    fn ave_swap_invariant_for_symmetric_curves() {
        let pairs: Vec<Pair> = vec![(vec![1.0, 0.0], vec![0.0, 1.0])];
        let swapped: Vec<Pair> = vec![(vec![0.0, 1.0], vec![1.0, 0.0])];
        let chord = |x0: &[f64], x1: &[f64], t: f64| -> Vec<f64> {
            x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
        };
        let slerp = |x0: &[f64], x1: &[f64], t: f64| sphere_geodesic(x0, x1, t).unwrap();
        // Estimate with a dense fixed t-grid rather than random t so the
        // swap comparison is exact: gamma(x0,x1,t) = gamma(x1,x0,1-t) for
        // both curves, and the grid is symmetric around 1/2.
        let grid_ave = |ps: &[Pair]| {
            let n = 101;
            let mut acc = 0.0;
            for (x0, x1) in ps {
                for k in 0..n {
                    let t = k as f64 / (n - 1) as f64;
                    let a = chord(x0, x1, t);
                    let b = slerp(x0, x1, t);
                    acc += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                }
            }
            acc / (n * ps.len()) as f64
        };
        assert!((grid_ave(&pairs) - grid_ave(&swapped)).abs() < 1e-12);
    }

    #[test]
    fn w1_identical_clouds_zero() {
        let cloud: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.5]).collect();
        let w = wasserstein1(&cloud, &cloud, 1024, 1).unwrap();
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn w1_point_masses() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        let w = wasserstein1(&a, &b, 1024, 1).unwrap();
        assert!((w - 5.0).abs() < 1e-12);
    }

    #[test]
    fn w1_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..32)
                .map(|_| (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect()
        };
        let a = cloud(&mut rng);
        let b = cloud(&mut rng);
        let c = cloud(&mut rng);
        let ab = wasserstein1(&a, &b, 64, 0).unwrap();
        let ba = wasserstein1(&b, &a, 64, 0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let bc = wasserstein1(&b, &c, 64, 0).unwrap();
        let ac = wasserstein1(&a, &c, 64, 0).unwrap();
        assert!(ac <= ab + bc + 1e-9);
        assert!(ab >= 0.0);
    }

    #[test]
    fn grid_constant_for_identity_metric() {
        let spec = PlaneSpec::Axes {
            axis_i: 0,
            axis_j: 1,
            origin: vec![0.0, 0.0],
            range_i: (-1.0, 1.0),
            range_j: (-1.0, 1.0),
        };
        let grid = export_energy_grid(&MetricField::identity(), &spec, 8).unwrap();
        assert!(grid.metric.iter().all(|&v| v == 1.0));
        assert!(grid.energy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_header_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let spec = PlaneSpec::Spanned {
            origin: vec![0.1, 0.2, 0.3],
            dir_u: vec![1.0, 0.0, 0.0],
            dir_v: vec![0.0, 1.0, 0.0],
            range_i: (-2.0, 2.0),
            range_j: (-1.5, 1.5),
        };
        let grid = export_energy_grid(&MetricField::identity(), &spec, 4).unwrap();
        grid.write_csv(&path).unwrap();
        let parsed = read_plane_header(&path).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn grid_resolution_validated() {
        let spec = PlaneSpec::Axes {
            axis_i: 0,
            axis_j: 1,
            origin: vec![0.0, 0.0],
            range_i: (0.0, 1.0),
            range_j: (0.0, 1.0),
        };
        assert!(export_energy_grid(&MetricField::identity(), &spec, 1).is_err());
    }
}
