//! Energy-induced conformal metric and the geodesic interpolant network.
//!
//! The metric is the scalar field `G(x) = gamma + clip(lambda * exp(E(x)))`
//! evaluated at the smallest noise scale; squared path speed under it is
//! `G(x) * ||v||^2`. Paths between endpoints are parameterized as
//! `x_t = (1-t) x0 + t x1 + t(1-t) psi(x0, x1, t) + sigma_flow * eps`, so
//! the endpoints are pinned for any psi.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::embed::{CondKind, SinEmbed};
use crate::nn::optim::{OptConfig, OptState};
use crate::nn::{accumulate_batch, mix_seed, standard_normal, DualCache, Mlp, MlpGrads, Role};
use crate::refine::empirical_quantile;
use crate::score::EnergyModel;

/// Where the cached lower clip acts: on `lambda * exp(clip(E))` (default)
/// or on the energy itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFloorMode {
    LambdaExp,
    Energy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub gamma: f64,
    pub lambda: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub metric_floor_quantile: f64,
    pub floor_mode: MetricFloorMode,
    /// Noise condition at which the metric reads the energy. `None` uses
    /// the largest scale of the energy's schedule: the metric must be
    /// evaluable off-manifold, and only the large-noise conditions have
    /// training support there (the small scales never see noised points far
    /// from the data, so their off-manifold energies are extrapolation).
    pub metric_sigma: Option<f64>,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            gamma: 0.2,
            lambda: 10.0,
            q_lo: 0.05,
            q_hi: 0.98,
            metric_floor_quantile: 0.05,
            floor_mode: MetricFloorMode::LambdaExp,
            metric_sigma: None,
        }
    }
}

/// Thresholds cached at fit time so downstream evaluation is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCalibration {
    pub e_lo: f64,
    pub e_hi: f64,
    pub floor: f64,
}

/// The conformal metric: a frozen energy model plus cached clip thresholds.
/// `energy = None` is the identity baseline, G = 1 everywhere.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub energy: Option<EnergyModel>,
    pub params: MetricParams,
    pub calibration: MetricCalibration,
}

impl MetricField {
    /// Identity metric, G = 1 (the constant-metric baseline).
    pub fn identity() -> Self {
        MetricField {
            energy: None,
            params: MetricParams {
                gamma: 1.0,
                lambda: 0.0,
                ..MetricParams::default()
            },
            calibration: MetricCalibration {
                e_lo: 0.0,
                e_hi: 0.0,
                floor: 0.0,
            },
        }
    }

    /// Constant metric G = gamma (for tests and ablations).
    pub fn constant(gamma: f64) -> Self {
        let mut m = MetricField::identity();
        m.params.gamma = gamma;
        m
    }

    /// Fit the clip thresholds on training data: the energy window is the
    /// `[q_lo, q_hi]` quantile span at `sigma_min`, and the lower clip is the
    /// `metric_floor_quantile` of `lambda * exp(clip(E))` (or of E itself).
    pub fn fit(energy: EnergyModel, ds: &Dataset, params: MetricParams) -> Result<Self> {
        if !(0.0 <= params.q_lo && params.q_lo < params.q_hi && params.q_hi <= 1.0) {
            return Err(Error::Config(format!(
                "energy clip quantiles must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                params.q_lo, params.q_hi
            )));
        }
        if params.gamma <= 0.0 {
            return Err(Error::Config("metric gamma must be positive".into()));
        }
        let sigma = params
            .metric_sigma
            .unwrap_or_else(|| *energy.schedule.sigmas.last().expect("nonempty schedule"));
        let energies: Vec<f64> = ds.rows().map(|x| energy.energy_at(x, sigma, None)).collect();
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::non_finite("metric calibration energies"));
        }
        let e_lo = empirical_quantile(&energies, params.q_lo);
        let e_hi = empirical_quantile(&energies, params.q_hi);
        let floor = match params.floor_mode {
            MetricFloorMode::LambdaExp => {
                let vals: Vec<f64> = energies
                    .iter()
                    .map(|e| params.lambda * e.clamp(e_lo, e_hi).exp())
                    .collect();
                empirical_quantile(&vals, params.metric_floor_quantile)
            }
            MetricFloorMode::Energy => empirical_quantile(&energies, params.metric_floor_quantile),
        };
        Ok(MetricField {
            energy: Some(energy),
            params,
            calibration: MetricCalibration { e_lo, e_hi, floor },
        })
    }

    pub fn is_identity(&self) -> bool {
        self.energy.is_none()
    }

    /// Scalar metric value; always >= gamma.
    pub fn metric_at(&self, x: &[f64]) -> f64 {
        self.metric_with_grad_impl(x, false).0
    }

    /// Metric value and its input gradient (zero wherever a clip is active).
    pub fn metric_with_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.metric_with_grad_impl(x, true)
    }

    fn metric_with_grad_impl(&self, x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let energy = match &self.energy {
            None => return (self.params.gamma, vec![0.0; x.len()]),
            Some(e) => e,
        };
        let sigma = self
            .params
            .metric_sigma
            .unwrap_or_else(|| *energy.schedule.sigmas.last().expect("nonempty schedule"));
        let p = &self.params;
        let c = &self.calibration;
        let (e_raw, egrad) = if want_grad {
            energy.energy_with_grad(x, sigma, None)
        } else {
            (energy.energy_at(x, sigma, None), Vec::new())
        };
        match p.floor_mode {
            MetricFloorMode::LambdaExp => {
                let e_clip = e_raw.clamp(c.e_lo, c.e_hi);
                let val = p.lambda * e_clip.exp();
                let floored = val.max(c.floor);
                let g = p.gamma + floored;
                if !want_grad {
                    return (g, Vec::new());
                }
                let active = val > c.floor && e_raw > c.e_lo && e_raw < c.e_hi;
                let grad = if active {
                    egrad.iter().map(|d| p.lambda * e_clip.exp() * d).collect()
                } else {
                    vec![0.0; x.len()]
                };
                (g, grad)
            }
            MetricFloorMode::Energy => {
                let lo = c.e_lo.max(c.floor);
                let e_clip = e_raw.clamp(lo, c.e_hi);
                let g = p.gamma + p.lambda * e_clip.exp();
                if !want_grad {
                    return (g, Vec::new());
                }
                let active = e_raw > lo && e_raw < c.e_hi;
                let grad = if active {
                    egrad.iter().map(|d| p.lambda * e_clip.exp() * d).collect()
                } else {
                    vec![0.0; x.len()]
                };
                (g, grad)
            }
        }
    }

    /// JSON sidecar describing the metric next to its energy checkpoint.
    pub fn save_sidecar(&self, path: impl AsRef<Path>, energy_ckpt: &str) -> Result<()> {
        let path = path.as_ref();
        let doc = MetricSidecar {
            format: "eggflow-metric".into(),
            params: self.params,
            calibration: self.calibration,
            energy_checkpoint: energy_ckpt.into(),
            identity: self.is_identity(),
        };
        let json = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSidecar {
    pub format: String,
    pub params: MetricParams,
    pub calibration: MetricCalibration,
    pub energy_checkpoint: String,
    pub identity: bool,
}

/// The geodesic correction network psi(x0, x1, t). The output layer starts
/// at zero so training begins from straight chords.
#[derive(Debug, Clone)]
pub struct GeodesicModel {
    pub net: Mlp,
    pub time_embed: SinEmbed,
    pub dim: usize,
}

impl GeodesicModel {
    pub fn new(dim: usize, hidden_dim: usize, n_layers: usize, n_freq: usize, seed: u64) -> Self {
        let time_embed = SinEmbed::new(CondKind::Time, n_freq);
        let mut net = Mlp::new(
            Role::Geodesic,
            2 * dim + time_embed.out_dim(),
            hidden_dim,
            dim,
            n_layers,
            false,
            seed,
        );
        net.zero_output_layer();
        GeodesicModel {
            net,
            time_embed,
            dim,
        }
    }

    pub fn with_net(&self, net: Mlp) -> Self {
        GeodesicModel {
            net,
            time_embed: self.time_embed.clone(),
            dim: self.dim,
        }
    }

    fn input(&self, x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
        let emb = self.time_embed.embed(t);
        let mut v = Vec::with_capacity(2 * self.dim + emb.len());
        v.extend_from_slice(x0);
        v.extend_from_slice(x1);
        v.extend_from_slice(&emb);
        v
    }

    pub fn psi(&self, x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
        self.net.forward(&self.input(x0, x1, t))
    }

    /// psi and its time derivative (chain rule through the embedding),
    /// plus the dual cache for gradient assembly.
    pub fn psi_with_time_deriv(&self, x0: &[f64], x1: &[f64], t: f64) -> (Vec<f64>, Vec<f64>, DualCache) {
        let (emb, demb) = self.time_embed.embed_with_deriv(t);
        let mut u = Vec::with_capacity(2 * self.dim + emb.len());
        u.extend_from_slice(x0);
        u.extend_from_slice(x1);
        u.extend_from_slice(&emb);
        let mut tangent = vec![0.0; u.len()];
        tangent[2 * self.dim..].copy_from_slice(&demb);
        self.net.dual_forward(&u, &tangent)
    }
}

/// Point on the stochastic interpolant path. `eps = None` gives the
/// noise-free path; endpoints are exact for t in {0, 1} then.
pub fn path_point(
    geo: &GeodesicModel,
    x0: &[f64],
    x1: &[f64],
    t: f64,
    eps: Option<&[f64]>,
    sigma_flow: f64,
) -> Vec<f64> {
    let psi = geo.psi(x0, x1, t);
    let mut out = Vec::with_capacity(geo.dim);
    for i in 0..geo.dim {
        let mut v = (1.0 - t) * x0[i] + t * x1[i] + t * (1.0 - t) * psi[i];
        if let Some(e) = eps {
            v += sigma_flow * e[i];
        }
        out.push(v);
    }
    out
}

/// Path velocity `(x1 - x0) + (1 - 2t) psi + t(1-t) dpsi/dt`; the noise term
/// is held fixed in t, so it does not contribute.
pub fn path_velocity(geo: &GeodesicModel, x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    let (psi, dpsi, _) = geo.psi_with_time_deriv(x0, x1, t);
    (0..geo.dim)
        .map(|i| (x1[i] - x0[i]) + (1.0 - 2.0 * t) * psi[i] + t * (1.0 - t) * dpsi[i])
        .collect()
}

/// A training pair of endpoints.
pub type Pair = (Vec<f64>, Vec<f64>);

/// Draw endpoint pairs from the product measure of the dataset weights.
pub fn product_pairs(ds: &Dataset, batch: usize, seed: u64) -> Vec<Pair> {
    let a = crate::data::weighted_minibatch(ds, batch, mix_seed(seed, 0xA0, 0));
    let b = crate::data::weighted_minibatch(ds, batch, mix_seed(seed, 0xB1, 0));
    a.into_iter()
        .zip(b)
        .map(|(i, j)| (ds.row(i).to_vec(), ds.row(j).to_vec()))
        .collect()
}

/// Draw pairs from the product of two marginals given by row-index sets.
pub fn product_pairs_between(ds: &Dataset, from: &[usize], to: &[usize], batch: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let i = from[rng.gen_range(0..from.len())];
            let j = to[rng.gen_range(0..to.len())];
            (ds.row(i).to_vec(), ds.row(j).to_vec())
        })
        .collect()
}

/// Monte Carlo geodesic energy `E[G(x_t) ||xdot_t||^2]` over pairs, t, and
/// path noise, with the exact parameter gradient for psi.
pub fn geodesic_loss_grad(
    geo: &GeodesicModel,
    metric: &MetricField,
    pairs: &[Pair],
    sigma_flow: f64,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    let b = pairs.len() as f64;
    let d = geo.dim;
    let items: Vec<(usize, &Pair)> = pairs.iter().enumerate().collect();
    let (loss_sum, grads) = accumulate_batch(&items, &geo.net, |(idx, (x0, x1))| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, *idx as u64, 0));
        let t: f64 = rng.gen::<f64>();
        let (psi, dpsi, cache) = geo.psi_with_time_deriv(x0, x1, t);
        let mut xt = Vec::with_capacity(d);
        let mut xdot = Vec::with_capacity(d);
        for i in 0..d {
            let noise = if sigma_flow > 0.0 {
                sigma_flow * standard_normal(&mut rng)
            } else {
                0.0
            };
            xt.push((1.0 - t) * x0[i] + t * x1[i] + t * (1.0 - t) * psi[i] + noise);
            xdot.push((x1[i] - x0[i]) + (1.0 - 2.0 * t) * psi[i] + t * (1.0 - t) * dpsi[i]);
        }
        let (g, ggrad) = metric.metric_with_grad(&xt);
        let speed2: f64 = xdot.iter().map(|v| v * v).sum();
        let loss = g * speed2;

        // d loss / d psi = t(1-t) ||xdot||^2 grad G + 2 G (1-2t) xdot
        // d loss / d dpsi = 2 G t(1-t) xdot
        let tt = t * (1.0 - t);
        let cot: Vec<f64> = (0..d)
            .map(|i| (tt * speed2 * ggrad[i] + 2.0 * g * (1.0 - 2.0 * t) * xdot[i]) / b)
            .collect();
        let cot_dot: Vec<f64> = (0..d).map(|i| 2.0 * g * tt * xdot[i] / b).collect();
        let (pg, _, _) = geo.net.dual_backward(&cache, &cot, &cot_dot);
        (loss, pg)
    });
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("geodesic_loss"));
    }
    Ok((loss, grads))
}

/// Loss value only.
pub fn geodesic_loss(
    geo: &GeodesicModel,
    metric: &MetricField,
    pairs: &[Pair],
    sigma_flow: f64,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    let b = pairs.len() as f64;
    let d = geo.dim;
    let mut loss = 0.0;
    for (idx, (x0, x1)) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx as u64, 0));
        let t: f64 = rng.gen::<f64>();
        let (psi, dpsi, _) = geo.psi_with_time_deriv(x0, x1, t);
        let mut xt = Vec::with_capacity(d);
        let mut xdot = Vec::with_capacity(d);
        for i in 0..d {
            let noise = if sigma_flow > 0.0 {
                sigma_flow * standard_normal(&mut rng)
            } else {
                0.0
            };
            xt.push((1.0 - t) * x0[i] + t * x1[i] + t * (1.0 - t) * psi[i] + noise);
            xdot.push((x1[i] - x0[i]) + (1.0 - 2.0 * t) * psi[i] + t * (1.0 - t) * dpsi[i]);
        }
        let g = metric.metric_at(&xt);
        loss += g * xdot.iter().map(|v| v * v).sum::<f64>();
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("geodesic_loss"));
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct GeoTrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub sigma_flow: f64,
    pub opt: OptConfig,
    pub seed: u64,
}

/// Train psi by metric energy minimization. `sample_pairs(step)` supplies
/// the endpoint coupling for each step. Returns the loss trace and the EMA
/// weights.
pub fn train_geodesic(
    geo: &mut GeodesicModel,
    metric: &MetricField,
    cfg: &GeoTrainCfg,
    mut sample_pairs: impl FnMut(usize) -> Vec<Pair>,
) -> Result<(Vec<f64>, Mlp)> {
    let mut opt = OptState::new(&geo.net, cfg.opt);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pairs = sample_pairs(step);
        let seed = mix_seed(cfg.seed, 0x9E0, step as u64);
        let (loss, grads) = geodesic_loss_grad(geo, metric, &pairs, cfg.sigma_flow, seed).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage: "geodesic".into(),
                step,
            },
            other => other,
        })?;
        opt.apply(&mut geo.net, &grads)?;
        trace.push(loss);
    }
    Ok((trace, opt.ema))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_metric_is_one_everywhere() {
        let m = MetricField::identity();
        assert_eq!(m.metric_at(&[0.3, -5.0]), 1.0);
        let (g, grad) = m.metric_with_grad(&[1.0, 2.0]);
        assert_eq!(g, 1.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn endpoint_pinning_exact() {
        let geo = GeodesicModel::new(2, 8, 3, 4, 1);
        // Give psi nonzero output.
        let mut geo = geo;
        geo.net = Mlp::new(Role::Geodesic, 4 + 8, 8, 2, 3, false, 7);
        let x0 = vec![0.5, -1.0];
        let x1 = vec![-0.25, 2.0];
        let p0 = path_point(&geo, &x0, &x1, 0.0, None, 0.1);
        let p1 = path_point(&geo, &x0, &x1, 1.0, None, 0.1);
        assert_eq!(p0, x0);
        assert_eq!(p1, x1);
    }

    #[test]
    fn zero_psi_velocity_is_chord() {
        let geo = GeodesicModel::new(2, 8, 3, 4, 2); // zero output layer
        let x0 = vec![0.0, 0.0];
        let x1 = vec![1.0, 2.0];
        for &t in &[0.1, 0.5, 0.9] {
            let v = path_velocity(&geo, &x0, &x1, t);
            assert!((v[0] - 1.0).abs() < 1e-12);
            assert!((v[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_psi_formula() {
        // psi == c: x_t = line + t(1-t) c and xdot = (x1-x0) + (1-2t) c.
        let mut geo = GeodesicModel::new(1, 4, 2, 4, 3);
        // Force the net output constant c = 2: zero all weights, bias 2.
        for l in &mut geo.net.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        geo.net.layers.last_mut().unwrap().b[0] = 2.0;
        let x0 = vec![0.0];
        let x1 = vec![1.0];
        let t = 0.25;
        let p = path_point(&geo, &x0, &x1, t, None, 0.0);
        assert!((p[0] - (0.25 + 0.25 * 0.75 * 2.0)).abs() < 1e-12);
        let v = path_velocity(&geo, &x0, &x1, t);
        assert!((v[0] - (1.0 + 0.5 * 2.0)).abs() < 1e-12);
        let v_mid = path_velocity(&geo, &x0, &x1, 0.5);
        assert!((v_mid[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_matches_finite_difference_in_t() {
        let mut geo = GeodesicModel::new(3, 12, 3, 8, 4);
        geo.net = Mlp::new(Role::Geodesic, 6 + 16, 12, 3, 3, false, 11);
        let x0 = vec![0.2, -0.4, 1.0];
        let x1 = vec![-0.6, 0.9, 0.1];
        let h = 1e-5;
        for &t in &[0.2, 0.5, 0.77] {
            let v = path_velocity(&geo, &x0, &x1, t);
            let up = path_point(&geo, &x0, &x1, t + h, None, 0.0);
            let dn = path_point(&geo, &x0, &x1, t - h, None, 0.0);
            for i in 0..3 {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                let denom = fd.abs().max(v[i].abs()).max(1e-6);
                assert!((fd - v[i]).abs() / denom < 1e-4, "t={t} coord {i}");
            }
        }
    }

    #[test]
    fn geodesic_gradient_matches_finite_differences() {
        let mut geo = GeodesicModel::new(2, 10, 3, 4, 5);
        geo.net = Mlp::new(Role::Geodesic, 4 + 8, 10, 2, 3, false, 13);
        let metric = MetricField::constant(1.0);
        let pairs: Vec<Pair> = vec![
            (vec![0.0, 0.0], vec![1.0, 0.5]),
            (vec![-0.5, 1.0], vec![0.5, -1.0]),
        ];
        let (_, analytic) = geodesic_loss_grad(&geo, &metric, &pairs, 0.05, 17).unwrap();
        let h = 1e-5;
        let mut probe = geo.clone();
        let mut worst: f64 = 0.0;
        for li in 0..probe.net.layers.len() {
            for wi in (0..probe.net.layers[li].w.len()).step_by(9) {
                let orig = probe.net.layers[li].w[wi];
                probe.net.layers[li].w[wi] = orig + h;
                let up = geodesic_loss(&probe, &metric, &pairs, 0.05, 17).unwrap();
                probe.net.layers[li].w[wi] = orig - h;
                let dn = geodesic_loss(&probe, &metric, &pairs, 0.05, 17).unwrap();
                probe.net.layers[li].w[wi] = orig;
                let fd = (up - dn) / (2.0 * h);
                let got = analytic.layers[li].w[wi];
                let denom = fd.abs().max(got.abs()).max(1e-6);
                worst = worst.max((fd - got).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn loss_scales_linearly_in_constant_metric() {
        let mut geo = GeodesicModel::new(2, 8, 3, 4, 6);
        geo.net = Mlp::new(Role::Geodesic, 4 + 8, 8, 2, 3, false, 19);
        let pairs: Vec<Pair> = vec![(vec![0.0, 0.0], vec![1.0, 1.0])];
        let l1 = geodesic_loss(&geo, &MetricField::constant(1.0), &pairs, 0.0, 3).unwrap();
        let l2 = geodesic_loss(&geo, &MetricField::constant(2.0), &pairs, 0.0, 3).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-10);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut geo = GeodesicModel::new(2, 8, 2, 4, 7);
        let before = geo.net.clone();
        let metric = MetricField::identity();
        let cfg = GeoTrainCfg {
            steps: 0,
            batch_size: 4,
            sigma_flow: 0.1,
            opt: OptConfig::default(),
            seed: 1,
        };
        let (trace, ema) = train_geodesic(&mut geo, &metric, &cfg, |_| vec![(vec![0.0, 0.0], vec![1.0, 1.0])]).unwrap();
        assert!(trace.is_empty());
        assert_eq!(geo.net, before);
        assert_eq!(ema, before);
    }
}
