//! Isometric distance embedding, OT couplings under the learned distance,
//! flow-matching training, ODE integration, and the multi-timepoint
//! schedule.

pub mod ot;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeodesicModel, MetricField, Pair};
use crate::nn::embed::{CondKind, SinEmbed};
use crate::nn::optim::{OptConfig, OptState};
use crate::nn::{accumulate_batch, mix_seed, standard_normal, Mlp, MlpGrads, Role};
use ot::{cost_matrix, euclidean, ot_couple, OtSolver};

/// The distance embedding `f`: `d(x, y) = ||f(x) - f(y)||`. Uses residual
/// (skip) connections like the score and energy networks.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub net: Mlp,
    pub dim: usize,
    pub out_dim: usize,
}

impl EmbeddingModel {
    pub fn new(dim: usize, out_dim: usize, hidden_dim: usize, n_layers: usize, seed: u64) -> Self {
        let net = Mlp::new(Role::Embedding, dim, hidden_dim, out_dim, n_layers, true, seed);
        EmbeddingModel { net, dim, out_dim }
    }

    pub fn with_net(&self, net: Mlp) -> Self {
        EmbeddingModel {
            net,
            dim: self.dim,
            out_dim: self.out_dim,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(x)
    }
}

/// Learned distance between two points.
pub fn distance(f: &EmbeddingModel, x: &[f64], y: &[f64]) -> f64 {
    let fx = f.embed(x);
    let fy = f.embed(y);
    fx.iter()
        .zip(&fy)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Which residual the embedding loss penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLossForm {
    /// `(||d/dt f(x_t)||^2 - ||xdot||^2_G)^2`
    SquaredResidual,
    /// `| ||d/dt f(x_t)||^2 - ||xdot||^2_G |`
    AbsResidual,
}

/// Isometry loss: the squared (or absolute) mismatch between the embedded
/// path speed and the metric path speed, with exact gradients for `f`.
/// `d/dt f(x_t)` is the Jacobian-vector product of `f` along the path
/// velocity.
pub fn embedding_loss_grad(
    f: &EmbeddingModel,
    geo: &GeodesicModel,
    metric: &MetricField,
    pairs: &[Pair],
    sigma_flow: f64,
    form: EmbeddingLossForm,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let (loss, grads) = embedding_loss_impl(f, geo, metric, pairs, sigma_flow, form, seed, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

pub fn embedding_loss(
    f: &EmbeddingModel,
    geo: &GeodesicModel,
    metric: &MetricField,
    pairs: &[Pair],
    sigma_flow: f64,
    form: EmbeddingLossForm,
    seed: u64,
) -> Result<f64> {
    let (loss, _) = embedding_loss_impl(f, geo, metric, pairs, sigma_flow, form, seed, false)?;
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn embedding_loss_impl(
    f: &EmbeddingModel,
    geo: &GeodesicModel,
    metric: &MetricField,
    pairs: &[Pair],
    sigma_flow: f64,
    form: EmbeddingLossForm,
    seed: u64,
    want_grads: bool,
) -> Result<(f64, Option<MlpGrads>)> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    let b = pairs.len() as f64;
    let d = geo.dim;
    let items: Vec<(usize, &Pair)> = pairs.iter().enumerate().collect();
    let (loss_sum, grads) = accumulate_batch(&items, &f.net, |(idx, (x0, x1))| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, *idx as u64, 0));
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
        let target = g * xdot.iter().map(|v| v * v).sum::<f64>();
        let (_, w, cache) = f.net.dual_forward(&xt, &xdot);
        let speed2: f64 = w.iter().map(|v| v * v).sum();
        let resid = speed2 - target;
        let (loss, factor) = match form {
            EmbeddingLossForm::SquaredResidual => (resid * resid, 4.0 * resid),
            EmbeddingLossForm::AbsResidual => (resid.abs(), 2.0 * resid.signum()),
        };
        if !want_grads {
            return (loss, MlpGrads::zeros_like(&f.net));
        }
        // dL/dphi through ||w||^2 only: cotangent on the tangent output.
        let cot = vec![0.0; w.len()];
        let cot_dot: Vec<f64> = w.iter().map(|v| factor * v / b).collect();
        let (pg, _, _) = f.net.dual_backward(&cache, &cot, &cot_dot);
        (loss, pg)
    });
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("embedding_loss"));
    }
    Ok((loss, want_grads.then_some(grads)))
}

/// The flow-matching network `v(t, x)`.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub net: Mlp,
    pub time_embed: SinEmbed,
    pub dim: usize,
}

impl FlowModel {
    pub fn new(dim: usize, hidden_dim: usize, n_layers: usize, n_freq: usize, seed: u64) -> Self {
        let time_embed = SinEmbed::new(CondKind::Time, n_freq);
        let net = Mlp::new(
            Role::Flow,
            dim + time_embed.out_dim(),
            hidden_dim,
            dim,
            n_layers,
            false,
            seed,
        );
        FlowModel {
            net,
            time_embed,
            dim,
        }
    }

    pub fn with_net(&self, net: Mlp) -> Self {
        FlowModel {
            net,
            time_embed: self.time_embed.clone(),
            dim: self.dim,
        }
    }

    fn input(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let emb = self.time_embed.embed(t);
        let mut v = Vec::with_capacity(x.len() + emb.len());
        v.extend_from_slice(x);
        v.extend_from_slice(&emb);
        v
    }

    pub fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.net.forward(&self.input(t, x))
    }
}

/// A coupled endpoint pair living on a global-time segment `[u0, u1]`.
/// Sphere-style two-marginal problems use a single segment `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SegmentPair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub u0: f64,
    pub u1: f64,
}

impl SegmentPair {
    pub fn unit(p: Pair) -> Self {
        SegmentPair {
            x0: p.0,
            x1: p.1,
            u0: 0.0,
            u1: 1.0,
        }
    }
}

/// Flow-matching loss `|| v(t, x_t) - dx_t/dt ||^2` along frozen geodesic
/// paths, in global time (per-segment velocities are rescaled by the
/// segment width).
pub fn flow_loss_grad(
    v: &FlowModel,
    geo: &GeodesicModel,
    batch: &[SegmentPair],
    sigma_flow: f64,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let (loss, grads) = flow_loss_impl(v, geo, batch, sigma_flow, seed, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

pub fn flow_loss(
    v: &FlowModel,
    geo: &GeodesicModel,
    batch: &[SegmentPair],
    sigma_flow: f64,
    seed: u64,
) -> Result<f64> {
    let (loss, _) = flow_loss_impl(v, geo, batch, sigma_flow, seed, false)?;
    Ok(loss)
}

fn flow_loss_impl(
    v: &FlowModel,
    geo: &GeodesicModel,
    batch: &[SegmentPair],
    sigma_flow: f64,
    seed: u64,
    want_grads: bool,
) -> Result<(f64, Option<MlpGrads>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.len() as f64;
    let d = v.dim;
    let items: Vec<(usize, &SegmentPair)> = batch.iter().enumerate().collect();
    let (loss_sum, grads) = accumulate_batch(&items, &v.net, |(idx, sp)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, *idx as u64, 1));
        let tau: f64 = rng.gen::<f64>();
        let width = sp.u1 - sp.u0;
        let t_global = sp.u0 + tau * width;
        let (psi, dpsi, _) = geo.psi_with_time_deriv(&sp.x0, &sp.x1, tau);
        let mut xt = Vec::with_capacity(d);
        let mut target = Vec::with_capacity(d);
        for i in 0..d {
            let noise = if sigma_flow > 0.0 {
                sigma_flow * standard_normal(&mut rng)
            } else {
                0.0
            };
            xt.push((1.0 - tau) * sp.x0[i] + tau * sp.x1[i] + tau * (1.0 - tau) * psi[i] + noise);
            let local = (sp.x1[i] - sp.x0[i]) + (1.0 - 2.0 * tau) * psi[i] + tau * (1.0 - tau) * dpsi[i];
            target.push(local / width);
        }
        let u = v.input(t_global, &xt);
        if want_grads {
            let (pred, cache) = v.net.forward_cached(&u);
            let mut loss = 0.0;
            let cot: Vec<f64> = pred
                .iter()
                .zip(&target)
                .map(|(p, tv)| {
                    let r = p - tv;
                    loss += r * r;
                    2.0 * r / b
                })
                .collect();
            let (g, _) = v.net.backward(&cache, &cot);
            (loss, g)
        } else {
            let pred = v.net.forward(&u);
            let loss = pred
                .iter()
                .zip(&target)
                .map(|(p, tv)| (p - tv) * (p - tv))
                .sum::<f64>();
            (loss, MlpGrads::zeros_like(&v.net))
        }
    });
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("flow_loss"));
    }
    Ok((loss, want_grads.then_some(grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrateMethod {
    Euler,
    Rk4,
}

/// Integrate a vector field from `x_start` over `[t0, t1]`; returns the
/// `n_steps + 1` trajectory points. Aborts with the step index if the state
/// goes non-finite.
pub fn integrate(
    field: impl Fn(f64, &[f64]) -> Vec<f64>,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    method: IntegrateMethod,
) -> Result<Vec<Vec<f64>>> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut x = x_start.to_vec();
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(x.clone());
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        match method {
            IntegrateMethod::Euler => {
                let k = field(t, &x);
                for (xi, ki) in x.iter_mut().zip(&k) {
                    *xi += h * ki;
                }
            }
            IntegrateMethod::Rk4 => {
                let k1 = field(t, &x);
                let x2: Vec<f64> = x.iter().zip(&k1).map(|(xi, ki)| xi + 0.5 * h * ki).collect();
                let k2 = field(t + 0.5 * h, &x2);
                let x3: Vec<f64> = x.iter().zip(&k2).map(|(xi, ki)| xi + 0.5 * h * ki).collect();
                let k3 = field(t + 0.5 * h, &x3);
                let x4: Vec<f64> = x.iter().zip(&k3).map(|(xi, ki)| xi + h * ki).collect();
                let k4 = field(t + h, &x4);
                for i in 0..x.len() {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "integrate".into(),
                detail: Some(format!("state diverged at step {step}")),
            });
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Integrate a trained flow network.
pub fn integrate_flow(
    v: &FlowModel,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    method: IntegrateMethod,
) -> Result<Vec<Vec<f64>>> {
    integrate(|t, x| v.velocity(t, x), x_start, t0, t1, n_steps, method)
}

/// One consecutive-timepoint training segment in normalized global time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_from: i64,
    pub t_to: i64,
    pub u_from: f64,
    pub u_to: f64,
}

/// Where to evaluate a held-out marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub t_star: i64,
    pub t_from: i64,
    pub t_to: i64,
    /// Global time of the held-out marginal.
    pub u_star: f64,
    /// Fraction of the flanking segment, `(t* - from) / (to - from)`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointSchedule {
    pub segments: Vec<Segment>,
    pub holdout: Option<HoldoutSpec>,
}

/// Map observed timepoint labels to normalized global time proportional to
/// label gaps; when a holdout is given, its flanking observed timepoints
/// form a training segment and the holdout is evaluated at its fraction.
pub fn multi_timepoint_schedule(observed: &[i64], holdout: Option<i64>) -> Result<TimepointSchedule> {
    let mut labels: Vec<i64> = observed.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if let Some(h) = holdout {
        labels.retain(|&t| t != h);
    }
    if labels.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 training timepoints, got {labels:?}"
        )));
    }
    if let Some(h) = holdout {
        if h < labels[0] || h > labels[labels.len() - 1] {
            return Err(Error::Config(format!(
                "holdout {h} has no flanking timepoints within {labels:?}"
            )));
        }
    }
    let lo = labels[0] as f64;
    let span = (labels[labels.len() - 1] - labels[0]) as f64;
    let u = |t: i64| (t as f64 - lo) / span;
    let segments: Vec<Segment> = labels
        .windows(2)
        .map(|w| Segment {
            t_from: w[0],
            t_to: w[1],
            u_from: u(w[0]),
            u_to: u(w[1]),
        })
        .collect();
    let holdout = match holdout {
        None => None,
        Some(h) => {
            let seg = segments
                .iter()
                .find(|s| s.t_from < h && h < s.t_to)
                .ok_or_else(|| Error::Config(format!("holdout {h} coincides with a training timepoint")))?;
            Some(HoldoutSpec {
                t_star: h,
                t_from: seg.t_from,
                t_to: seg.t_to,
                u_star: u(h),
                fraction: (h - seg.t_from) as f64 / (seg.t_to - seg.t_from) as f64,
            })
        }
    };
    Ok(TimepointSchedule { segments, holdout })
}

/// How minibatch endpoints are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingStrategy {
    /// Keep the sampled order (product measure).
    Product,
    /// Exact OT under the squared learned distance.
    OtEmbedding,
    /// Exact OT under the squared Euclidean distance.
    OtEuclidean,
}

/// Pair two equal-size batches under the chosen strategy. `f` is required
/// for [`CouplingStrategy::OtEmbedding`].
pub fn couple_batches(
    b0: Vec<Vec<f64>>,
    b1: Vec<Vec<f64>>,
    strategy: CouplingStrategy,
    f: Option<&EmbeddingModel>,
) -> Result<Vec<Pair>> {
    match strategy {
        CouplingStrategy::Product => Ok(b0.into_iter().zip(b1).collect()),
        CouplingStrategy::OtEuclidean => {
            let c = cost_matrix(&b0, &b1, |a, b| {
                let d = euclidean(a, b);
                d * d
            });
            let coupling = ot_couple(&c, b0.len(), b1.len(), OtSolver::Exact, "sq_euclidean")?;
            Ok(coupling
                .pairs
                .into_iter()
                .map(|(i, j)| (b0[i].clone(), b1[j].clone()))
                .collect())
        }
        CouplingStrategy::OtEmbedding => {
            let f = f.ok_or_else(|| Error::Config("embedding coupling needs a trained embedding".into()))?;
            let e0: Vec<Vec<f64>> = b0.iter().map(|x| f.embed(x)).collect();
            let e1: Vec<Vec<f64>> = b1.iter().map(|x| f.embed(x)).collect();
            let c = cost_matrix(&e0, &e1, |a, b| {
                let d = euclidean(a, b);
                d * d
            });
            let coupling = ot_couple(&c, b0.len(), b1.len(), OtSolver::Exact, "sq_learned_distance")?;
            Ok(coupling
                .pairs
                .into_iter()
                .map(|(i, j)| (b0[i].clone(), b1[j].clone()))
                .collect())
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportTrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub sigma_flow: f64,
    pub opt: OptConfig,
    pub seed: u64,
}

/// Train the distance embedding. `raw_batches(step)` supplies two endpoint
/// batches; they are re-coupled each step with the CURRENT embedding when
/// the strategy asks for it (the coupling in the isometry loss is defined
/// through the distance being learned).
pub fn train_embedding(
    f: &mut EmbeddingModel,
    geo: &GeodesicModel,
    metric: &MetricField,
    strategy: CouplingStrategy,
    form: EmbeddingLossForm,
    cfg: &TransportTrainCfg,
    mut raw_batches: impl FnMut(usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>),
) -> Result<(Vec<f64>, Mlp)> {
    let mut opt = OptState::new(&f.net, cfg.opt);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (b0, b1) = raw_batches(step);
        let pairs = couple_batches(b0, b1, strategy, Some(f))?;
        let seed = mix_seed(cfg.seed, 0xE3B, step as u64);
        let (loss, grads) =
            embedding_loss_grad(f, geo, metric, &pairs, cfg.sigma_flow, form, seed).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    stage: "embedding".into(),
                    step,
                },
                other => other,
            })?;
        opt.apply(&mut f.net, &grads)?;
        trace.push(loss);
    }
    Ok((trace, opt.ema))
}

/// Train the flow field on coupled segment pairs.
pub fn train_flow(
    v: &mut FlowModel,
    geo: &GeodesicModel,
    cfg: &TransportTrainCfg,
    mut batches: impl FnMut(usize) -> Result<Vec<SegmentPair>>,
) -> Result<(Vec<f64>, Mlp)> {
    let mut opt = OptState::new(&v.net, cfg.opt);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batches(step)?;
        let seed = mix_seed(cfg.seed, 0xF10, step as u64);
        let (loss, grads) = flow_loss_grad(v, geo, &batch, cfg.sigma_flow, seed).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage: "flow".into(),
                step,
            },
            other => other,
        })?;
        opt.apply(&mut v.net, &grads)?;
        trace.push(loss);
    }
    Ok((trace, opt.ema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeodesicModel;

    #[test]
    fn distance_axioms() {
        let f = EmbeddingModel::new(3, 3, 8, 3, 1);
        let x = vec![0.2, -0.5, 1.0];
        let y = vec![1.0, 0.0, -0.3];
        let z = vec![-0.4, 0.8, 0.2];
        assert_eq!(distance(&f, &x, &x), 0.0);
        assert_eq!(distance(&f, &x, &y), distance(&f, &y, &x));
        let dxy = distance(&f, &x, &y);
        let dyz = distance(&f, &y, &z);
        let dxz = distance(&f, &x, &z);
        assert!(dxz <= dxy + dyz + 1e-12);
    }

    #[test]
    fn triangle_inequality_random_triples() {
        let f = EmbeddingModel::new(2, 2, 6, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let d01 = distance(&f, &p[0], &p[1]);
            let d12 = distance(&f, &p[1], &p[2]);
            let d02 = distance(&f, &p[0], &p[2]);
            assert!(d02 <= d01 + d12 + 1e-12);
        }
    }

    #[test]
    fn identity_embedding_zero_residual_under_unit_metric() {
        // f = identity, psi = 0, G = 1: embedded speed equals metric speed.
        let mut f = EmbeddingModel::new(2, 2, 2, 1, 2);
        f.net.layers[0].w = vec![1.0, 0.0, 0.0, 1.0];
        f.net.layers[0].b = vec![0.0, 0.0];
        let geo = GeodesicModel::new(2, 4, 2, 4, 3); // zero output layer
        let metric = MetricField::constant(1.0);
        let pairs: Vec<Pair> = vec![
            (vec![0.0, 0.0], vec![1.0, 2.0]),
            (vec![0.5, -1.0], vec![-0.5, 0.75]),
        ];
        let loss = embedding_loss(&f, &geo, &metric, &pairs, 0.0, EmbeddingLossForm::SquaredResidual, 9).unwrap();
        assert!(loss < 1e-24, "loss {loss}");
    }

    #[test]
    fn doubled_identity_has_positive_residual() {
        let mut f = EmbeddingModel::new(2, 2, 2, 1, 2);
        f.net.layers[0].w = vec![2.0, 0.0, 0.0, 2.0];
        f.net.layers[0].b = vec![0.0, 0.0];
        let geo = GeodesicModel::new(2, 4, 2, 4, 3);
        let metric = MetricField::constant(1.0);
        let pairs: Vec<Pair> = vec![(vec![0.0, 0.0], vec![1.0, 2.0])];
        let loss = embedding_loss(&f, &geo, &metric, &pairs, 0.0, EmbeddingLossForm::SquaredResidual, 9).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let f = EmbeddingModel::new(2, 2, 8, 3, 21);
        let mut geo = GeodesicModel::new(2, 6, 2, 4, 22);
        geo.net = Mlp::new(Role::Geodesic, 4 + 8, 6, 2, 2, false, 23);
        let metric = MetricField::constant(1.5);
        let pairs: Vec<Pair> = vec![
            (vec![0.1, 0.4], vec![0.9, -0.2]),
            (vec![-0.7, 0.0], vec![0.3, 0.8]),
        ];
        let (_, analytic) =
            embedding_loss_grad(&f, &geo, &metric, &pairs, 0.05, EmbeddingLossForm::SquaredResidual, 33).unwrap();
        let mut probe = f.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for li in 0..probe.net.layers.len() {
            for wi in (0..probe.net.layers[li].w.len()).step_by(5) {
                let orig = probe.net.layers[li].w[wi];
                probe.net.layers[li].w[wi] = orig + h;
                let up =
                    embedding_loss(&probe, &geo, &metric, &pairs, 0.05, EmbeddingLossForm::SquaredResidual, 33).unwrap();
                probe.net.layers[li].w[wi] = orig - h;
                let dn =
                    embedding_loss(&probe, &geo, &metric, &pairs, 0.05, EmbeddingLossForm::SquaredResidual, 33).unwrap();
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
    fn flow_gradient_matches_finite_differences() {
        let v = FlowModel::new(2, 8, 3, 4, 31);
        let mut geo = GeodesicModel::new(2, 6, 2, 4, 32);
        geo.net = Mlp::new(Role::Geodesic, 4 + 8, 6, 2, 2, false, 33);
        let batch: Vec<SegmentPair> = vec![
            SegmentPair::unit((vec![0.0, 0.0], vec![1.0, 1.0])),
            SegmentPair {
                x0: vec![0.5, -0.5],
                x1: vec![-0.5, 0.5],
                u0: 0.25,
                u1: 0.75,
            },
        ];
        let (_, analytic) = flow_loss_grad(&v, &geo, &batch, 0.05, 44).unwrap();
        let mut probe = v.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for li in 0..probe.net.layers.len() {
            for wi in (0..probe.net.layers[li].w.len()).step_by(13) {
                let orig = probe.net.layers[li].w[wi];
                probe.net.layers[li].w[wi] = orig + h;
                let up = flow_loss(&probe, &geo, &batch, 0.05, 44).unwrap();
                probe.net.layers[li].w[wi] = orig - h;
                let dn = flow_loss(&probe, &geo, &batch, 0.05, 44).unwrap();
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
    fn integrate_zero_field_is_constant() {
        let traj = integrate(|_, x| vec![0.0; x.len()], &[1.0, 2.0], 0.0, 1.0, 10, IntegrateMethod::Rk4).unwrap();
        assert_eq!(traj.len(), 11);
        for p in traj {
            assert_eq!(p, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn integrate_constant_field_exact() {
        let traj = integrate(|_, _| vec![0.5, -1.0], &[0.0, 0.0], 0.0, 1.0, 7, IntegrateMethod::Rk4).unwrap();
        let end = traj.last().unwrap();
        assert!((end[0] - 0.5).abs() < 1e-12);
        assert!((end[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_linear_field_matches_exponential() {
        let traj = integrate(|_, x| x.to_vec(), &[1.0], 0.0, 1.0, 100, IntegrateMethod::Rk4).unwrap();
        let end = traj.last().unwrap()[0];
        assert!((end - std::f64::consts::E).abs() < 1e-6, "{end}");
    }

    #[test]
    fn integrate_reports_divergence_step() {
        let err = integrate(|_, x| vec![x[0] * f64::NAN], &[1.0], 0.0, 1.0, 4, IntegrateMethod::Euler).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
    }

    #[test]
    fn schedule_uniform_labels() {
        let sched = multi_timepoint_schedule(&[1, 2, 3, 4, 5], Some(3)).unwrap();
        let h = sched.holdout.unwrap();
        assert_eq!((h.t_from, h.t_to), (2, 4));
        assert!((h.fraction - 0.5).abs() < 1e-15);
        assert!((h.u_star - 0.5).abs() < 1e-15);
        assert_eq!(sched.segments.len(), 3);
        assert!((sched.segments[1].u_from - 0.25).abs() < 1e-15);
        assert!((sched.segments[1].u_to - 0.75).abs() < 1e-15);
    }

    #[test]
    fn schedule_uneven_labels() {
        // Days 2, 3, 4, 7 with day 3 held out.
        let sched = multi_timepoint_schedule(&[2, 3, 4, 7], Some(3)).unwrap();
        let h = sched.holdout.unwrap();
        assert_eq!((h.t_from, h.t_to), (2, 4));
        assert!((h.fraction - 0.5).abs() < 1e-15);
        assert!((h.u_star - 0.2).abs() < 1e-15, "u_star {}", h.u_star);
    }

    #[test]
    fn boundary_holdout_rejected() {
        let err = multi_timepoint_schedule(&[2, 3, 4], Some(2)).unwrap_err();
        assert!(err.to_string().contains("flanking"), "{err}");
    }

    #[test]
    fn product_coupling_keeps_order() {
        let b0 = vec![vec![0.0], vec![1.0]];
        let b1 = vec![vec![2.0], vec![3.0]];
        let pairs = couple_batches(b0, b1, CouplingStrategy::Product, None).unwrap();
        assert_eq!(pairs[0], (vec![0.0], vec![2.0]));
        assert_eq!(pairs[1], (vec![1.0], vec![3.0]));
    }
}
