//! Denoising score matching in noise-prediction form, and energy
//! distillation against a frozen score.
//!
//! The score network predicts the noise; the score itself is recovered as
//! `-eps / sigma`. A temperature `beta` scales the regression target to
//! `eps / beta`. The energy network uses an inner-product head,
//! `E(x) = <net(x, cond), x>`, so `E(0) = 0` exactly and the input gradient
//! of `E` is available in closed form from the reverse pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{weighted_minibatch, Dataset};
use crate::error::{Error, Result};
use crate::nn::embed::{CondKind, SinEmbed};
use crate::nn::optim::{OptConfig, OptState};
use crate::nn::{accumulate_batch, concat_input, mix_seed, standard_normal, Mlp, MlpGrads, Role};

/// Strictly increasing noise scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Log-spaced scales between `sigma_min` and `sigma_max`.
    pub fn log_spaced(m: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if m < 1 || sigma_min <= 0.0 || (m > 1 && sigma_min >= sigma_max) {
            return Err(Error::Config(format!(
                "noise schedule needs m >= 1 and 0 < sigma_min < sigma_max, got m={m}, [{sigma_min}, {sigma_max}]"
            )));
        }
        let sigmas = if m == 1 {
            vec![sigma_min]
        } else {
            (0..m)
                .map(|i| {
                    let f = i as f64 / (m - 1) as f64;
                    sigma_min * (sigma_max / sigma_min).powf(f)
                })
                .collect()
        };
        Ok(NoiseSchedule { sigmas })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Score network: predicts noise given a noised point, a noise-scale
/// embedding, and optionally a cluster-id embedding.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub sigma_embed: SinEmbed,
    pub cluster_embed: Option<SinEmbed>,
    pub dim: usize,
}

impl ScoreModel {
    pub fn new(
        dim: usize,
        hidden_dim: usize,
        n_layers: usize,
        n_freq: usize,
        schedule: NoiseSchedule,
        cluster_conditioned: bool,
        seed: u64,
    ) -> Self {
        let sigma_embed = SinEmbed::new(CondKind::NoiseScale, n_freq);
        let cluster_embed = cluster_conditioned.then(|| SinEmbed::new(CondKind::ClusterId, n_freq));
        let in_dim =
            dim + sigma_embed.out_dim() + cluster_embed.as_ref().map_or(0, |e| e.out_dim());
        let net = Mlp::new(Role::Score, in_dim, hidden_dim, dim, n_layers, true, seed);
        ScoreModel {
            net,
            schedule,
            sigma_embed,
            cluster_embed,
            dim,
        }
    }

    /// Rebuild the wrapper around different weights (e.g. the EMA shadow).
    pub fn with_net(&self, net: Mlp) -> Self {
        ScoreModel {
            net,
            schedule: self.schedule.clone(),
            sigma_embed: self.sigma_embed.clone(),
            cluster_embed: self.cluster_embed.clone(),
            dim: self.dim,
        }
    }

    pub fn cluster_conditioned(&self) -> bool {
        self.cluster_embed.is_some()
    }

    pub fn input(&self, y: &[f64], sigma: f64, cluster: Option<usize>) -> Vec<f64> {
        let se = self.sigma_embed.embed(sigma);
        match (&self.cluster_embed, cluster) {
            (Some(ce), Some(j)) => concat_input(y, &[&se, &ce.embed(j as f64)]),
            (Some(ce), None) => concat_input(y, &[&se, &ce.embed(0.0)]),
            (None, _) => concat_input(y, &[&se]),
        }
    }

    pub fn eps_pred(&self, y: &[f64], sigma: f64, cluster: Option<usize>) -> Vec<f64> {
        self.net.forward(&self.input(y, sigma, cluster))
    }

    /// Score at `(y, sigma)`: `-eps_pred / sigma`.
    pub fn score(&self, y: &[f64], sigma: f64, cluster: Option<usize>) -> Vec<f64> {
        score_from_eps(&self.eps_pred(y, sigma, cluster), sigma)
    }
}

/// Convert a noise prediction to a score.
pub fn score_from_eps(eps_pred: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    eps_pred.iter().map(|e| -e / sigma).collect()
}

/// Energy network with the inner-product head `E(x) = <net(x, cond), x>`.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub sigma_embed: SinEmbed,
    pub cluster_embed: Option<SinEmbed>,
    pub dim: usize,
}

impl EnergyModel {
    pub fn new(
        dim: usize,
        hidden_dim: usize,
        n_layers: usize,
        n_freq: usize,
        schedule: NoiseSchedule,
        cluster_conditioned: bool,
        seed: u64,
    ) -> Self {
        let sigma_embed = SinEmbed::new(CondKind::NoiseScale, n_freq);
        let cluster_embed = cluster_conditioned.then(|| SinEmbed::new(CondKind::ClusterId, n_freq));
        let in_dim =
            dim + sigma_embed.out_dim() + cluster_embed.as_ref().map_or(0, |e| e.out_dim());
        let net = Mlp::new(Role::Energy, in_dim, hidden_dim, dim, n_layers, true, seed);
        EnergyModel {
            net,
            schedule,
            sigma_embed,
            cluster_embed,
            dim,
        }
    }

    pub fn with_net(&self, net: Mlp) -> Self {
        EnergyModel {
            net,
            schedule: self.schedule.clone(),
            sigma_embed: self.sigma_embed.clone(),
            cluster_embed: self.cluster_embed.clone(),
            dim: self.dim,
        }
    }

    pub fn cluster_conditioned(&self) -> bool {
        self.cluster_embed.is_some()
    }

    pub fn input(&self, x: &[f64], sigma: f64, cluster: Option<usize>) -> Vec<f64> {
        let se = self.sigma_embed.embed(sigma);
        match (&self.cluster_embed, cluster) {
            (Some(ce), Some(j)) => concat_input(x, &[&se, &ce.embed(j as f64)]),
            (Some(ce), None) => concat_input(x, &[&se, &ce.embed(0.0)]),
            (None, _) => concat_input(x, &[&se]),
        }
    }

    /// Energy value (defined up to an additive constant per condition).
    pub fn energy_at(&self, x: &[f64], sigma: f64, cluster: Option<usize>) -> f64 {
        let out = self.net.forward(&self.input(x, sigma, cluster));
        out.iter().zip(x).map(|(o, xi)| o * xi).sum()
    }

    /// Energy and its exact input gradient.
    pub fn energy_with_grad(&self, x: &[f64], sigma: f64, cluster: Option<usize>) -> (f64, Vec<f64>) {
        let u = self.input(x, sigma, cluster);
        let (out, cache) = self.net.forward_cached(&u);
        let e: f64 = out.iter().zip(x).map(|(o, xi)| o * xi).sum();
        // grad E = J^T x + net(u), restricted to the point coordinates.
        let gin = self.net.backward_input(&cache, x);
        let grad: Vec<f64> = gin[..self.dim]
            .iter()
            .zip(&out)
            .map(|(j, o)| j + o)
            .collect();
        (e, grad)
    }
}

/// One minibatch element: the dataset row id keeps the per-sample noise
/// stream stable under batch reordering.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: usize,
    pub x: &'a [f64],
    pub cluster: Option<usize>,
}

pub fn batch_from_dataset<'a>(ds: &'a Dataset, idx: &[usize], conditioned: bool) -> Vec<BatchItem<'a>> {
    idx.iter()
        .map(|&i| BatchItem {
            id: i,
            x: ds.row(i),
            cluster: if conditioned {
                Some(ds.cluster_id.as_ref().map_or(0, |c| c[i]))
            } else {
                None
            },
        })
        .collect()
}

pub(crate) fn draw_noise(seed: u64, id: usize, sigma_idx: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id as u64, sigma_idx as u64));
    (0..dim).map(|_| standard_normal(&mut rng)).collect()
}

/// Denoising score matching loss: mean over the batch, sum over noise
/// scales, one fresh noise draw per (sample, scale) derived from `seed`.
pub fn dsm_loss(score: &ScoreModel, batch: &[BatchItem], beta: f64, seed: u64) -> Result<f64> {
    let (loss, _) = dsm_loss_grad_impl(score, batch, beta, seed, false)?;
    Ok(loss)
}

/// DSM loss together with the exact gradient for the score parameters.
pub fn dsm_loss_grad(
    score: &ScoreModel,
    batch: &[BatchItem],
    beta: f64,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let (loss, grads) = dsm_loss_grad_impl(score, batch, beta, seed, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

fn dsm_loss_grad_impl(
    score: &ScoreModel,
    batch: &[BatchItem],
    beta: f64,
    seed: u64,
    want_grads: bool,
) -> Result<(f64, Option<MlpGrads>)> {
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.len() as f64;
    let (loss_sum, grads) = accumulate_batch(batch, &score.net, |item| {
        let mut loss = 0.0;
        let mut grads = MlpGrads::zeros_like(&score.net);
        for (i, &sigma) in score.schedule.sigmas.iter().enumerate() {
            let eps = draw_noise(seed, item.id, i, score.dim);
            let y: Vec<f64> = item.x.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
            let u = score.input(&y, sigma, item.cluster);
            if want_grads {
                let (pred, cache) = score.net.forward_cached(&u);
                let resid: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| p - e / beta).collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>();
                let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / b).collect();
                let (g, _) = score.net.backward(&cache, &cot);
                grads.add_assign(&g);
            } else {
                let pred = score.net.forward(&u);
                loss += pred
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| {
                        let r = p - e / beta;
                        r * r
                    })
                    .sum::<f64>();
            }
        }
        (loss, grads)
    });
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("dsm_loss"));
    }
    Ok((loss, want_grads.then_some(grads)))
}

/// Energy matching loss `|| grad E(y, sigma) + s(y, sigma) ||^2` against a
/// frozen score, with the exact gradient for the energy parameters. The
/// parameter gradient of an input-gradient term is assembled with a
/// forward-tangent pass followed by a reverse pass over it.
pub fn energy_match_loss_grad(
    energy: &EnergyModel,
    frozen_score: &ScoreModel,
    batch: &[BatchItem],
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.len() as f64;
    let d = energy.dim;
    let (loss_sum, grads) = accumulate_batch(batch, &energy.net, |item| {
        let mut loss = 0.0;
        let mut grads = MlpGrads::zeros_like(&energy.net);
        for (i, &sigma) in energy.schedule.sigmas.iter().enumerate() {
            let eps = draw_noise(seed, item.id, i, d);
            let y: Vec<f64> = item.x.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
            let s = frozen_score.score(&y, sigma, item.cluster);
            let (_, egrad) = energy.energy_with_grad(&y, sigma, item.cluster);
            let resid: Vec<f64> = egrad.iter().zip(&s).map(|(g, si)| g + si).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>();

            // d/dzeta ||grad E + s||^2 = d/dzeta (D_u E) with u = 2 resid / b
            // held fixed; D_u E = <tangent(net), y> + <net, u>.
            let u_in = energy.input(&y, sigma, item.cluster);
            let mut tangent = vec![0.0; u_in.len()];
            for k in 0..d {
                tangent[k] = 2.0 * resid[k] / b;
            }
            let (_, _, cache) = energy.net.dual_forward(&u_in, &tangent);
            let cot: Vec<f64> = tangent[..d].to_vec();
            let (g, _, _) = energy.net.dual_backward(&cache, &cot, &y);
            grads.add_assign(&g);
        }
        (loss, grads)
    });
    let loss = loss_sum / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("energy_match_loss"));
    }
    Ok((loss, grads))
}

/// Loss value only (for traces and tests).
pub fn energy_match_loss(
    energy: &EnergyModel,
    frozen_score: &ScoreModel,
    batch: &[BatchItem],
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut loss = 0.0;
    for item in batch {
        for (i, &sigma) in energy.schedule.sigmas.iter().enumerate() {
            let eps = draw_noise(seed, item.id, i, energy.dim);
            let y: Vec<f64> = item.x.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
            let s = frozen_score.score(&y, sigma, item.cluster);
            let (_, egrad) = energy.energy_with_grad(&y, sigma, item.cluster);
            loss += egrad.iter().zip(&s).map(|(g, si)| (g + si) * (g + si)).sum::<f64>();
        }
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("energy_match_loss"));
    }
    Ok(loss)
}

/// Shared knobs for the training loops.
#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub seed: u64,
    pub stage: String,
}

/// Train the score by plain DSM at temperature `beta`, sampling minibatches
/// by the dataset weights. Returns the loss trace and the EMA weights.
pub fn train_score_dsm(
    score: &mut ScoreModel,
    ds: &Dataset,
    beta: f64,
    cfg: &TrainCfg,
) -> Result<(Vec<f64>, Mlp)> {
    let mut opt = OptState::new(&score.net, cfg.opt);
    let mut trace = Vec::with_capacity(cfg.steps);
    let conditioned = score.cluster_conditioned();
    for step in 0..cfg.steps {
        let idx = weighted_minibatch(ds, cfg.batch_size, mix_seed(cfg.seed, 0xBA7C4, step as u64));
        let batch = batch_from_dataset(ds, &idx, conditioned);
        let noise_seed = mix_seed(cfg.seed, 0x4015E, step as u64);
        let (loss, grads) = dsm_loss_grad(score, &batch, beta, noise_seed).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage: cfg.stage.clone(),
                step,
            },
            other => other,
        })?;
        opt.apply(&mut score.net, &grads)?;
        trace.push(loss);
    }
    Ok((trace, opt.ema))
}

/// Distill the energy against a frozen score. Returns the loss trace and
/// the EMA weights.
pub fn train_energy_match(
    energy: &mut EnergyModel,
    frozen_score: &ScoreModel,
    ds: &Dataset,
    cfg: &TrainCfg,
) -> Result<(Vec<f64>, Mlp)> {
    let mut opt = OptState::new(&energy.net, cfg.opt);
    let mut trace = Vec::with_capacity(cfg.steps);
    let conditioned = energy.cluster_conditioned();
    for step in 0..cfg.steps {
        let idx = weighted_minibatch(ds, cfg.batch_size, mix_seed(cfg.seed, 0xE4E26, step as u64));
        let batch = batch_from_dataset(ds, &idx, conditioned);
        let noise_seed = mix_seed(cfg.seed, 0x9D157, step as u64);
        let (loss, grads) =
            energy_match_loss_grad(energy, frozen_score, &batch, noise_seed).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    stage: cfg.stage.clone(),
                    step,
                },
                other => other,
            })?;
        opt.apply(&mut energy.net, &grads)?;
        trace.push(loss);
    }
    Ok((trace, opt.ema))
}
