//! Adam-style optimizer with global-norm gradient clipping and an EMA
//! shadow of the parameters.

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            learning_rate: 1e-4,
            grad_clip: 10.0,
            ema_decay: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one network: step count, first/second moments, and
/// the EMA shadow parameters.
#[derive(Debug, Clone)]
pub struct OptState {
    pub config: OptConfig,
    pub step: u64,
    pub m: MlpGrads,
    pub v: MlpGrads,
    pub ema: Mlp,
}

impl OptState {
    pub fn new(params: &Mlp, config: OptConfig) -> Self {
        OptState {
            config,
            step: 0,
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
            ema: params.clone(),
        }
    }

    /// One optimizer step: clip, moment update, parameter update, EMA update.
    pub fn apply(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::non_finite("gradient"));
        }
        let mut grads = grads.clone();
        clip_global_norm(&mut grads, self.config.grad_clip);

        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m.layers[li];
            let v = &mut self.v.layers[li];
            for i in 0..layer.w.len() {
                m.w[i] = c.beta1 * m.w[i] + (1.0 - c.beta1) * g.w[i];
                v.w[i] = c.beta2 * v.w[i] + (1.0 - c.beta2) * g.w[i] * g.w[i];
                layer.w[i] -= c.learning_rate * (m.w[i] / bc1) / ((v.w[i] / bc2).sqrt() + c.eps);
            }
            for i in 0..layer.b.len() {
                m.b[i] = c.beta1 * m.b[i] + (1.0 - c.beta1) * g.b[i];
                v.b[i] = c.beta2 * v.b[i] + (1.0 - c.beta2) * g.b[i] * g.b[i];
                layer.b[i] -= c.learning_rate * (m.b[i] / bc1) / ((v.b[i] / bc2).sqrt() + c.eps);
            }
        }
        for (se, pe) in self.ema.layers.iter_mut().zip(&params.layers) {
            for (s, p) in se.w.iter_mut().zip(&pe.w) {
                *s = c.ema_decay * *s + (1.0 - c.ema_decay) * *p;
            }
            for (s, p) in se.b.iter_mut().zip(&pe.b) {
                *s = c.ema_decay * *s + (1.0 - c.ema_decay) * *p;
            }
        }
        Ok(())
    }
}

/// Scale `grads` so its global norm does not exceed `threshold`.
pub fn clip_global_norm(grads: &mut MlpGrads, threshold: f64) {
    let norm = grads.global_norm();
    if norm > threshold && norm > 0.0 {
        grads.scale(threshold / norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Role;

    #[test]
    fn clip_scales_to_threshold() {
        let m = Mlp::new(Role::Flow, 2, 4, 2, 2, false, 1);
        let mut g = MlpGrads::zeros_like(&m);
        // Construct a gradient with norm 100.
        let n_entries: usize = g.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
        let val = 100.0 / (n_entries as f64).sqrt();
        for l in &mut g.layers {
            l.w.iter_mut().for_each(|v| *v = val);
            l.b.iter_mut().for_each(|v| *v = val);
        }
        assert!((g.global_norm() - 100.0).abs() < 1e-9);
        clip_global_norm(&mut g, 10.0);
        assert!((g.global_norm() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params_ema_approaches() {
        let mut params = Mlp::new(Role::Flow, 2, 4, 2, 2, false, 2);
        let mut opt = OptState::new(&params, OptConfig::default());
        // Seed the EMA away from the params to watch it move toward them.
        opt.ema.layers[0].w[0] += 1.0;
        let before = params.clone();
        let distance_before = (opt.ema.layers[0].w[0] - params.layers[0].w[0]).abs();
        let g = MlpGrads::zeros_like(&params);
        opt.apply(&mut params, &g).unwrap();
        assert_eq!(params, before, "zero gradient must not move params");
        let distance_after = (opt.ema.layers[0].w[0] - params.layers[0].w[0]).abs();
        assert!(distance_after < distance_before);
    }

    #[test]
    fn ema_recurrence_is_exact() {
        let mut params = Mlp::new(Role::Flow, 2, 4, 2, 2, false, 3);
        let cfg = OptConfig::default();
        let mut opt = OptState::new(&params, cfg);
        let mut g = MlpGrads::zeros_like(&params);
        g.layers[0].w[0] = 0.5;
        let shadow_prev = opt.ema.clone();
        opt.apply(&mut params, &g).unwrap();
        for (li, l) in opt.ema.layers.iter().enumerate() {
            for (i, s) in l.w.iter().enumerate() {
                let expect =
                    cfg.ema_decay * shadow_prev.layers[li].w[i] + (1.0 - cfg.ema_decay) * params.layers[li].w[i];
                assert_eq!(s.to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn least_squares_converges() {
        // Fit y = A x with a 1-layer net; a closed-form optimum exists, so the
        // loss must fall below 1e-3 after enough steps.
        let mut params = Mlp::new(Role::Flow, 2, 2, 2, 1, false, 4);
        let mut opt = OptState::new(
            &params,
            OptConfig {
                learning_rate: 0.05,
                ..OptConfig::default()
            },
        );
        let a = [[1.5, -0.3], [0.2, 0.8]];
        let xs: Vec<[f64; 2]> = vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -0.7]];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut grads = MlpGrads::zeros_like(&params);
            let mut loss = 0.0;
            for x in &xs {
                let target = [
                    a[0][0] * x[0] + a[0][1] * x[1],
                    a[1][0] * x[0] + a[1][1] * x[1],
                ];
                let (y, cache) = params.forward_cached(x.as_slice());
                let cot: Vec<f64> = y.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
                loss += y.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
                let (g, _) = params.backward(&cache, &cot);
                grads.add_assign(&g);
            }
            losses.push(loss);
            opt.apply(&mut params, &grads).unwrap();
        }
        assert!(losses.last().unwrap() < &1e-3, "final loss {}", losses.last().unwrap());
        // Decreasing after warmup (chunk means, since Adam wiggles locally).
        let chunk_mean = |r: std::ops::Range<usize>| losses[r.clone()].iter().sum::<f64>() / r.len() as f64;
        assert!(chunk_mean(50..100) > chunk_mean(100..150));
        assert!(chunk_mean(100..150) > chunk_mean(150..200));
    }
}
