//! Feed-forward network substrate used by all five learned networks.
//!
//! Everything is f64 and deterministic given a seed. Besides the usual
//! forward/backward pair, the module exposes a *dual* pass that carries a
//! directional derivative (JVP) through the network together with the primal
//! values, and a reverse pass over that dual program. Losses that involve
//! input gradients of a network (energy gradients, time derivatives of a
//! path network) assemble their exact parameter gradients from these four
//! primitives.

pub mod checkpoint;
pub mod embed;
pub mod optim;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the five networks a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Score,
    Energy,
    Geodesic,
    Embedding,
    Flow,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Score => "score",
            Role::Energy => "energy",
            Role::Geodesic => "geodesic",
            Role::Embedding => "embedding",
            Role::Flow => "flow",
        }
    }
}

/// One dense layer, row-major weights `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// `out = W x` without the bias (tangent propagation).
    fn apply_no_bias(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// `out += W^T g`.
    fn apply_transposed_into(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.out_dim);
        debug_assert_eq!(out.len(), self.in_dim);
        for o in 0..self.out_dim {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (oi, wi) in out.iter_mut().zip(row) {
                *oi += wi * go;
            }
        }
    }
}

/// Parameters of one network: a plain MLP, optionally with residual
/// connections around the equal-width hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub role: Role,
    pub layers: Vec<Linear>,
    pub residual: bool,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

fn silu_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    let ds = s * (1.0 - s);
    2.0 * ds + x * ds * (1.0 - 2.0 * s)
}

impl Mlp {
    /// Build a seeded network. `n_layers` counts dense layers; hidden layers
    /// use a SiLU nonlinearity, the output layer is linear. With
    /// `residual = true` every equal-width hidden layer becomes
    /// `a + silu(W a + b)`.
    pub fn new(
        role: Role,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        n_layers: usize,
        residual: bool,
        seed: u64,
    ) -> Self {
        assert!(n_layers >= 1, "need at least one layer");
        assert!(in_dim >= 1 && out_dim >= 1 && hidden_dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = if n_layers == 1 {
                (in_dim, out_dim)
            } else if l == 0 {
                (in_dim, hidden_dim)
            } else if l == n_layers - 1 {
                (hidden_dim, out_dim)
            } else {
                (hidden_dim, hidden_dim)
            };
            let std = (1.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| standard_normal(&mut rng) * std)
                .collect();
            layers.push(Linear {
                w,
                b: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Mlp {
            role,
            layers,
            residual,
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Zero the final layer so the network is exactly the zero map at init.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w.iter_mut().for_each(|v| *v = 0.0);
        last.b.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Validate the shape chain and finiteness of all entries.
    pub fn validate(&self) -> Result<()> {
        let mut dim = self.in_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != dim {
                return Err(Error::shape(
                    format!("{} layer {i}", self.role.as_str()),
                    dim,
                    l.in_dim,
                ));
            }
            if l.w.len() != l.in_dim * l.out_dim || l.b.len() != l.out_dim {
                return Err(Error::shape(
                    format!("{} layer {i} storage", self.role.as_str()),
                    format!("{}x{}", l.out_dim, l.in_dim),
                    format!("w={}, b={}", l.w.len(), l.b.len()),
                ));
            }
            dim = l.out_dim;
        }
        if dim != self.out_dim {
            return Err(Error::shape("output dim", self.out_dim, dim));
        }
        if self.residual {
            for (i, l) in self.layers.iter().enumerate() {
                let is_hidden = i > 0 && i + 1 < self.layers.len();
                if is_hidden && l.in_dim != l.out_dim {
                    return Err(Error::shape(
                        format!("residual layer {i} widths"),
                        l.in_dim,
                        l.out_dim,
                    ));
                }
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: format!("{} layer {i} params", self.role.as_str()),
                    detail: None,
                });
            }
        }
        Ok(())
    }

    fn residual_at(&self, layer: usize) -> bool {
        self.residual
            && layer > 0
            && layer + 1 < self.layers.len()
            && self.layers[layer].in_dim == self.layers[layer].out_dim
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "input dim mismatch");
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&a, &mut z);
            if l == last {
                return z;
            }
            let res = self.residual_at(l);
            let mut next = Vec::with_capacity(z.len());
            for (j, &zj) in z.iter().enumerate() {
                let mut v = silu(zj);
                if res {
                    v += a[j];
                }
                next.push(v);
            }
            a = next;
        }
        a
    }

    /// Forward with the per-layer values needed for the reverse pass.
    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, FwdCache) {
        assert_eq!(x.len(), self.in_dim, "input dim mismatch");
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&a, &mut z);
            acts.push(std::mem::take(&mut a));
            if l == last {
                pre.push(z.clone());
                return (z, FwdCache { acts, pre });
            }
            let res = self.residual_at(l);
            let mut next = Vec::with_capacity(z.len());
            for (j, &zj) in z.iter().enumerate() {
                let mut v = silu(zj);
                if res {
                    v += acts[l][j];
                }
                next.push(v);
            }
            pre.push(z);
            a = next;
        }
        unreachable!()
    }

    /// Reverse pass: parameter gradients plus the input cotangent.
    pub fn backward(&self, cache: &FwdCache, out_cot: &[f64]) -> (MlpGrads, Vec<f64>) {
        let mut grads = MlpGrads::zeros_like(self);
        let g_in = self.backward_impl(cache, out_cot, Some(&mut grads));
        (grads, g_in)
    }

    /// Reverse pass for a frozen network: input cotangent only.
    pub fn backward_input(&self, cache: &FwdCache, out_cot: &[f64]) -> Vec<f64> {
        self.backward_impl(cache, out_cot, None)
    }

    fn backward_impl(
        &self,
        cache: &FwdCache,
        out_cot: &[f64],
        mut grads: Option<&mut MlpGrads>,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        assert_eq!(out_cot.len(), self.out_dim);
        let mut g = out_cot.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let res = self.residual_at(l);
            // Cotangent of the pre-activation z_l.
            let gz: Vec<f64> = if l == last {
                g.clone()
            } else {
                cache.pre[l]
                    .iter()
                    .zip(&g)
                    .map(|(&z, &gi)| gi * silu_d1(z))
                    .collect()
            };
            if let Some(gr) = grads.as_deref_mut() {
                let lg = &mut gr.layers[l];
                let a = &cache.acts[l];
                for o in 0..layer.out_dim {
                    let go = gz[o];
                    lg.b[o] += go;
                    if go != 0.0 {
                        let row = &mut lg.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (wi, ai) in row.iter_mut().zip(a) {
                            *wi += go * ai;
                        }
                    }
                }
            }
            let mut g_prev = vec![0.0; layer.in_dim];
            layer.apply_transposed_into(&gz, &mut g_prev);
            if res {
                for (p, gi) in g_prev.iter_mut().zip(&g) {
                    *p += gi;
                }
            }
            g = g_prev;
        }
        g
    }

    /// Forward pass carrying an input tangent `x_dot` (a JVP). Returns the
    /// output, the output tangent, and the cache for `dual_backward`.
    pub fn dual_forward(&self, x: &[f64], x_dot: &[f64]) -> (Vec<f64>, Vec<f64>, DualCache) {
        assert_eq!(x.len(), self.in_dim);
        assert_eq!(x_dot.len(), self.in_dim);
        let last = self.layers.len() - 1;
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n);
        let mut dacts = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut dpre = Vec::with_capacity(n);
        let mut a = x.to_vec();
        let mut d = x_dot.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            let mut dz = Vec::new();
            layer.apply(&a, &mut z);
            layer.apply_no_bias(&d, &mut dz);
            acts.push(std::mem::take(&mut a));
            dacts.push(std::mem::take(&mut d));
            if l == last {
                pre.push(z.clone());
                dpre.push(dz.clone());
                return (
                    z,
                    dz,
                    DualCache {
                        acts,
                        dacts,
                        pre,
                        dpre,
                    },
                );
            }
            let res = self.residual_at(l);
            let mut na = Vec::with_capacity(z.len());
            let mut nd = Vec::with_capacity(z.len());
            for j in 0..z.len() {
                let mut v = silu(z[j]);
                let mut dv = silu_d1(z[j]) * dz[j];
                if res {
                    v += acts[l][j];
                    dv += dacts[l][j];
                }
                na.push(v);
                nd.push(dv);
            }
            pre.push(z);
            dpre.push(dz);
            a = na;
            d = nd;
        }
        unreachable!()
    }

    /// Reverse pass over the dual program. `out_cot` is the cotangent of the
    /// primal output and `out_dot_cot` that of the tangent output; returns
    /// parameter gradients and the cotangents of `x` and `x_dot`.
    pub fn dual_backward(
        &self,
        cache: &DualCache,
        out_cot: &[f64],
        out_dot_cot: &[f64],
    ) -> (MlpGrads, Vec<f64>, Vec<f64>) {
        let mut grads = MlpGrads::zeros_like(self);
        let (gx, gdx) = self.dual_backward_impl(cache, out_cot, out_dot_cot, Some(&mut grads));
        (grads, gx, gdx)
    }

    /// Same as [`Mlp::dual_backward`] but skips parameter gradients.
    pub fn dual_backward_input(
        &self,
        cache: &DualCache,
        out_cot: &[f64],
        out_dot_cot: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        self.dual_backward_impl(cache, out_cot, out_dot_cot, None)
    }

    fn dual_backward_impl(
        &self,
        cache: &DualCache,
        out_cot: &[f64],
        out_dot_cot: &[f64],
        mut grads: Option<&mut MlpGrads>,
    ) -> (Vec<f64>, Vec<f64>) {
        let last = self.layers.len() - 1;
        assert_eq!(out_cot.len(), self.out_dim);
        assert_eq!(out_dot_cot.len(), self.out_dim);
        let mut ga = out_cot.to_vec();
        let mut gd = out_dot_cot.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let res = self.residual_at(l);
            let (gz, gdz): (Vec<f64>, Vec<f64>) = if l == last {
                (ga.clone(), gd.clone())
            } else {
                let z = &cache.pre[l];
                let dz = &cache.dpre[l];
                let mut gz = Vec::with_capacity(z.len());
                let mut gdz = Vec::with_capacity(z.len());
                for j in 0..z.len() {
                    // a' = silu(z) [+ a], d' = silu'(z) dz [+ d]
                    gz.push(ga[j] * silu_d1(z[j]) + gd[j] * silu_d2(z[j]) * dz[j]);
                    gdz.push(gd[j] * silu_d1(z[j]));
                }
                (gz, gdz)
            };
            if let Some(gr) = grads.as_deref_mut() {
                let lg = &mut gr.layers[l];
                let a = &cache.acts[l];
                let da = &cache.dacts[l];
                for o in 0..layer.out_dim {
                    lg.b[o] += gz[o];
                    let row = &mut lg.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let (go, gdo) = (gz[o], gdz[o]);
                    for i in 0..layer.in_dim {
                        row[i] += go * a[i] + gdo * da[i];
                    }
                }
            }
            let mut ga_prev = vec![0.0; layer.in_dim];
            let mut gd_prev = vec![0.0; layer.in_dim];
            layer.apply_transposed_into(&gz, &mut ga_prev);
            layer.apply_transposed_into(&gdz, &mut gd_prev);
            if res {
                for (p, v) in ga_prev.iter_mut().zip(&ga) {
                    *p += v;
                }
                for (p, v) in gd_prev.iter_mut().zip(&gd) {
                    *p += v;
                }
            }
            ga = ga_prev;
            gd = gd_prev;
        }
        (ga, gd)
    }
}

/// Per-layer values cached by [`Mlp::forward_cached`].
pub struct FwdCache {
    /// Input to each layer (`acts[l]` feeds layer `l`).
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
}

/// Cache for the dual (primal + tangent) pass.
pub struct DualCache {
    pub acts: Vec<Vec<f64>>,
    pub dacts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub dpre: Vec<Vec<f64>>,
}

/// Gradient (or moment) arrays mirroring an [`Mlp`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            layers: m
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= c);
            l.b.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Flat view of all entries, layer by layer (weights then bias).
    pub fn for_each_entry(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.w.iter().chain(l.b.iter()).for_each(|&v| f(v));
        }
    }
}

/// Draw from N(0,1) via Box-Muller; two uniforms per draw keeps the stream
/// layout independent of how callers batch their requests.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Derive an independent stream seed from a base seed and two indices
/// (splitmix64 finalizer applied twice). Used to give every (sample, noise
/// scale) pair its own reproducible noise regardless of batch order.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    for _ in 0..2 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        x = z ^ (z >> 31);
    }
    x
}

/// Accumulate per-item `(loss, grads)` over a batch with a fixed chunk
/// layout, so the floating-point summation order (and hence the result) is
/// independent of how many worker threads run. Returns the summed loss and
/// summed gradients; callers scale by `1/n`.
pub fn accumulate_batch<T: Sync>(
    items: &[T],
    like: &Mlp,
    f: impl Fn(&T) -> (f64, MlpGrads) + Sync,
) -> (f64, MlpGrads) {
    use rayon::prelude::*;
    if items.is_empty() {
        return (0.0, MlpGrads::zeros_like(like));
    }
    let chunk = items.len().div_ceil(8);
    let partials: Vec<(f64, MlpGrads)> = items
        .par_chunks(chunk)
        .map(|part| {
            let mut loss = 0.0;
            let mut grads = MlpGrads::zeros_like(like);
            for item in part {
                let (l, g) = f(item);
                loss += l;
                grads.add_assign(&g);
            }
            (loss, grads)
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = MlpGrads::zeros_like(like);
    for (l, g) in partials {
        loss += l;
        grads.add_assign(&g);
    }
    (loss, grads)
}

/// Concatenate a point with embedded conditioners into one input vector.
pub fn concat_input(point: &[f64], conds: &[&[f64]]) -> Vec<f64> {
    let extra: usize = conds.iter().map(|c| c.len()).sum();
    let mut v = Vec::with_capacity(point.len() + extra);
    v.extend_from_slice(point);
    for c in conds {
        v.extend_from_slice(c);
    }
    v
}
