//! Sinusoidal embedding of scalar conditioners (noise scale, path time,
//! cluster id). Output dim is `2 * n_freq`: all sines, then all cosines.

use serde::{Deserialize, Serialize};

/// What a conditioner scalar means, which fixes its preprocessing:
/// noise scales are embedded on a log axis, time and cluster ids raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondKind {
    NoiseScale,
    Time,
    ClusterId,
}

/// Deterministic sinusoidal feature map with geometrically spaced
/// frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinEmbed {
    pub n_freq: usize,
    pub kind: CondKind,
}

const OMEGA_MIN: f64 = 0.5;
const OMEGA_MAX: f64 = 64.0;

impl SinEmbed {
    pub fn new(kind: CondKind, n_freq: usize) -> Self {
        assert!(n_freq >= 1);
        SinEmbed { n_freq, kind }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.n_freq
    }

    fn omega(&self, k: usize) -> f64 {
        if self.n_freq == 1 {
            return OMEGA_MIN;
        }
        OMEGA_MIN * (OMEGA_MAX / OMEGA_MIN).powf(k as f64 / (self.n_freq - 1) as f64)
    }

    fn preprocess(&self, value: f64) -> f64 {
        match self.kind {
            CondKind::NoiseScale => value.ln(),
            CondKind::Time | CondKind::ClusterId => value,
        }
    }

    pub fn embed(&self, value: f64) -> Vec<f64> {
        let v = self.preprocess(value);
        let mut out = Vec::with_capacity(self.out_dim());
        for k in 0..self.n_freq {
            out.push((self.omega(k) * v).sin());
        }
        for k in 0..self.n_freq {
            out.push((self.omega(k) * v).cos());
        }
        out
    }

    /// Embedding together with its derivative in the *raw* value. Only
    /// meaningful for [`CondKind::Time`], where the map is linear.
    pub fn embed_with_deriv(&self, value: f64) -> (Vec<f64>, Vec<f64>) {
        assert!(
            matches!(self.kind, CondKind::Time),
            "derivative only used for time embeddings"
        );
        let mut out = Vec::with_capacity(self.out_dim());
        let mut dout = Vec::with_capacity(self.out_dim());
        for k in 0..self.n_freq {
            let w = self.omega(k);
            out.push((w * value).sin());
            dout.push(w * (w * value).cos());
        }
        for k in 0..self.n_freq {
            let w = self.omega(k);
            out.push((w * value).cos());
            dout.push(-w * (w * value).sin());
        }
        (out, dout)
    }
}
