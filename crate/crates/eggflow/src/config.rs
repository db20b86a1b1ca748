//! Run configuration: one JSON document holding every hyperparameter, with
//! strict parsing (unknown keys rejected), full range validation, and a
//! stable hash recorded in checkpoints and reports.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::data::cluster::ClusterMethod;
use crate::error::{Error, Result};
use crate::geometry::MetricFloorMode;
use crate::refine::DistillPenalty;
use crate::transport::{CouplingStrategy, EmbeddingLossForm, IntegrateMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Learn the energy-induced metric (the full pipeline).
    Energy,
    /// Identity metric baseline: skip score/energy/refine, straight paths.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Optimization.
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub gradient_clip: f64,
    pub ema_decay: f64,
    pub score_energy_batch_size: usize,
    pub geodesic_flow_batch_size: usize,
    pub sinusoidal_n_freq: usize,

    // Steps per stage (optimizer steps at the batch sizes above).
    pub score_steps: usize,
    pub energy_steps: usize,
    pub geodesic_steps: usize,
    pub embedding_steps: usize,
    pub flow_steps: usize,

    // Score matching.
    pub n_noise_scales: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,

    // Refinement.
    pub annealing_steps: usize,
    pub weight_beta: f64,
    pub alpha: f64,
    pub min_temperature: f64,
    pub max_temperature: f64,
    pub energy_clip_quantiles: (f64, f64),
    pub anneal_distill: DistillPenalty,

    // Metric.
    pub metric_mode: MetricMode,
    pub metric_scale: f64,
    pub metric_gamma: f64,
    pub metric_clip_lower_quantile: f64,
    pub metric_floor_mode: MetricFloorMode,
    /// Noise condition for the metric's energy; None = largest scale.
    pub metric_sigma: Option<f64>,

    // Paths and flow.
    pub sigma_flow: f64,
    pub geodesic_coupling: CouplingStrategy,
    pub embedding_coupling: CouplingStrategy,
    pub flow_coupling: CouplingStrategy,
    pub embedding_loss_form: EmbeddingLossForm,
    pub embedding_out_dim: Option<usize>,
    /// Train geodesic/embedding stages even under the identity metric.
    pub identity_trains_geodesic: bool,

    // Clustering.
    pub cluster_method: ClusterMethod,
    pub n_clusters: usize,
    pub leiden_n_neighbors: usize,
    pub leiden_resolution: f64,

    // Data.
    pub dataset: Option<PathBuf>,
    pub pca_dims: Option<usize>,
    pub holdout_timepoint: Option<i64>,
    pub holdout_timepoints: Vec<i64>,

    // Evaluation.
    pub ave_n_pairs: usize,
    pub ave_n_t: usize,
    pub w1_max_n: usize,
    pub integrate_steps: usize,
    pub integrate_method: IntegrateMethod,
    pub eval_seeds: Vec<u64>,

    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learning_rate: 1e-4,
            hidden_dim: 512,
            n_layers: 4,
            gradient_clip: 10.0,
            ema_decay: 0.999,
            score_energy_batch_size: 4196,
            geodesic_flow_batch_size: 256,
            sinusoidal_n_freq: 32,
            score_steps: 500,
            energy_steps: 500,
            geodesic_steps: 800,
            embedding_steps: 600,
            flow_steps: 600,
            n_noise_scales: 20,
            sigma_min: 0.01,
            sigma_max: 0.2,
            annealing_steps: 2,
            weight_beta: 0.3,
            alpha: 1.0,
            min_temperature: 1.0,
            max_temperature: 1.0,
            energy_clip_quantiles: (0.05, 0.98),
            anneal_distill: DistillPenalty::Abs,
            metric_mode: MetricMode::Energy,
            metric_scale: 10.0,
            metric_gamma: 0.2,
            metric_clip_lower_quantile: 0.05,
            metric_floor_mode: MetricFloorMode::LambdaExp,
            metric_sigma: None,
            sigma_flow: 0.1,
            geodesic_coupling: CouplingStrategy::Product,
            embedding_coupling: CouplingStrategy::Product,
            flow_coupling: CouplingStrategy::Product,
            embedding_loss_form: EmbeddingLossForm::SquaredResidual,
            embedding_out_dim: None,
            identity_trains_geodesic: false,
            cluster_method: ClusterMethod::Kmeans,
            n_clusters: 1,
            leiden_n_neighbors: 10,
            leiden_resolution: 0.3,
            dataset: None,
            pca_dims: None,
            holdout_timepoint: None,
            holdout_timepoints: Vec::new(),
            ave_n_pairs: 2000,
            ave_n_t: 8,
            w1_max_n: 1024,
            integrate_steps: 100,
            integrate_method: IntegrateMethod::Rk4,
            eval_seeds: vec![0, 1, 2],
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parse a JSON config file; missing keys take defaults, unknown keys
    /// are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides (values parsed as JSON, falling back to
    /// strings), then re-validate. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        for (key, raw) in overrides {
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            map.insert(key.clone(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every range constraint; the error lists all violations.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                violations.push(msg);
            }
        };
        check(self.learning_rate > 0.0, format!("learning_rate must be > 0, got {}", self.learning_rate));
        check(self.hidden_dim >= 1, "hidden_dim must be >= 1".into());
        check(self.n_layers >= 1, "n_layers must be >= 1".into());
        check(self.gradient_clip > 0.0, format!("gradient_clip must be > 0, got {}", self.gradient_clip));
        check(
            (0.0..1.0).contains(&self.ema_decay),
            format!("ema_decay must lie in [0,1), got {}", self.ema_decay),
        );
        check(self.score_energy_batch_size >= 1, "score_energy_batch_size must be >= 1".into());
        check(self.geodesic_flow_batch_size >= 1, "geodesic_flow_batch_size must be >= 1".into());
        check(self.sinusoidal_n_freq >= 1, "sinusoidal_n_freq must be >= 1".into());
        check(self.n_noise_scales >= 1, "n_noise_scales must be >= 1".into());
        check(
            self.sigma_min > 0.0 && (self.n_noise_scales == 1 || self.sigma_min < self.sigma_max),
            format!(
                "noise scales need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            ),
        );
        check(self.annealing_steps >= 1, "annealing_steps must be >= 1".into());
        check(
            (0.0..=1.0).contains(&self.alpha),
            format!("alpha must lie in [0,1], got {}", self.alpha),
        );
        check(
            self.min_temperature > 0.0 && self.max_temperature > 0.0,
            "temperatures must be positive".into(),
        );
        let (qlo, qhi) = self.energy_clip_quantiles;
        check(
            0.0 <= qlo && qlo < qhi && qhi <= 1.0,
            format!("energy_clip_quantiles must satisfy 0 <= lo < hi <= 1, got [{qlo}, {qhi}]"),
        );
        check(
            (0.0..=1.0).contains(&self.metric_clip_lower_quantile),
            "metric_clip_lower_quantile must lie in [0,1]".into(),
        );
        check(self.metric_gamma > 0.0, format!("metric_gamma must be > 0, got {}", self.metric_gamma));
        check(self.metric_scale >= 0.0, format!("metric_scale must be >= 0, got {}", self.metric_scale));
        check(self.sigma_flow >= 0.0, format!("sigma_flow must be >= 0, got {}", self.sigma_flow));
        check(self.n_clusters >= 1, "n_clusters must be >= 1".into());
        check(self.leiden_n_neighbors >= 1, "leiden_n_neighbors must be >= 1".into());
        check(
            self.leiden_resolution >= 0.0,
            format!("leiden_resolution must be >= 0, got {}", self.leiden_resolution),
        );
        check(self.ave_n_pairs >= 1, "ave_n_pairs must be >= 1".into());
        check(self.ave_n_t >= 1, "ave_n_t must be >= 1".into());
        check(self.w1_max_n >= 1, "w1_max_n must be >= 1".into());
        check(self.integrate_steps >= 1, "integrate_steps must be >= 1".into());
        check(!self.eval_seeds.is_empty(), "eval_seeds must not be empty".into());
        if let Some(k) = self.pca_dims {
            check(k >= 1, "pca_dims must be >= 1".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }

    /// Persist the effective config beside the run outputs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n / 2).map(|b| format!("{b:02x}")).collect()
}
