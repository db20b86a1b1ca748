//! Staged orchestration behind the `eggflow` binary: dataset preparation,
//! per-stage training with persisted checkpoints and loss traces, and the
//! evaluation commands. Every stage derives its randomness from the config
//! seed, so a (config, seed) pair reproduces bit-identical artifacts.

use std::path::{Path, PathBuf};

use crate::config::{MetricMode, RunConfig};
use crate::data::cluster::{fit_clusters, ClusterMethod, ClusterParams};
use crate::data::io::{format_for_path, load_dataset, save_dataset};
use crate::data::{weighted_minibatch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{leave_one_out_w1, sphere_geodesic, EvalReport, PlaneSpec};
use crate::geometry::{
    path_point, train_geodesic, GeoTrainCfg, GeodesicModel, MetricField, MetricParams,
};
use crate::nn::checkpoint;
use crate::nn::mix_seed;
use crate::nn::optim::OptConfig;
use crate::refine::{
    save_weights, snis_weights, train_energy_step, train_score_step, RefineConfig, RefineTrainCfg,
};
use crate::score::{EnergyModel, NoiseSchedule, ScoreModel};
use crate::transport::{
    couple_batches, multi_timepoint_schedule, train_embedding, train_flow, CouplingStrategy,
    EmbeddingModel, FlowModel, SegmentPair, TimepointSchedule, TransportTrainCfg,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Score,
    Energy,
    Refine,
    Geodesic,
    Embedding,
    Flow,
    All,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Stage::Score),
            "energy" => Ok(Stage::Energy),
            "refine" => Ok(Stage::Refine),
            "geodesic" => Ok(Stage::Geodesic),
            "embedding" => Ok(Stage::Embedding),
            "flow" => Ok(Stage::Flow),
            "all" => Ok(Stage::All),
            other => Err(Error::Config(format!(
                "unknown stage `{other}` (expected score|energy|refine|geodesic|embedding|flow|all)"
            ))),
        }
    }
}

/// Artifact layout under the run output directory.
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Paths { out: out.into() }
    }

    pub fn effective_config(&self) -> PathBuf {
        self.out.join("config.effective.json")
    }
    pub fn score_k1(&self) -> PathBuf {
        self.out.join("score_k1.ckpt")
    }
    pub fn energy_k1(&self) -> PathBuf {
        self.out.join("energy_k1.ckpt")
    }
    pub fn refine_dir(&self) -> PathBuf {
        self.out.join("refine")
    }
    pub fn score_final(&self) -> PathBuf {
        self.out.join("score_final.ckpt")
    }
    pub fn energy_final(&self) -> PathBuf {
        self.out.join("energy_final.ckpt")
    }
    pub fn metric_sidecar(&self) -> PathBuf {
        self.out.join("metric.json")
    }
    pub fn geodesic(&self) -> PathBuf {
        self.out.join("geodesic.ckpt")
    }
    pub fn embedding(&self) -> PathBuf {
        self.out.join("embedding.ckpt")
    }
    pub fn flow(&self) -> PathBuf {
        self.out.join("flow.ckpt")
    }
    pub fn trace(&self, name: &str) -> PathBuf {
        self.out.join(format!("trace_{name}.csv"))
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }
    pub fn results_csv(&self) -> PathBuf {
        self.out.join("results.csv")
    }
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Shared state derived deterministically from (config, dataset file).
pub struct RunCtx {
    pub cfg: RunConfig,
    pub full: Dataset,
    pub train: Dataset,
    pub schedule: NoiseSchedule,
    pub paths: Paths,
    pub hash: String,
}

/// Load the dataset, apply PCA whitening when configured, drop the held-out
/// timepoint from the training split, and fit clusters.
pub fn prepare(cfg: &RunConfig) -> Result<RunCtx> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("config has no dataset path".into()))?;
    let mut full = load_dataset(path, format_for_path(path))?;
    if let Some(k) = cfg.pca_dims {
        let (_, transformed) = crate::data::pca::pca_whiten(&full, k)?;
        full = transformed;
    }
    let mut train = match cfg.holdout_timepoint {
        Some(h) => {
            let keep: Vec<usize> = (0..full.n())
                .filter(|&i| full.timepoint.as_ref().map_or(true, |t| t[i] != h))
                .collect();
            if keep.is_empty() {
                return Err(Error::Config(format!("holding out {h} leaves no training rows")));
            }
            full.select(&keep)
        }
        None => full.clone(),
    };
    if cfg.metric_mode == MetricMode::Energy {
        let params = ClusterParams {
            method: cfg.cluster_method,
            n_clusters: cfg.n_clusters,
            n_neighbors: cfg.leiden_n_neighbors,
            resolution: cfg.leiden_resolution,
            seed: mix_seed(cfg.seed, 0xC1, 0),
        };
        let wants_clusters = match cfg.cluster_method {
            ClusterMethod::Kmeans => cfg.n_clusters > 1,
            ClusterMethod::GraphCommunity => true,
        };
        if wants_clusters {
            let model = fit_clusters(&train, &params)?;
            train.set_clusters(model.assignment.clone(), model.n_clusters)?;
        }
    }
    let schedule = NoiseSchedule::log_spaced(cfg.n_noise_scales, cfg.sigma_min, cfg.sigma_max)?;
    let paths = Paths::new(&cfg.out_dir);
    Ok(RunCtx {
        cfg: cfg.clone(),
        hash: cfg.hash(),
        full,
        train,
        schedule,
        paths,
    })
}

fn opt_config(cfg: &RunConfig) -> OptConfig {
    OptConfig {
        learning_rate: cfg.learning_rate,
        grad_clip: cfg.gradient_clip,
        ema_decay: cfg.ema_decay,
        ..OptConfig::default()
    }
}

fn refine_config(cfg: &RunConfig) -> RefineConfig {
    RefineConfig {
        annealing_steps: cfg.annealing_steps,
        beta_w: cfg.weight_beta,
        alpha: cfg.alpha,
        min_temperature: cfg.min_temperature,
        max_temperature: cfg.max_temperature,
        q_lo: cfg.energy_clip_quantiles.0,
        q_hi: cfg.energy_clip_quantiles.1,
        distill: cfg.anneal_distill,
    }
}

fn refine_train_cfg(cfg: &RunConfig, seed: u64) -> RefineTrainCfg {
    RefineTrainCfg {
        hidden_dim: cfg.hidden_dim,
        n_layers: cfg.n_layers,
        n_freq: cfg.sinusoidal_n_freq,
        score_steps: cfg.score_steps,
        energy_steps: cfg.energy_steps,
        batch_size: cfg.score_energy_batch_size,
        opt: opt_config(cfg),
        seed,
    }
}

fn metric_params(cfg: &RunConfig) -> MetricParams {
    MetricParams {
        gamma: cfg.metric_gamma,
        lambda: cfg.metric_scale,
        q_lo: cfg.energy_clip_quantiles.0,
        q_hi: cfg.energy_clip_quantiles.1,
        metric_floor_quantile: cfg.metric_clip_lower_quantile,
        floor_mode: cfg.metric_floor_mode,
        metric_sigma: cfg.metric_sigma,
    }
}

fn require(path: &Path, stage: &str, requires: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            stage: stage.into(),
            requires: requires.into(),
        })
    }
}

fn load_score(ctx: &RunCtx, path: &Path, conditioned: bool) -> Result<ScoreModel> {
    let (net, _, _) = checkpoint::load_file(path)?;
    let wrapper = ScoreModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        ctx.schedule.clone(),
        conditioned,
        0,
    );
    checkpoint::expect_dims(&net, wrapper.net.in_dim, ctx.cfg.hidden_dim, wrapper.net.out_dim, ctx.cfg.n_layers)?;
    Ok(wrapper.with_net(net))
}

fn load_energy(ctx: &RunCtx, path: &Path, conditioned: bool) -> Result<EnergyModel> {
    let (net, _, _) = checkpoint::load_file(path)?;
    let wrapper = EnergyModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        ctx.schedule.clone(),
        conditioned,
        0,
    );
    checkpoint::expect_dims(&net, wrapper.net.in_dim, ctx.cfg.hidden_dim, wrapper.net.out_dim, ctx.cfg.n_layers)?;
    Ok(wrapper.with_net(net))
}

fn load_metric(ctx: &RunCtx) -> Result<MetricField> {
    if ctx.cfg.metric_mode == MetricMode::Identity {
        return Ok(MetricField::identity());
    }
    require(&ctx.paths.metric_sidecar(), "geodesic", "refine")?;
    let text = std::fs::read_to_string(ctx.paths.metric_sidecar())
        .map_err(|e| Error::io(ctx.paths.metric_sidecar().display().to_string(), e))?;
    let sidecar: crate::geometry::MetricSidecar = serde_json::from_str(&text)?;
    if sidecar.identity {
        return Ok(MetricField::identity());
    }
    let energy = load_energy(ctx, &ctx.paths.energy_final(), false)?;
    Ok(MetricField {
        energy: Some(energy),
        params: sidecar.params,
        calibration: sidecar.calibration,
    })
}

fn load_geodesic(ctx: &RunCtx) -> Result<GeodesicModel> {
    let wrapper = GeodesicModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        0,
    );
    if ctx.cfg.metric_mode == MetricMode::Identity && !ctx.cfg.identity_trains_geodesic {
        // Straight chords: the zero-initialized correction network.
        return Ok(wrapper);
    }
    require(&ctx.paths.geodesic(), "flow", "geodesic")?;
    let (net, _, _) = checkpoint::load_file(&ctx.paths.geodesic())?;
    checkpoint::expect_dims(&net, wrapper.net.in_dim, ctx.cfg.hidden_dim, wrapper.net.out_dim, ctx.cfg.n_layers)?;
    Ok(wrapper.with_net(net))
}

fn load_embedding(ctx: &RunCtx) -> Result<EmbeddingModel> {
    require(&ctx.paths.embedding(), "flow", "embedding")?;
    let (net, _, _) = checkpoint::load_file(&ctx.paths.embedding())?;
    let out_dim = ctx.cfg.embedding_out_dim.unwrap_or(ctx.train.dim());
    let wrapper = EmbeddingModel::new(ctx.train.dim(), out_dim, ctx.cfg.hidden_dim, ctx.cfg.n_layers, 0);
    checkpoint::expect_dims(&net, ctx.train.dim(), ctx.cfg.hidden_dim, out_dim, ctx.cfg.n_layers)?;
    Ok(wrapper.with_net(net))
}

/// Training segments in normalized global time; a dataset without (or with
/// fewer than two) timepoints is a single unit segment.
fn train_schedule(ctx: &RunCtx) -> Result<TimepointSchedule> {
    let observed = ctx.train.observed_timepoints();
    if observed.len() >= 2 {
        multi_timepoint_schedule(&observed, None)
    } else {
        Ok(TimepointSchedule {
            segments: vec![crate::transport::Segment {
                t_from: 0,
                t_to: 1,
                u_from: 0.0,
                u_to: 1.0,
            }],
            holdout: None,
        })
    }
}

/// Sample one endpoint batch pair for a segment: marginal rows when the
/// dataset has timepoints, otherwise two independent weighted draws.
fn segment_batches(
    ctx: &RunCtx,
    seg: &crate::transport::Segment,
    batch: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ds = &ctx.train;
    let has_tp = ds.observed_timepoints().len() >= 2;
    if has_tp {
        let from = ds.timepoint_members(seg.t_from);
        let to = ds.timepoint_members(seg.t_to);
        let i0 = crate::data::weighted_minibatch_from(ds, &from, batch, mix_seed(seed, 0xF0, 0));
        let i1 = crate::data::weighted_minibatch_from(ds, &to, batch, mix_seed(seed, 0xF1, 0));
        (
            i0.into_iter().map(|i| ds.row(i).to_vec()).collect(),
            i1.into_iter().map(|i| ds.row(i).to_vec()).collect(),
        )
    } else {
        let i0 = weighted_minibatch(ds, batch, mix_seed(seed, 0xF0, 0));
        let i1 = weighted_minibatch(ds, batch, mix_seed(seed, 0xF1, 0));
        (
            i0.into_iter().map(|i| ds.row(i).to_vec()).collect(),
            i1.into_iter().map(|i| ds.row(i).to_vec()).collect(),
        )
    }
}

/// Run one training stage (or all of them in order).
pub fn run_train(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let ctx = prepare(cfg)?;
    std::fs::create_dir_all(&ctx.paths.out).map_err(|e| Error::io(ctx.paths.out.display().to_string(), e))?;
    cfg.save(ctx.paths.effective_config())?;
    match stage {
        Stage::Score => stage_score(&ctx),
        Stage::Energy => stage_energy(&ctx),
        Stage::Refine => stage_refine(&ctx),
        Stage::Geodesic => stage_geodesic(&ctx),
        Stage::Embedding => stage_embedding(&ctx),
        Stage::Flow => stage_flow(&ctx),
        Stage::All => {
            stage_score(&ctx)?;
            stage_energy(&ctx)?;
            stage_refine(&ctx)?;
            stage_geodesic(&ctx)?;
            stage_embedding(&ctx)?;
            stage_flow(&ctx)?;
            Ok(())
        }
    }
}

fn skip_for_identity(ctx: &RunCtx, stage: &str) -> bool {
    if ctx.cfg.metric_mode == MetricMode::Identity {
        println!("stage {stage}: skipped (identity metric baseline)");
        true
    } else {
        false
    }
}

fn stage_score(ctx: &RunCtx) -> Result<()> {
    if skip_for_identity(ctx, "score") {
        return Ok(());
    }
    let stratified = ctx.train.n_clusters() > 1;
    let refine = refine_config(&ctx.cfg);
    let mut score = ScoreModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        ctx.schedule.clone(),
        stratified,
        mix_seed(ctx.cfg.seed, 0x5C0, 1),
    );
    let tcfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0x5C1, 1));
    let (trace, ema) = train_score_step(
        &mut score,
        &ctx.train,
        None,
        refine.beta_at(1),
        refine.beta_at(1),
        &refine,
        &tcfg,
        "score",
    )?;
    checkpoint::save_file(ctx.paths.score_k1(), &ema, None, ctx.cfg.seed, &ctx.hash)?;
    write_trace(&ctx.paths.trace("score"), &trace)?;
    println!(
        "stage score: {} steps, final loss {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn stage_energy(ctx: &RunCtx) -> Result<()> {
    if skip_for_identity(ctx, "energy") {
        return Ok(());
    }
    require(&ctx.paths.score_k1(), "energy", "score")?;
    let stratified = ctx.train.n_clusters() > 1;
    let score = load_score(ctx, &ctx.paths.score_k1(), stratified)?;
    let mut energy = EnergyModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        ctx.schedule.clone(),
        stratified,
        mix_seed(ctx.cfg.seed, 0xE40, 1),
    );
    let tcfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0xE41, 1));
    let (trace, ema) = train_energy_step(&mut energy, &ctx.train, &score, &tcfg, "energy")?;
    checkpoint::save_file(ctx.paths.energy_k1(), &ema, None, ctx.cfg.seed, &ctx.hash)?;
    write_trace(&ctx.paths.trace("energy"), &trace)?;
    println!(
        "stage energy: {} steps, final loss {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn stage_refine(ctx: &RunCtx) -> Result<()> {
    if skip_for_identity(ctx, "refine") {
        return Ok(());
    }
    require(&ctx.paths.score_k1(), "refine", "score")?;
    require(&ctx.paths.energy_k1(), "refine", "energy")?;
    let refine_dir = ctx.paths.refine_dir();
    std::fs::create_dir_all(&refine_dir).map_err(|e| Error::io(refine_dir.display().to_string(), e))?;
    let stratified = ctx.train.n_clusters() > 1;
    let refine = refine_config(&ctx.cfg);
    let mut work = ctx.train.clone();

    let mut prev_score = load_score(ctx, &ctx.paths.score_k1(), stratified)?;
    let mut prev_beta = refine.beta_at(1);
    let mut energy = load_energy(ctx, &ctx.paths.energy_k1(), stratified)?;
    let mut weights = snis_weights(&work, &energy, &refine)?;
    save_weights(refine_dir.join("weights_k1.bin"), &weights, 1, prev_beta, refine.beta_w)?;
    work.set_weights(weights.weights.clone())?;

    for k in 2..=refine.annealing_steps {
        let beta_k = refine.beta_at(k);
        let mut score_k = ScoreModel::new(
            ctx.train.dim(),
            ctx.cfg.hidden_dim,
            ctx.cfg.n_layers,
            ctx.cfg.sinusoidal_n_freq,
            ctx.schedule.clone(),
            stratified,
            mix_seed(ctx.cfg.seed, 0x5C0, k as u64),
        );
        let tcfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0x5C1, k as u64));
        let (strace, sema) = train_score_step(
            &mut score_k,
            &work,
            Some(&prev_score),
            beta_k,
            prev_beta,
            &refine,
            &tcfg,
            &format!("refine.score.k{k}"),
        )?;
        let sema = score_k.with_net(sema);
        write_trace(&ctx.paths.trace(&format!("refine_score_k{k}")), &strace)?;
        checkpoint::save_file(refine_dir.join(format!("score_k{k}.ckpt")), &sema.net, None, ctx.cfg.seed, &ctx.hash)?;

        let mut energy_k = EnergyModel::new(
            ctx.train.dim(),
            ctx.cfg.hidden_dim,
            ctx.cfg.n_layers,
            ctx.cfg.sinusoidal_n_freq,
            ctx.schedule.clone(),
            stratified,
            mix_seed(ctx.cfg.seed, 0xE40, k as u64),
        );
        let ecfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0xE41, k as u64));
        let (etrace, eema) = train_energy_step(&mut energy_k, &work, &sema, &ecfg, &format!("refine.energy.k{k}"))?;
        let eema = energy_k.with_net(eema);
        write_trace(&ctx.paths.trace(&format!("refine_energy_k{k}")), &etrace)?;
        checkpoint::save_file(refine_dir.join(format!("energy_k{k}.ckpt")), &eema.net, None, ctx.cfg.seed, &ctx.hash)?;

        weights = snis_weights(&work, &eema, &refine)?;
        save_weights(refine_dir.join(format!("weights_k{k}.bin")), &weights, k, beta_k, refine.beta_w)?;
        work.set_weights(weights.weights.clone())?;
        prev_score = sema;
        prev_beta = beta_k;
        energy = eema;
    }

    // Consolidation: a stratified run distills one unconditioned model pair
    // over the combined reweighting for downstream (metric) use.
    let (final_score, final_energy) = if stratified {
        let k = refine.annealing_steps as u64 + 1;
        let beta_k = prev_beta;
        let mut score_g = ScoreModel::new(
            ctx.train.dim(),
            ctx.cfg.hidden_dim,
            ctx.cfg.n_layers,
            ctx.cfg.sinusoidal_n_freq,
            ctx.schedule.clone(),
            false,
            mix_seed(ctx.cfg.seed, 0x5C0, k),
        );
        let tcfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0x5C1, k));
        let (strace, sema) =
            train_score_step(&mut score_g, &work, None, beta_k, beta_k, &refine, &tcfg, "refine.consolidate.score")?;
        let sema = score_g.with_net(sema);
        write_trace(&ctx.paths.trace("refine_score_consolidated"), &strace)?;
        let mut energy_g = EnergyModel::new(
            ctx.train.dim(),
            ctx.cfg.hidden_dim,
            ctx.cfg.n_layers,
            ctx.cfg.sinusoidal_n_freq,
            ctx.schedule.clone(),
            false,
            mix_seed(ctx.cfg.seed, 0xE40, k),
        );
        let ecfg = refine_train_cfg(&ctx.cfg, mix_seed(ctx.cfg.seed, 0xE41, k));
        let (etrace, eema) = train_energy_step(&mut energy_g, &work, &sema, &ecfg, "refine.consolidate.energy")?;
        let eema = energy_g.with_net(eema);
        write_trace(&ctx.paths.trace("refine_energy_consolidated"), &etrace)?;
        (sema, eema)
    } else {
        (prev_score, energy)
    };

    checkpoint::save_file(ctx.paths.score_final(), &final_score.net, None, ctx.cfg.seed, &ctx.hash)?;
    checkpoint::save_file(ctx.paths.energy_final(), &final_energy.net, None, ctx.cfg.seed, &ctx.hash)?;
    let metric = MetricField::fit(final_energy, &ctx.train, metric_params(&ctx.cfg))?;
    metric.save_sidecar(ctx.paths.metric_sidecar(), "energy_final.ckpt")?;
    println!(
        "stage refine: K={} done, final ESS {:.1}",
        refine_config(&ctx.cfg).annealing_steps,
        weights.ess
    );
    Ok(())
}

fn stage_geodesic(ctx: &RunCtx) -> Result<()> {
    if ctx.cfg.metric_mode == MetricMode::Identity && !ctx.cfg.identity_trains_geodesic {
        println!("stage geodesic: skipped (identity metric, straight paths)");
        return Ok(());
    }
    if ctx.cfg.geodesic_coupling == CouplingStrategy::OtEmbedding {
        return Err(Error::Config(
            "geodesic stage runs before the embedding; use product or ot_euclidean coupling".into(),
        ));
    }
    let metric = load_metric(ctx)?;
    let sched = train_schedule(ctx)?;
    let mut geo = GeodesicModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        mix_seed(ctx.cfg.seed, 0x9E0D, 0),
    );
    let cfg = GeoTrainCfg {
        steps: ctx.cfg.geodesic_steps,
        batch_size: ctx.cfg.geodesic_flow_batch_size,
        sigma_flow: ctx.cfg.sigma_flow,
        opt: opt_config(&ctx.cfg),
        seed: mix_seed(ctx.cfg.seed, 0x9E0E, 0),
    };
    let strategy = ctx.cfg.geodesic_coupling;
    let segs = sched.segments.clone();
    let base_seed = cfg.seed;
    let (trace, ema) = train_geodesic(&mut geo, &metric, &cfg, |step| {
        let seg = &segs[step % segs.len()];
        let (b0, b1) = segment_batches(ctx, seg, ctx.cfg.geodesic_flow_batch_size, mix_seed(base_seed, 0xBB, step as u64));
        couple_batches(b0, b1, strategy, None).expect("strategy validated above")
    })?;
    checkpoint::save_file(ctx.paths.geodesic(), &ema, None, ctx.cfg.seed, &ctx.hash)?;
    write_trace(&ctx.paths.trace("geodesic"), &trace)?;
    println!(
        "stage geodesic: {} steps, final loss {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn stage_embedding(ctx: &RunCtx) -> Result<()> {
    if ctx.cfg.metric_mode == MetricMode::Identity && !ctx.cfg.identity_trains_geodesic {
        println!("stage embedding: skipped (identity metric, Euclidean distance)");
        return Ok(());
    }
    let metric = load_metric(ctx)?;
    let geo = load_geodesic_for(ctx, "embedding")?;
    let sched = train_schedule(ctx)?;
    let out_dim = ctx.cfg.embedding_out_dim.unwrap_or(ctx.train.dim());
    let mut f = EmbeddingModel::new(
        ctx.train.dim(),
        out_dim,
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        mix_seed(ctx.cfg.seed, 0xE3B0, 0),
    );
    let cfg = TransportTrainCfg {
        steps: ctx.cfg.embedding_steps,
        batch_size: ctx.cfg.geodesic_flow_batch_size,
        sigma_flow: ctx.cfg.sigma_flow,
        opt: opt_config(&ctx.cfg),
        seed: mix_seed(ctx.cfg.seed, 0xE3B1, 0),
    };
    let segs = sched.segments.clone();
    let base_seed = cfg.seed;
    let (trace, ema) = train_embedding(
        &mut f,
        &geo,
        &metric,
        ctx.cfg.embedding_coupling,
        ctx.cfg.embedding_loss_form,
        &cfg,
        |step| {
            let seg = &segs[step % segs.len()];
            segment_batches(ctx, seg, ctx.cfg.geodesic_flow_batch_size, mix_seed(base_seed, 0xCC, step as u64))
        },
    )?;
    checkpoint::save_file(ctx.paths.embedding(), &ema, None, ctx.cfg.seed, &ctx.hash)?;
    write_trace(&ctx.paths.trace("embedding"), &trace)?;
    println!(
        "stage embedding: {} steps, final loss {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_geodesic_for(ctx: &RunCtx, stage: &str) -> Result<GeodesicModel> {
    if ctx.cfg.metric_mode == MetricMode::Identity && !ctx.cfg.identity_trains_geodesic {
        return Ok(GeodesicModel::new(
            ctx.train.dim(),
            ctx.cfg.hidden_dim,
            ctx.cfg.n_layers,
            ctx.cfg.sinusoidal_n_freq,
            0,
        ));
    }
    if !ctx.paths.geodesic().exists() {
        return Err(Error::MissingPrerequisite {
            stage: stage.into(),
            requires: "geodesic".into(),
        });
    }
    load_geodesic(ctx)
}

fn stage_flow(ctx: &RunCtx) -> Result<()> {
    let geo = load_geodesic_for(ctx, "flow")?;
    let sched = train_schedule(ctx)?;
    let embedding = if ctx.cfg.flow_coupling == CouplingStrategy::OtEmbedding {
        Some(load_embedding(ctx)?)
    } else {
        None
    };
    let mut v = FlowModel::new(
        ctx.train.dim(),
        ctx.cfg.hidden_dim,
        ctx.cfg.n_layers,
        ctx.cfg.sinusoidal_n_freq,
        mix_seed(ctx.cfg.seed, 0xF100, 0),
    );
    let cfg = TransportTrainCfg {
        steps: ctx.cfg.flow_steps,
        batch_size: ctx.cfg.geodesic_flow_batch_size,
        sigma_flow: ctx.cfg.sigma_flow,
        opt: opt_config(&ctx.cfg),
        seed: mix_seed(ctx.cfg.seed, 0xF101, 0),
    };
    let segs = sched.segments.clone();
    let base_seed = cfg.seed;
    let strategy = ctx.cfg.flow_coupling;
    let emb_ref = embedding.as_ref();
    let (trace, ema) = train_flow(&mut v, &geo, &cfg, |step| {
        let seg = &segs[step % segs.len()];
        let (b0, b1) = segment_batches(ctx, seg, ctx.cfg.geodesic_flow_batch_size, mix_seed(base_seed, 0xDD, step as u64));
        let pairs = couple_batches(b0, b1, strategy, emb_ref)?;
        Ok(pairs
            .into_iter()
            .map(|(x0, x1)| SegmentPair {
                x0,
                x1,
                u0: seg.u_from,
                u1: seg.u_to,
            })
            .collect())
    })?;
    checkpoint::save_file(ctx.paths.flow(), &ema, None, ctx.cfg.seed, &ctx.hash)?;
    write_trace(&ctx.paths.trace("flow"), &trace)?;
    println!(
        "stage flow: {} steps, final loss {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Generate a uniform sphere dataset file and print a summary.
pub fn run_gen_sphere(dim: usize, n: usize, seed: u64, out: &Path, two_timepoints: bool) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    if dim < 2 {
        return Err(Error::Config("dim must be >= 2".into()));
    }
    let ds = if two_timepoints {
        crate::data::sphere::sample_sphere_two_timepoints(dim, n, seed)
    } else {
        crate::data::sphere::sample_sphere(dim, n, seed)
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    save_dataset(out, &ds, format_for_path(out))?;
    let worst_norm = ds
        .rows()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0f64, f64::max);
    println!(
        "wrote {} points of dim {} to {} (max |norm-1| = {:.2e})",
        ds.n(),
        ds.dim(),
        out.display(),
        worst_norm
    );
    Ok(())
}

/// Average geodesic error of the trained path network against the analytic
/// sphere geodesic, plus the straight-chord reference on the same pairs.
pub struct AveOutcome {
    pub learned: EvalReport,
    pub learned_pair_dispersion: EvalReport,
    pub chord: EvalReport,
}

pub fn run_eval_ave(cfg: &RunConfig) -> Result<AveOutcome> {
    let ctx = prepare(cfg)?;
    for row in ctx.full.rows().take(64) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(
                "ave evaluation expects unit-norm rows (a sphere dataset)".into(),
            ));
        }
    }
    let geo = load_geodesic_for(&ctx, "eval.ave")?;
    let dim = ctx.full.dim();
    let mut per_seed = Vec::new();
    let mut per_pair_sd = 0.0;
    for (si, &seed) in cfg.eval_seeds.iter().enumerate() {
        let probe = crate::data::sphere::sample_sphere(dim, cfg.ave_n_pairs * 2, mix_seed(seed, 0xA7E, 7));
        let mut pair_values = Vec::with_capacity(cfg.ave_n_pairs);
        let mut rng_seed = 0u64;
        for p in 0..cfg.ave_n_pairs {
            let x0 = probe.row(2 * p).to_vec();
            let x1 = probe.row(2 * p + 1).to_vec();
            rng_seed = mix_seed(seed, 0xA7F, p as u64);
            let v = crate::eval::average_geodesic_error(
                |a, b, t| path_point(&geo, a, b, t, None, 0.0),
                |a, b, t| sphere_geodesic(a, b, t).expect("non-antipodal with probability 1"),
                &[(x0, x1)],
                cfg.ave_n_t,
                rng_seed,
            );
            pair_values.push(v);
        }
        let _ = rng_seed;
        let mean = pair_values.iter().sum::<f64>() / pair_values.len() as f64;
        per_seed.push(mean);
        if si == 0 {
            let var = pair_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / pair_values.len() as f64;
            per_pair_sd = var.sqrt();
        }
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let sd = (per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_seed.len() as f64).sqrt();

    // Chord reference on the same pair measure.
    let mut chord_per_seed = Vec::new();
    for &seed in &cfg.eval_seeds {
        let probe = crate::data::sphere::sample_sphere(dim, cfg.ave_n_pairs * 2, mix_seed(seed, 0xA7E, 7));
        let pairs: Vec<_> = (0..cfg.ave_n_pairs)
            .map(|p| (probe.row(2 * p).to_vec(), probe.row(2 * p + 1).to_vec()))
            .collect();
        let v = crate::eval::average_geodesic_error(
            |a, b, t| a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect(),
            |a, b, t| sphere_geodesic(a, b, t).expect("non-antipodal"),
            &pairs,
            cfg.ave_n_t,
            mix_seed(seed, 0xA80, 0),
        );
        chord_per_seed.push(v);
    }
    let chord_mean = chord_per_seed.iter().sum::<f64>() / chord_per_seed.len() as f64;
    let chord_sd = (chord_per_seed
        .iter()
        .map(|v| (v - chord_mean) * (v - chord_mean))
        .sum::<f64>()
        / chord_per_seed.len() as f64)
        .sqrt();

    let reports_dir = ctx.paths.reports_dir();
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(reports_dir.display().to_string(), e))?;
    let learned = EvalReport {
        metric: "ave".into(),
        value: mean,
        dispersion: sd,
        dispersion_over: "seeds".into(),
        n: cfg.ave_n_pairs * cfg.ave_n_t,
        seeds: cfg.eval_seeds.clone(),
        config_hash: ctx.hash.clone(),
    };
    let learned_pair_dispersion = EvalReport {
        metric: "ave".into(),
        value: mean,
        dispersion: per_pair_sd,
        dispersion_over: "pairs".into(),
        n: cfg.ave_n_pairs * cfg.ave_n_t,
        seeds: vec![cfg.eval_seeds[0]],
        config_hash: ctx.hash.clone(),
    };
    let chord = EvalReport {
        metric: "ave_chord".into(),
        value: chord_mean,
        dispersion: chord_sd,
        dispersion_over: "seeds".into(),
        n: cfg.ave_n_pairs * cfg.ave_n_t,
        seeds: cfg.eval_seeds.clone(),
        config_hash: ctx.hash.clone(),
    };
    learned.write_json(reports_dir.join("ave.json"))?;
    learned_pair_dispersion.write_json(reports_dir.join("ave_pairs.json"))?;
    chord.write_json(reports_dir.join("ave_chord.json"))?;
    learned.append_csv(ctx.paths.results_csv())?;
    chord.append_csv(ctx.paths.results_csv())?;
    println!("ave = {mean:.4} +- {sd:.4} (chord {chord_mean:.4} +- {chord_sd:.4})");
    Ok(AveOutcome {
        learned,
        learned_pair_dispersion,
        chord,
    })
}

/// Leave-one-timepoint-out W1. Expects one trained model per holdout under
/// `out_dir/holdout_{t}` (or the run dir itself when a single
/// `holdout_timepoint` is configured).
pub fn run_eval_w1(cfg: &RunConfig) -> Result<EvalReport> {
    let holdouts: Vec<i64> = if !cfg.holdout_timepoints.is_empty() {
        cfg.holdout_timepoints.clone()
    } else if let Some(h) = cfg.holdout_timepoint {
        vec![h]
    } else {
        return Err(Error::Config("no holdout timepoints configured".into()));
    };
    let mut per_run = Vec::new();
    for &h in &holdouts {
        let mut sub = cfg.clone();
        sub.holdout_timepoint = Some(h);
        if cfg.holdout_timepoints.len() > 1 || cfg.holdout_timepoint.is_none() {
            sub.out_dir = cfg.out_dir.join(format!("holdout_{h}"));
        }
        let ctx = prepare(&sub)?;
        if !ctx.paths.flow().exists() {
            return Err(Error::MissingPrerequisite {
                stage: format!("eval.w1 holdout {h}"),
                requires: format!("train --stage flow with holdout_timepoint={h}"),
            });
        }
        let flow = {
            let (net, _, _) = checkpoint::load_file(ctx.paths.flow())?;
            let wrapper = FlowModel::new(
                ctx.train.dim(),
                sub.hidden_dim,
                sub.n_layers,
                sub.sinusoidal_n_freq,
                0,
            );
            checkpoint::expect_dims(&net, wrapper.net.in_dim, sub.hidden_dim, wrapper.net.out_dim, sub.n_layers)?;
            wrapper.with_net(net)
        };
        let observed = ctx.full.observed_timepoints();
        let schedule = multi_timepoint_schedule(&observed, Some(h))?;
        for &seed in &cfg.eval_seeds {
            let w1 = leave_one_out_w1(&flow, &ctx.full, &schedule, cfg.integrate_steps, cfg.w1_max_n, seed)?;
            per_run.push(w1);
        }
    }
    let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
    let sd = (per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_run.len() as f64).sqrt();
    let paths = Paths::new(&cfg.out_dir);
    let reports_dir = paths.reports_dir();
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(reports_dir.display().to_string(), e))?;
    let report = EvalReport {
        metric: "w1_holdout".into(),
        value: mean,
        dispersion: sd,
        dispersion_over: "holdouts_and_seeds".into(),
        n: per_run.len(),
        seeds: cfg.eval_seeds.clone(),
        config_hash: cfg.hash(),
    };
    report.write_json(reports_dir.join("w1.json"))?;
    report.append_csv(paths.results_csv())?;
    println!("w1 (left-out marginals) = {mean:.4} +- {sd:.4} over {} runs", per_run.len());
    Ok(report)
}

/// Export an energy/metric grid over a coordinate plane.
pub fn run_export_grid(
    cfg: &RunConfig,
    axis_i: usize,
    axis_j: usize,
    lo: f64,
    hi: f64,
    resolution: usize,
    svg: bool,
) -> Result<PathBuf> {
    let ctx = prepare(cfg)?;
    let metric = load_metric(&ctx)?;
    let d = ctx.full.dim();
    if axis_i >= d || axis_j >= d {
        return Err(Error::Config(format!("grid axes must be < dim {d}")));
    }
    let spec = PlaneSpec::Axes {
        axis_i,
        axis_j,
        origin: vec![0.0; d],
        range_i: (lo, hi),
        range_j: (lo, hi),
    };
    let grid = crate::eval::export_energy_grid(&metric, &spec, resolution)?;
    std::fs::create_dir_all(&ctx.paths.out).map_err(|e| Error::io(ctx.paths.out.display().to_string(), e))?;
    let csv_path = ctx.paths.out.join("energy_grid.csv");
    grid.write_csv(&csv_path)?;
    if svg {
        grid.write_svg(ctx.paths.out.join("energy_grid.svg"))?;
    }
    println!("wrote {}", csv_path.display());
    Ok(csv_path)
}

/// Integrate trajectories from the marginal at `from` toward `to` and dump
/// them as CSV rows (traj_id, step, t, f0..f{d-1}).
pub fn run_interpolate(cfg: &RunConfig, from: i64, to: i64, n_steps: usize, n_traj: usize) -> Result<PathBuf> {
    let ctx = prepare(cfg)?;
    require(&ctx.paths.flow(), "interpolate", "flow")?;
    let flow = {
        let (net, _, _) = checkpoint::load_file(ctx.paths.flow())?;
        let wrapper = FlowModel::new(
            ctx.train.dim(),
            cfg.hidden_dim,
            cfg.n_layers,
            cfg.sinusoidal_n_freq,
            0,
        );
        checkpoint::expect_dims(&net, wrapper.net.in_dim, cfg.hidden_dim, wrapper.net.out_dim, cfg.n_layers)?;
        wrapper.with_net(net)
    };
    let observed = ctx.train.observed_timepoints();
    let u_of = |t: i64| -> Result<f64> {
        if observed.len() < 2 {
            return Ok(t as f64);
        }
        let lo = observed[0] as f64;
        let span = (observed[observed.len() - 1] - observed[0]) as f64;
        Ok((t as f64 - lo) / span)
    };
    let u0 = u_of(from)?;
    let u1 = u_of(to)?;
    let sources = if observed.len() >= 2 {
        ctx.train.timepoint_members(from)
    } else {
        (0..ctx.train.n()).collect()
    };
    if sources.is_empty() {
        return Err(Error::Config(format!("no rows at timepoint {from}")));
    }
    let picks = crate::data::weighted_minibatch_from(&ctx.train, &sources, n_traj, mix_seed(cfg.seed, 0x17A, 0));
    let mut out = String::from("traj_id,step,t");
    for i in 0..ctx.train.dim() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (tid, &row) in picks.iter().enumerate() {
        let traj = crate::transport::integrate_flow(
            &flow,
            ctx.train.row(row),
            u0,
            u1,
            n_steps,
            cfg.integrate_method,
        )?;
        for (step, point) in traj.iter().enumerate() {
            let t = u0 + (u1 - u0) * step as f64 / n_steps as f64;
            out.push_str(&format!("{tid},{step},{t}"));
            for v in point {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::create_dir_all(&ctx.paths.out).map_err(|e| Error::io(ctx.paths.out.display().to_string(), e))?;
    let path = ctx.paths.out.join("trajectories.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("wrote {}", path.display());
    Ok(path)
}
