//! Learn geodesics on a high-dimensional sphere from samples alone.
//!
//! Samples the unit sphere, learns score -> energy -> metric, trains the
//! geodesic network under the energy metric, and compares its paths to the
//! analytic great-circle geodesics (and to straight chords).
//!
//! Run with: cargo run --release --example sphere_geodesics [dim] [n] [hidden] [steps]

use eggflow::data::sphere::sample_sphere;
use eggflow::eval::{average_geodesic_error, sphere_geodesic};
use eggflow::geometry::{
    path_point, product_pairs, train_geodesic, GeoTrainCfg, GeodesicModel, MetricField,
    MetricParams,
};
use eggflow::nn::optim::OptConfig;
use eggflow::refine::{refine_pipeline, RefineConfig, RefineTrainCfg};
use eggflow::score::NoiseSchedule;

fn arg(n: usize, default: usize) -> usize {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let dim = arg(1, 10);
    let n = arg(2, 8000);
    let hidden = arg(3, 96);
    let steps = arg(4, 400);
    println!("sphere: dim={dim} n={n} hidden={hidden} steps={steps}");

    let ds = sample_sphere(dim, n, 1);
    let schedule = NoiseSchedule::log_spaced(5, 0.05, 0.25).expect("valid schedule");
    let opt = OptConfig {
        learning_rate: 1e-3,
        ema_decay: 0.99,
        ..OptConfig::default()
    };
    let refine_cfg = RefineConfig::default();
    let train_cfg = RefineTrainCfg {
        hidden_dim: hidden,
        n_layers: 3,
        n_freq: 32,
        score_steps: steps,
        energy_steps: steps,
        batch_size: 192,
        opt,
        seed: 5,
    };
    let t0 = std::time::Instant::now();
    let artifacts = refine_pipeline(&ds, &refine_cfg, &train_cfg, &schedule, None).expect("refinement");
    println!(
        "refined in {:.1}s (ESS per step: {:?})",
        t0.elapsed().as_secs_f64(),
        artifacts.per_step_ess.iter().map(|e| e.round()).collect::<Vec<_>>()
    );

    // Radial diagnostics: mean learned energy and radial score vs radius.
    let probe_dirs = sample_sphere(dim, 64, 98);
    println!("\n radius |  E(sig_min)  E(sig_mid)  E(sig_max) | radial score(sig_max)");
    for r in [0.4, 0.6, 0.8, 0.9, 1.0, 1.1, 1.2, 1.4, 1.6] {
        let mut e_lo = 0.0;
        let mut e_mid = 0.0;
        let mut e_hi = 0.0;
        let mut s_rad = 0.0;
        let sig = &schedule.sigmas;
        for u in probe_dirs.rows() {
            let p: Vec<f64> = u.iter().map(|v| v * r).collect();
            e_lo += artifacts.energy.energy_at(&p, sig[0], None);
            e_mid += artifacts.energy.energy_at(&p, sig[sig.len() / 2], None);
            e_hi += artifacts.energy.energy_at(&p, sig[sig.len() - 1], None);
            let s = artifacts.score.score(&p, sig[sig.len() - 1], None);
            s_rad += s.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        }
        let m = probe_dirs.n() as f64;
        println!(
            "  {r:4.2}  |  {:9.3}  {:9.3}  {:9.3} | {:9.3}",
            e_lo / m,
            e_mid / m,
            e_hi / m,
            s_rad / m
        );
    }

    let metric_params = MetricParams {
        metric_sigma: Some(0.1),
        ..MetricParams::default()
    };
    let metric = MetricField::fit(artifacts.energy, &ds, metric_params).expect("metric fit");
    // How well does the metric see the shell? Probe on-manifold vs off.
    let probe = sample_sphere(dim, 256, 99);
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let g_on = median(probe.rows().map(|r| metric.metric_at(r)).collect());
    for radius in [0.5, 0.7, 1.3, 1.5] {
        let g_off = median(
            probe
                .rows()
                .map(|r| {
                    let p: Vec<f64> = r.iter().map(|v| v * radius).collect();
                    metric.metric_at(&p)
                })
                .collect(),
        );
        println!("median G: on-shell {g_on:.3} vs radius {radius}: {g_off:.3}");
    }

    let mut geo = GeodesicModel::new(dim, hidden, 3, 32, 17);
    let geo_cfg = GeoTrainCfg {
        steps: steps * 2,
        batch_size: 192,
        sigma_flow: 0.1,
        opt,
        seed: 19,
    };
    let t1 = std::time::Instant::now();
    let (trace, ema) = train_geodesic(&mut geo, &metric, &geo_cfg, |step| {
        product_pairs(&ds, 192, 1000 + step as u64)
    })
    .expect("geodesic training");
    let geo = geo.with_net(ema);
    println!(
        "geodesics trained in {:.1}s, loss {:.3} -> {:.3}",
        t1.elapsed().as_secs_f64(),
        trace.first().unwrap(),
        trace.last().unwrap()
    );

    // Fresh uniform pairs for evaluation.
    let eval_pts = sample_sphere(dim, 2 * 512, 777);
    let pairs: Vec<_> = (0..512)
        .map(|p| (eval_pts.row(2 * p).to_vec(), eval_pts.row(2 * p + 1).to_vec()))
        .collect();
    let learned = average_geodesic_error(
        |a, b, t| path_point(&geo, a, b, t, None, 0.0),
        |a, b, t| sphere_geodesic(a, b, t).expect("non-antipodal"),
        &pairs,
        8,
        3,
    );
    let chord = average_geodesic_error(
        |a, b, t| a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect(),
        |a, b, t| sphere_geodesic(a, b, t).expect("non-antipodal"),
        &pairs,
        8,
        3,
    );
    println!("\nAVE learned = {learned:.4}");
    println!("AVE chord   = {chord:.4}");
    println!("learned beats chord: {}", learned < chord);
}
