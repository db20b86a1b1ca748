//! Scratch tuning harness for the sphere pipeline (not part of the suite).
//! cargo run --release --example tune_sphere [n] [hidden] [layers] [score_steps] [geo_steps] [lr_milli]

use eggflow::data::sphere::sample_sphere;
use eggflow::eval::{average_geodesic_error, sphere_geodesic};
use eggflow::geometry::{
    path_point, product_pairs, train_geodesic, GeoTrainCfg, GeodesicModel, MetricField, MetricParams,
};
use eggflow::nn::optim::OptConfig;
use eggflow::score::{train_energy_match, train_score_dsm, EnergyModel, NoiseSchedule, ScoreModel, TrainCfg};

fn arg(n: usize, default: f64) -> f64 {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let dim = 10usize;
    let n = arg(1, 8000.0) as usize;
    let hidden = arg(2, 128.0) as usize;
    let layers = arg(3, 4.0) as usize;
    let score_steps = arg(4, 4000.0) as usize;
    let geo_steps = arg(5, 1500.0) as usize;
    let lr = arg(6, 1.0) * 1e-3;
    println!("n={n} hidden={hidden} layers={layers} score_steps={score_steps} geo_steps={geo_steps} lr={lr}");

    let ds = sample_sphere(dim, n, 1);
    let schedule = NoiseSchedule { sigmas: vec![0.1] };
    let opt = OptConfig {
        learning_rate: lr,
        ema_decay: 0.99,
        ..OptConfig::default()
    };

    let t0 = std::time::Instant::now();
    let mut score = ScoreModel::new(dim, hidden, layers, 32, schedule.clone(), false, 3);
    let cfg = TrainCfg {
        steps: score_steps,
        batch_size: 256,
        opt,
        seed: 5,
        stage: "score".into(),
    };
    let (trace, sema) = train_score_dsm(&mut score, &ds, 1.0, &cfg).unwrap();
    let sema = score.with_net(sema);
    println!(
        "score: {:.0}s, loss {:.3} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        trace[0],
        trace.last().unwrap()
    );

    // Radial score profile vs analytic values.
    let dirs = sample_sphere(dim, 64, 98);
    // Analytic radial scores of the sigma = 0.15 smoothed sphere density.
    let truth = [
        (0.6, 32.72),
        (0.8, 14.50),
        (0.9, 5.10),
        (1.0, -4.42),
        (1.1, -14.03),
        (1.2, -23.69),
    ];
    println!(" radius | learned radial s | true");
    for (r, want) in truth {
        let mut acc = 0.0;
        for u in dirs.rows() {
            let p: Vec<f64> = u.iter().map(|v| v * r).collect();
            let s = sema.score(&p, 0.1, None);
            acc += s.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        }
        println!("  {r:4.2}  | {:8.2} | {want:+8.2}", acc / dirs.n() as f64);
    }

    let t1 = std::time::Instant::now();
    let mut energy = EnergyModel::new(dim, hidden, layers, 32, schedule.clone(), false, 7);
    let ecfg = TrainCfg {
        steps: score_steps,
        batch_size: 256,
        opt,
        seed: 9,
        stage: "energy".into(),
    };
    let (etrace, eema) = train_energy_match(&mut energy, &sema, &ds, &ecfg).unwrap();
    let eema = energy.with_net(eema);
    println!(
        "energy: {:.0}s, loss {:.3} -> {:.4}",
        t1.elapsed().as_secs_f64(),
        etrace[0],
        etrace.last().unwrap()
    );
    println!(" radius | learned E - E(shell)  (true @0.1: 0.6:+5.75 0.8:+1.02 0.9:+0.03 1.1:+0.92 1.2:+2.81)");
    let e_shell: f64 = dirs.rows().map(|u| eema.energy_at(u, 0.1, None)).sum::<f64>() / dirs.n() as f64;
    for r in [0.6, 0.8, 0.9, 1.0, 1.1, 1.2] {
        let mut acc = 0.0;
        for u in dirs.rows() {
            let p: Vec<f64> = u.iter().map(|v| v * r).collect();
            acc += eema.energy_at(&p, 0.1, None);
        }
        println!("  {r:4.2}  | {:+8.2}", acc / dirs.n() as f64 - e_shell);
    }

    let metric = MetricField::fit(
        eema,
        &ds,
        MetricParams {
            metric_sigma: Some(0.1),
            q_hi: 0.995,
            ..MetricParams::default()
        },
    )
    .unwrap();
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let g_on = median(dirs.rows().map(|r| metric.metric_at(r)).collect());
    for radius in [0.7, 0.8, 0.85, 0.9, 0.95, 1.05, 1.1, 1.2] {
        let g = median(
            dirs.rows()
                .map(|u| {
                    let p: Vec<f64> = u.iter().map(|v| v * radius).collect();
                    metric.metric_at(&p)
                })
                .collect(),
        );
        println!("median G on-shell {g_on:.1} vs r={radius}: {g:.1}");
    }

    let t2 = std::time::Instant::now();
    let mut geo = GeodesicModel::new(dim, hidden, layers, 32, 17);
    let geo_cfg = GeoTrainCfg {
        steps: geo_steps,
        batch_size: 256,
        sigma_flow: 0.2,
        opt: OptConfig {
            learning_rate: 5e-3,
            ema_decay: 0.99,
            ..OptConfig::default()
        },
        seed: 19,
    };
    let (gtrace, gema) = train_geodesic(&mut geo, &metric, &geo_cfg, |step| {
        product_pairs(&ds, 256, 1000 + step as u64)
    })
    .unwrap();
    let geo = geo.with_net(gema);
    println!(
        "geodesic: {:.0}s, loss {:.1} -> {:.1}",
        t2.elapsed().as_secs_f64(),
        gtrace[0],
        gtrace.last().unwrap()
    );

    let eval_pts = sample_sphere(dim, 2 * 512, 777);
    let pairs: Vec<_> = (0..512)
        .map(|p| (eval_pts.row(2 * p).to_vec(), eval_pts.row(2 * p + 1).to_vec()))
        .collect();
    let learned = average_geodesic_error(
        |a, b, t| path_point(&geo, a, b, t, None, 0.0),
        |a, b, t| sphere_geodesic(a, b, t).unwrap(),
        &pairs,
        8,
        3,
    );
    let chord = average_geodesic_error(
        |a, b, t| a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect(),
        |a, b, t| sphere_geodesic(a, b, t).unwrap(),
        &pairs,
        8,
        3,
    );
    // Radial hugging diagnostic: midpoint norms of learned paths.
    let mid_norm: f64 = pairs
        .iter()
        .take(64)
        .map(|(a, b)| {
            let p = path_point(&geo, a, b, 0.5, None, 0.0);
            p.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / 64.0;
    println!("\nmean midpoint radius of learned paths: {mid_norm:.3} (chord would be ~0.72)");
    println!("AVE learned = {learned:.4}\nAVE chord   = {chord:.4}\nbeats chord: {}", learned < chord);
}
