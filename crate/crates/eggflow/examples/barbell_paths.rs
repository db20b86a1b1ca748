//! Geodesics across a barbell: two dense blobs joined by a sparse curved
//! bridge. Straight chords cut through the empty gap; the energy metric
//! makes the learned paths follow the bridge. Prints the metric line
//! integrals of learned paths vs chords and exports an energy grid.
//!
//! Run with: cargo run --release --example barbell_paths

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eggflow::data::Dataset;
use eggflow::eval::{export_energy_grid, metric_line_integral, PlaneSpec};
use eggflow::geometry::{
    path_point, train_geodesic, GeoTrainCfg, GeodesicModel, MetricField, MetricParams,
};
use eggflow::nn::optim::OptConfig;
use eggflow::nn::standard_normal;
use eggflow::refine::{refine_pipeline, RefineConfig, RefineTrainCfg};
use eggflow::score::NoiseSchedule;

/// Two blobs at (-1.2, 0) and (1.2, 0) plus a sparse arc bridge through
/// (0, 0.8). Returns the dataset and the per-blob row ranges.
pub fn barbell(seed: u64) -> (Dataset, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blob = 600;
    let n_bridge = 200;
    let mut pts = Vec::new();
    for side in [-1.2f64, 1.2] {
        for _ in 0..n_blob {
            pts.push(side + 0.2 * standard_normal(&mut rng));
            pts.push(0.2 * standard_normal(&mut rng));
        }
    }
    // Circle through the blob centers and (0, 0.8): center (0, -0.5), R = 1.3.
    let (cy, radius) = (-0.5f64, 1.3f64);
    let theta0 = (0.5f64 / 1.2).atan2(1.0); // angle of (1.2, 0) around (0,-0.5)
    let theta1 = std::f64::consts::PI - theta0;
    for k in 0..n_bridge {
        let theta = theta0 + (theta1 - theta0) * (k as f64 + 0.5) / n_bridge as f64;
        let r = radius + 0.04 * standard_normal(&mut rng);
        pts.push(r * theta.cos());
        pts.push(cy + r * theta.sin());
    }
    let n = 2 * n_blob + n_bridge;
    (Dataset::from_rows(pts, n, 2).unwrap(), n_blob, n_bridge)
}

fn main() {
    let (ds, n_blob, _) = barbell(3);
    let schedule = NoiseSchedule::log_spaced(5, 0.05, 0.4).unwrap();
    let opt = OptConfig {
        learning_rate: 2e-3,
        ema_decay: 0.99,
        ..OptConfig::default()
    };
    let refine_cfg = RefineConfig::default();
    let train_cfg = RefineTrainCfg {
        hidden_dim: 64,
        n_layers: 3,
        n_freq: 16,
        score_steps: 1200,
        energy_steps: 1200,
        batch_size: 128,
        opt,
        seed: 5,
    };
    let t0 = std::time::Instant::now();
    let artifacts = refine_pipeline(&ds, &refine_cfg, &train_cfg, &schedule, None).unwrap();
    println!("refined in {:.0}s", t0.elapsed().as_secs_f64());

    let metric = MetricField::fit(
        artifacts.energy,
        &ds,
        MetricParams {
            metric_sigma: Some(0.3),
            ..MetricParams::default()
        },
    )
    .unwrap();
    for (label, p) in [
        ("left blob ", vec![-1.2, 0.0]),
        ("gap center", vec![0.0, 0.0]),
        ("bridge top", vec![0.0, 0.8]),
        ("far field ", vec![0.0, -1.0]),
    ] {
        println!("G({label}) = {:10.2}", metric.metric_at(&p));
    }

    let mut geo = GeodesicModel::new(2, 64, 3, 16, 17);
    let geo_cfg = GeoTrainCfg {
        steps: 1200,
        batch_size: 192,
        sigma_flow: 0.1,
        opt,
        seed: 19,
    };
    // Cross-blob pairs only: the interesting geodesics.
    let left: Vec<usize> = (0..n_blob).collect();
    let right: Vec<usize> = (n_blob..2 * n_blob).collect();
    let t1 = std::time::Instant::now();
    let (trace, ema) = train_geodesic(&mut geo, &metric, &geo_cfg, |step| {
        eggflow::geometry::product_pairs_between(&ds, &left, &right, 192, 2000 + step as u64)
    })
    .unwrap();
    let geo = geo.with_net(ema);
    println!(
        "geodesics in {:.0}s, loss {:.1} -> {:.1}",
        t1.elapsed().as_secs_f64(),
        trace[0],
        trace.last().unwrap()
    );

    // Compare metric line integrals: learned path vs straight chord.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut wins = 0;
    let mut total = 0;
    let mut sample = Vec::new();
    for _ in 0..100 {
        let i = left[rng.gen_range(0..left.len())];
        let j = right[rng.gen_range(0..right.len())];
        let x0 = ds.row(i).to_vec();
        let x1 = ds.row(j).to_vec();
        let learned = metric_line_integral(|t| path_point(&geo, &x0, &x1, t, None, 0.0), &metric, 100);
        let chord = metric_line_integral(
            |t| x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
            &metric,
            100,
        );
        if learned < chord {
            wins += 1;
        }
        total += 1;
        if sample.len() < 3 {
            let mid = path_point(&geo, &x0, &x1, 0.5, None, 0.0);
            sample.push(format!(
                "learned {learned:8.1} vs chord {chord:8.1}, midpoint ({:+.2}, {:+.2})",
                mid[0], mid[1]
            ));
        }
    }
    for s in &sample {
        println!("  {s}");
    }
    println!(
        "\nlearned path cheaper than chord for {wins}/{total} cross-blob pairs ({}%)",
        100 * wins / total
    );

    // Energy grid export for plotting.
    let spec = PlaneSpec::Axes {
        axis_i: 0,
        axis_j: 1,
        origin: vec![0.0, 0.0],
        range_i: (-2.0, 2.0),
        range_j: (-1.5, 1.5),
    };
    let grid = export_energy_grid(&metric, &spec, 64).unwrap();
    let out = std::env::temp_dir().join("barbell_energy_grid.csv");
    grid.write_csv(&out).unwrap();
    println!("energy grid written to {}", out.display());
}
