//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Slow end-to-end criteria live at desk scale; seeds
//! are fixed so every run is reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eggflow::data::sphere::sample_sphere;
use eggflow::data::Dataset;
use eggflow::eval::{average_geodesic_error, sphere_geodesic, wasserstein1};
use eggflow::geometry::{
    geodesic_loss, geodesic_loss_grad, path_point, product_pairs, train_geodesic, GeoTrainCfg,
    GeodesicModel, MetricField, MetricParams, Pair,
};
use eggflow::nn::optim::OptConfig;
use eggflow::nn::{standard_normal, Mlp, MlpGrads, Role};
use eggflow::refine::{
    anneal_loss, anneal_loss_grad, sample_cluster_draws, snis_estimate, snis_weights, ClusterDraws,
    DistillPenalty, RefineConfig,
};
use eggflow::score::{
    dsm_loss, dsm_loss_grad, energy_match_loss, energy_match_loss_grad, train_energy_match,
    train_score_dsm, BatchItem, EnergyModel, NoiseSchedule, ScoreModel, TrainCfg,
};
use eggflow::transport::ot::solve_assignment;
use eggflow::transport::{
    embedding_loss, embedding_loss_grad, flow_loss, flow_loss_grad, EmbeddingLossForm,
    EmbeddingModel, FlowModel, SegmentPair,
};

// ---------------------------------------------------------------- helpers

fn fd_check(
    analytic: &MlpGrads,
    layers: &mut Vec<eggflow::nn::Linear>,
    mut eval: impl FnMut(&Vec<eggflow::nn::Linear>) -> f64,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for li in 0..layers.len() {
        for wi in 0..layers[li].w.len() {
            let orig = layers[li].w[wi];
            layers[li].w[wi] = orig + h;
            let up = eval(layers);
            layers[li].w[wi] = orig - h;
            let dn = eval(layers);
            layers[li].w[wi] = orig;
            let fd = (up - dn) / (2.0 * h);
            let got = analytic.layers[li].w[wi];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            worst = worst.max((fd - got).abs() / denom);
        }
        for bi in 0..layers[li].b.len() {
            let orig = layers[li].b[bi];
            layers[li].b[bi] = orig + h;
            let up = eval(layers);
            layers[li].b[bi] = orig - h;
            let dn = eval(layers);
            layers[li].b[bi] = orig;
            let fd = (up - dn) / (2.0 * h);
            let got = analytic.layers[li].b[bi];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            worst = worst.max((fd - got).abs() / denom);
        }
    }
    worst
}

// -------------------------------------------------- criterion 1: gradients

#[test]
fn c1_gradient_correctness_all_losses() {
    const TOL: f64 = 1e-4;
    let schedule = NoiseSchedule::log_spaced(3, 0.1, 0.5).unwrap();
    let xs = vec![vec![0.4, -0.2], vec![-0.7, 0.9], vec![0.1, 0.5]];
    let batch: Vec<BatchItem> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| BatchItem {
            id: i,
            x,
            cluster: None,
        })
        .collect();
    let mut worst_by_loss: Vec<(&str, f64)> = Vec::new();

    // dsm
    {
        let score = ScoreModel::new(2, 16, 2, 8, schedule.clone(), false, 5);
        let (_, g) = dsm_loss_grad(&score, &batch, 1.3, 11).unwrap();
        let mut probe = score.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut s = score.clone();
                s.net.layers = ls.clone();
                dsm_loss(&s, &batch, 1.3, 11).unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("dsm", worst));
    }
    // energy match
    {
        let energy = EnergyModel::new(2, 16, 2, 8, schedule.clone(), false, 6);
        let score = ScoreModel::new(2, 16, 2, 8, schedule.clone(), false, 7);
        let (_, g) = energy_match_loss_grad(&energy, &score, &batch, 13).unwrap();
        let mut probe = energy.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut e = energy.clone();
                e.net.layers = ls.clone();
                energy_match_loss(&e, &score, &batch, 13).unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("energy_match", worst));
    }
    // anneal (alpha = 0.5 exercises both terms, including the L1 penalty)
    {
        let score_k = ScoreModel::new(2, 16, 2, 8, schedule.clone(), false, 8);
        let prev = ScoreModel::new(2, 16, 2, 8, schedule.clone(), false, 9);
        let (_, g) =
            anneal_loss_grad(&score_k, &prev, &batch, 2.0, 1.0, 0.5, DistillPenalty::Abs, 17).unwrap();
        let mut probe = score_k.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut s = score_k.clone();
                s.net.layers = ls.clone();
                anneal_loss(&s, &prev, &batch, 2.0, 1.0, 0.5, DistillPenalty::Abs, 17).unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("anneal", worst));
    }
    let pairs: Vec<Pair> = vec![
        (vec![0.1, 0.3], vec![0.9, -0.4]),
        (vec![-0.6, 0.2], vec![0.4, 0.8]),
    ];
    // geodesic (nonzero psi, constant metric keeps the FD clean)
    {
        let mut geo = GeodesicModel::new(2, 16, 2, 8, 10);
        geo.net = Mlp::new(Role::Geodesic, 4 + 16, 16, 2, 2, false, 11);
        let metric = MetricField::constant(1.7);
        let (_, g) = geodesic_loss_grad(&geo, &metric, &pairs, 0.05, 19).unwrap();
        let mut probe = geo.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut m = geo.clone();
                m.net.layers = ls.clone();
                geodesic_loss(&m, &metric, &pairs, 0.05, 19).unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("geodesic", worst));
    }
    // embedding
    {
        let f = EmbeddingModel::new(2, 2, 16, 2, 12);
        let mut geo = GeodesicModel::new(2, 16, 2, 8, 13);
        geo.net = Mlp::new(Role::Geodesic, 4 + 16, 16, 2, 2, false, 14);
        let metric = MetricField::constant(1.2);
        let (_, g) = embedding_loss_grad(
            &f,
            &geo,
            &metric,
            &pairs,
            0.05,
            EmbeddingLossForm::SquaredResidual,
            23,
        )
        .unwrap();
        let mut probe = f.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut m = f.clone();
                m.net.layers = ls.clone();
                embedding_loss(&m, &geo, &metric, &pairs, 0.05, EmbeddingLossForm::SquaredResidual, 23)
                    .unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("embedding", worst));
    }
    // flow
    {
        let v = FlowModel::new(2, 16, 2, 8, 15);
        let mut geo = GeodesicModel::new(2, 16, 2, 8, 16);
        geo.net = Mlp::new(Role::Geodesic, 4 + 16, 16, 2, 2, false, 17);
        let sps: Vec<SegmentPair> = pairs.iter().cloned().map(SegmentPair::unit).collect();
        let (_, g) = flow_loss_grad(&v, &geo, &sps, 0.05, 29).unwrap();
        let mut probe = v.clone();
        let mut layers = std::mem::take(&mut probe.net.layers);
        let worst = fd_check(
            &g,
            &mut layers,
            |ls| {
                let mut m = v.clone();
                m.net.layers = ls.clone();
                flow_loss(&m, &geo, &sps, 0.05, 29).unwrap()
            },
            1e-5,
        );
        worst_by_loss.push(("flow", worst));
    }

    let overall = worst_by_loss.iter().map(|(_, w)| *w).fold(0.0f64, f64::max);
    let detail: Vec<String> = worst_by_loss.iter().map(|(n, w)| format!("{n}={w:.2e}")).collect();
    assert!(overall < TOL, "gradient check failed: {}", detail.join(" "));
    println!("ACCEPT C1 gradient-correctness: PASS (max rel err {overall:.2e}; {})", detail.join(" "));
}

// ------------------------------------------- criterion 2: Gaussian oracle

#[test]
fn c2_gaussian_score_energy_oracle() {
    let dim = 2;
    let ds = Dataset::from_rows(vec![0.0; dim], 1, dim).unwrap();
    let schedule = NoiseSchedule { sigmas: vec![1.0] };
    let opt = OptConfig {
        learning_rate: 2e-3,
        ema_decay: 0.99,
        ..OptConfig::default()
    };
    let mut score = ScoreModel::new(dim, 48, 3, 16, schedule.clone(), false, 7);
    let cfg = TrainCfg {
        steps: 1500,
        batch_size: 128,
        opt,
        seed: 11,
        stage: "score".into(),
    };
    let (_, sema) = train_score_dsm(&mut score, &ds, 1.0, &cfg).unwrap();
    let sema = score.with_net(sema);

    let mut energy = EnergyModel::new(dim, 48, 3, 16, schedule, false, 8);
    let ecfg = TrainCfg {
        steps: 1500,
        batch_size: 128,
        opt,
        seed: 12,
        stage: "energy".into(),
    };
    let (_, eema) = train_energy_match(&mut energy, &sema, &ds, &ecfg).unwrap();
    let eema = energy.with_net(eema);

    let mut worst_score = 0.0f64;
    let mut worst_energy = 0.0f64;
    for k in 1..=8 {
        let r = 0.25 * k as f64;
        let angle = 0.7 + 0.4 * k as f64;
        let y = [r * angle.cos(), r * angle.sin()];
        let s = sema.score(&y, 1.0, None);
        // True score of N(0, I) is -y; compare the full vector.
        let err = ((s[0] + y[0]).powi(2) + (s[1] + y[1]).powi(2)).sqrt() / r;
        worst_score = worst_score.max(err);
        let e = eema.energy_at(&y, 1.0, None);
        // E(0) = 0 by the head, so the additive constant is pinned.
        let true_e = r * r / 2.0;
        worst_energy = worst_energy.max((e - true_e).abs() / true_e);
    }
    assert!(worst_score < 0.10, "score error {worst_score:.3}");
    assert!(worst_energy < 0.10, "energy error {worst_energy:.3}");
    println!(
        "ACCEPT C2 gaussian-oracle: PASS (score within {:.1}%, energy within {:.1}%)",
        100.0 * worst_score,
        100.0 * worst_energy
    );
}

// ------------------------------------ criterion 3: Theorem-1 SNIS estimate

struct SnisToy {
    weights: eggflow::refine::SnisWeights,
    g: Vec<f64>,
    exact: f64,
}

fn snis_toy() -> SnisToy {
    // Two clusters, sizes 10 and 1000; r_i from a seeded positive
    // distribution; g arbitrary but fixed.
    let n = 1010usize;
    let cluster_of: Vec<usize> = (0..n).map(|i| usize::from(i >= 10)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    let r: Vec<f64> = (0..n).map(|_| (0.8 * standard_normal(&mut rng)).exp()).collect();
    let g: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng) * 2.0 + 0.5).collect();
    let mean0 = g[..10].iter().sum::<f64>() / 10.0;
    let mean1 = g[10..].iter().sum::<f64>() / 1000.0;
    let exact = 0.5 * (mean0 + mean1);

    // Assemble the weight structure directly from r (the estimator only
    // consumes r and the cluster layout).
    let mut weights = vec![0.0; n];
    let mut cluster_normalizers = vec![0.0; 2];
    for i in 0..n {
        cluster_normalizers[cluster_of[i]] += r[i];
    }
    let sizes = [10usize, 1000usize];
    let mut total = 0.0;
    for i in 0..n {
        weights[i] = r[i] / sizes[cluster_of[i]] as f64;
        total += weights[i];
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    SnisToy {
        weights: eggflow::refine::SnisWeights {
            weights,
            r,
            cluster_normalizers,
            cluster_of,
            cluster_sizes: sizes.to_vec(),
            clip_windows: vec![(0.0, 0.0); 2],
            ess,
        },
        g,
        exact,
    }
}

#[test]
fn c3_snis_consistency_and_rate() {
    let toy = snis_toy();

    // Within 3 standard errors at m = 1e5 draws.
    let draws = sample_cluster_draws(&toy.weights, 50_000, 99);
    let est = snis_estimate(&toy.g, &toy.weights, &draws).unwrap();
    let dev = (est.value - toy.exact).abs();
    assert!(
        dev <= 3.0 * est.se,
        "estimate {} vs exact {} (|dev| {:.4} > 3 se {:.4})",
        est.value,
        toy.exact,
        dev,
        3.0 * est.se
    );

    // Error rate ~ m^{-1/2}: slope of log mean |error| vs log m.
    let ms = [1_000usize, 10_000, 100_000, 1_000_000];
    let reps = 20;
    let mut log_err = Vec::new();
    for (mi, &m) in ms.iter().enumerate() {
        let mut errs = Vec::new();
        for rep in 0..reps {
            let d = sample_cluster_draws(&toy.weights, m / 2, 1000 + (mi * reps + rep) as u64);
            let e = snis_estimate(&toy.g, &toy.weights, &d).unwrap();
            errs.push((e.value - toy.exact).abs());
        }
        log_err.push((errs.iter().sum::<f64>() / reps as f64).ln());
    }
    let log_m: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let mx = log_m.iter().sum::<f64>() / 4.0;
    let my = log_err.iter().sum::<f64>() / 4.0;
    let slope = log_m
        .iter()
        .zip(&log_err)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / log_m.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    assert!(
        (-0.65..=-0.35).contains(&slope),
        "convergence slope {slope:.3} outside [-0.65, -0.35]"
    );

    // Risk-estimator consistency: g_i = a fixed per-point loss value.
    let loss_vals: Vec<f64> = toy.g.iter().map(|v| v * v).collect();
    let exact_risk = 0.5
        * (loss_vals[..10].iter().sum::<f64>() / 10.0 + loss_vals[10..].iter().sum::<f64>() / 1000.0);
    let d = sample_cluster_draws(&toy.weights, 50_000, 4242);
    let est_risk = snis_estimate(&loss_vals, &toy.weights, &d).unwrap();
    let rdev = (est_risk.value - exact_risk).abs();
    assert!(
        rdev <= 3.0 * est_risk.se,
        "risk {} vs exact {} (3 se {:.4})",
        est_risk.value,
        exact_risk,
        3.0 * est_risk.se
    );

    println!(
        "ACCEPT C3 snis-theorem: PASS (|dev| {dev:.4} <= 3se {:.4}; slope {slope:.2}; risk dev {rdev:.4})",
        3.0 * est.se
    );
}

// --------------------------------------------- criterion 4: OT exactness

/// Independent oracle: successive shortest augmenting paths with
/// Bellman-Ford (no potentials), an entirely different route from the
/// production solver.
fn oracle_assignment_cost(cost: &[f64], n: usize) -> f64 {
    let big = f64::INFINITY;
    // Node indexing: source = 2n, sink = 2n+1, rows 0..n, cols n..2n.
    let source = 2 * n;
    let sink = 2 * n + 1;
    let mut cap = std::collections::HashMap::new();
    let mut cost_map = std::collections::HashMap::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); 2 * n + 2];
    let mut add_edge = |adj: &mut Vec<Vec<usize>>,
                        cap: &mut std::collections::HashMap<(usize, usize), f64>,
                        cost_map: &mut std::collections::HashMap<(usize, usize), f64>,
                        u: usize,
                        v: usize,
                        c: f64,
                        w: f64| {
        adj[u].push(v);
        adj[v].push(u);
        cap.insert((u, v), c);
        cap.insert((v, u), 0.0);
        cost_map.insert((u, v), w);
        cost_map.insert((v, u), -w);
    };
    for i in 0..n {
        add_edge(&mut adj, &mut cap, &mut cost_map, source, i, 1.0, 0.0);
        add_edge(&mut adj, &mut cap, &mut cost_map, n + i, sink, 1.0, 0.0);
        for j in 0..n {
            add_edge(&mut adj, &mut cap, &mut cost_map, i, n + j, 1.0, cost[i * n + j]);
        }
    }
    let mut total = 0.0;
    for _ in 0..n {
        // Bellman-Ford shortest path source -> sink on residual graph.
        let mut dist = vec![big; 2 * n + 2];
        let mut prev = vec![usize::MAX; 2 * n + 2];
        dist[source] = 0.0;
        for _ in 0..(2 * n + 2) {
            let mut improved = false;
            for u in 0..(2 * n + 2) {
                if dist[u] == big {
                    continue;
                }
                for &v in &adj[u] {
                    if cap[&(u, v)] > 0.5 && dist[u] + cost_map[&(u, v)] < dist[v] - 1e-15 {
                        dist[v] = dist[u] + cost_map[&(u, v)];
                        prev[v] = u;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        assert!(dist[sink] < big, "oracle: no augmenting path");
        total += dist[sink];
        let mut v = sink;
        while v != source {
            let u = prev[v];
            *cap.get_mut(&(u, v)).unwrap() -= 1.0;
            *cap.get_mut(&(v, u)).unwrap() += 1.0;
            v = u;
        }
    }
    total
}

fn exhaustive_assignment_cost(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        if acc >= *best {
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

#[test]
fn c4_assignment_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    // Exhaustive check on every size up to 8.
    let mut worst_small: f64 = 0.0;
    for n in 1..=8 {
        for _ in 0..8 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 3.0).collect();
            let (_, got) = solve_assignment(&cost, n);
            let want = exhaustive_assignment_cost(&cost, n);
            worst_small = worst_small.max((got - want).abs());
        }
    }
    assert!(worst_small < 1e-12, "exhaustive mismatch {worst_small:.3e}");

    // Random 64-point clouds against the independent flow-based oracle.
    let mut worst_large: f64 = 0.0;
    for case in 0..6 {
        let n = 64;
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect()
        };
        let a = cloud(&mut rng);
        let b = cloud(&mut rng);
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = a[i]
                    .iter()
                    .zip(&b[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let (_, got) = solve_assignment(&cost, n);
        let want = oracle_assignment_cost(&cost, n);
        worst_large = worst_large.max((got - want).abs());
        // W1 consistency through the public evaluation entry point.
        if case == 0 {
            let w1 = wasserstein1(&a, &b, 64, 0).unwrap();
            assert!((w1 - want / n as f64).abs() < 1e-12);
        }
    }
    assert!(worst_large < 1e-12, "oracle mismatch {worst_large:.3e}");
    println!(
        "ACCEPT C4 ot-exactness: PASS (exhaustive n<=8 diff {worst_small:.1e}, n=64 oracle diff {worst_large:.1e})"
    );
}

// ------------------------------- criterion 5: constant-metric geodesics

#[test]
fn c5_constant_metric_recovers_chords() {
    // gamma = 1, lambda = 0 -> G = 1 everywhere.
    let metric = MetricField::constant(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cloud: Vec<f64> = (0..400 * 2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    let ds = Dataset::from_rows(cloud, 400, 2).unwrap();
    let mut geo = GeodesicModel::new(2, 32, 3, 16, 5);
    let cfg = GeoTrainCfg {
        steps: 600,
        batch_size: 64,
        sigma_flow: 0.1,
        opt: OptConfig {
            learning_rate: 1e-3,
            ema_decay: 0.99,
            ..OptConfig::default()
        },
        seed: 6,
    };
    let (_, ema) = train_geodesic(&mut geo, &metric, &cfg, |step| product_pairs(&ds, 64, 900 + step as u64)).unwrap();
    let geo = geo.with_net(ema);

    // 100 fresh test pairs; max deviation from the chord over a t grid.
    let mut worst = 0.0f64;
    for p in 0..100 {
        let x0 = vec![rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0];
        let x1 = vec![rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0];
        let chord_len: f64 = x0
            .iter()
            .zip(&x1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if chord_len < 0.3 {
            continue;
        }
        let _ = p;
        for k in 1..20 {
            let t = k as f64 / 20.0;
            let pt = path_point(&geo, &x0, &x1, t, None, 0.0);
            let chord: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let dev: f64 = pt
                .iter()
                .zip(&chord)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(dev / chord_len);
        }
    }
    assert!(worst < 0.05, "max chord deviation {:.3} of chord length", worst);
    println!("ACCEPT C5 constant-metric-chords: PASS (max deviation {:.1}% of chord length)", 100.0 * worst);
}

// ----------------------------------------------- criterion 9: determinism

#[test]
fn c9_bitwise_determinism() {
    use eggflow::config::RunConfig;
    use eggflow::pipeline::{run_train, Stage};

    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("toy.bin");
    eggflow::pipeline::run_gen_sphere(3, 400, 9, &data_path, true).unwrap();

    let mut cfg = RunConfig::default();
    cfg.dataset = Some(data_path);
    cfg.hidden_dim = 16;
    cfg.n_layers = 2;
    cfg.score_steps = 12;
    cfg.energy_steps = 12;
    cfg.geodesic_steps = 12;
    cfg.embedding_steps = 12;
    cfg.flow_steps = 12;
    cfg.score_energy_batch_size = 32;
    cfg.geodesic_flow_batch_size = 16;
    cfg.n_noise_scales = 3;
    cfg.annealing_steps = 2;
    cfg.seed = 7;

    // Run twice into the SAME directory with the same (config, seed) and
    // compare every artifact byte for byte.
    fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
    let dir = tmp.path().join("run");
    cfg.out_dir = dir.clone();
    run_train(&cfg, Stage::All).unwrap();
    let snapshot = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = walk(dir)
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                (rel, std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort_by(|a, b| a.0.cmp(&b.0));
        files
    };
    let a = snapshot(&dir);
    run_train(&cfg, Stage::All).unwrap();
    let b = snapshot(&dir);
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "artifact {name_a} differs between runs");
    }
    assert!(a.len() >= 10, "expected a full artifact set, got {}", a.len());
    println!("ACCEPT C9 determinism: PASS ({} artifacts bit-identical across runs)", a.len());
}
