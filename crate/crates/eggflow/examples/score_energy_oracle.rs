//! Score and energy matching against a closed-form oracle.
//!
//! A dataset holding a single point at the origin, noised at sigma = 1,
//! has the Gaussian density N(0, I): the true score is -y and the true
//! energy is ||y||^2 / 2 up to a constant. This example trains the score by
//! denoising score matching, distills the energy from the frozen EMA score,
//! and prints both against the analytic values.
//!
//! Run with: cargo run --release --example score_energy_oracle

use eggflow::data::Dataset;
use eggflow::nn::optim::OptConfig;
use eggflow::score::{
    train_energy_match, train_score_dsm, EnergyModel, NoiseSchedule, ScoreModel, TrainCfg,
};

fn main() {
    let dim = 2;
    let ds = Dataset::from_rows(vec![0.0; dim], 1, dim).expect("single origin point");
    let schedule = NoiseSchedule { sigmas: vec![1.0] };

    let mut score = ScoreModel::new(dim, 48, 3, 16, schedule.clone(), false, 7);
    let opt = OptConfig {
        learning_rate: 2e-3,
        ema_decay: 0.99,
        ..OptConfig::default()
    };
    let cfg = TrainCfg {
        steps: 1500,
        batch_size: 128,
        opt,
        seed: 11,
        stage: "score".into(),
    };
    let (trace, score_ema) = train_score_dsm(&mut score, &ds, 1.0, &cfg).expect("score training");
    let score_ema = score.with_net(score_ema);
    println!(
        "score trained: {} steps, loss {:.4} -> {:.4}",
        trace.len(),
        trace.first().unwrap(),
        trace.last().unwrap()
    );

    let mut energy = EnergyModel::new(dim, 48, 3, 16, schedule, false, 8);
    let ecfg = TrainCfg {
        steps: 1500,
        batch_size: 128,
        opt,
        seed: 12,
        stage: "energy".into(),
    };
    let (etrace, energy_ema) = train_energy_match(&mut energy, &score_ema, &ds, &ecfg).expect("energy training");
    let energy_ema = energy.with_net(energy_ema);
    println!(
        "energy distilled: {} steps, loss {:.4} -> {:.4}",
        etrace.len(),
        etrace.first().unwrap(),
        etrace.last().unwrap()
    );

    println!("\n radius | score radial (true -r) | energy (true r^2/2)");
    let mut worst_score = 0.0f64;
    let mut worst_energy = 0.0f64;
    for k in 1..=8 {
        let r = 0.25 * k as f64;
        let angle = 0.7 + 0.4 * k as f64;
        let y = [r * angle.cos(), r * angle.sin()];
        let s = score_ema.score(&y, 1.0, None);
        let radial = (s[0] * y[0] + s[1] * y[1]) / r;
        let e = energy_ema.energy_at(&y, 1.0, None);
        let true_e = r * r / 2.0;
        println!("  {r:5.2} | {radial:8.3} (want {:6.3}) | {e:8.3} (want {true_e:6.3})", -r);
        worst_score = worst_score.max((radial + r).abs() / r);
        worst_energy = worst_energy.max((e - true_e).abs() / true_e.max(1e-9));
    }
    println!("\nworst relative score error:  {worst_score:.3}");
    println!("worst relative energy error: {worst_energy:.3}");
}
