//! Thin command-line front end; all work happens in the library. Exit
//! codes: 0 ok, 2 config error, 3 missing prerequisite, 4 numeric
//! divergence, 5 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eggflow::config::RunConfig;
use eggflow::pipeline;
use eggflow::Error;

/// Energy-guided geodesic flow matching.
#[derive(Parser)]
#[command(name = "eggflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a uniform sphere dataset file.
    GenSphere {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Split the points into two equal timepoints.
        #[arg(long, default_value_t = false)]
        two_timepoints: bool,
    },
    /// Train one pipeline stage (or all of them in order).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all")]
        stage: String,
        /// Hold out one timepoint; redirects outputs to out_dir/holdout_T.
        #[arg(long)]
        holdout: Option<i64>,
        /// Override config values, e.g. --set seed=3 --set hidden_dim=64.
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Evaluate trained models.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// ave | w1 | both
        #[arg(long, default_value = "both")]
        metric: String,
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Export an energy/metric grid over a coordinate plane.
    ExportGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        axis_i: usize,
        #[arg(long, default_value_t = 1)]
        axis_j: usize,
        #[arg(long, default_value_t = -2.0)]
        lo: f64,
        #[arg(long, default_value_t = 2.0)]
        hi: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = false)]
        svg: bool,
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Integrate trajectories between two timepoints and dump them as CSV.
    Interpolate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: i64,
        #[arg(long)]
        to: i64,
        #[arg(long, default_value_t = 100)]
        n_steps: usize,
        #[arg(long, default_value_t = 64)]
        n_traj: usize,
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(format!("expected key=value, got `{s}`")),
    }
}

/// Load a config, apply --set overrides, and resolve out_dir against the
/// EGGFLOW_OUT environment variable when it is set.
fn load_config(path: &PathBuf, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?.with_overrides(overrides)?;
    if let Ok(root) = std::env::var("EGGFLOW_OUT") {
        if cfg.out_dir.is_relative() {
            cfg.out_dir = PathBuf::from(root).join(&cfg.out_dir);
        }
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSphere {
            dim,
            n,
            seed,
            out,
            two_timepoints,
        } => pipeline::run_gen_sphere(dim, n, seed, &out, two_timepoints),
        Command::Train {
            config,
            stage,
            holdout,
            set,
        } => {
            let mut cfg = load_config(&config, &set)?;
            if let Some(h) = holdout {
                cfg.holdout_timepoint = Some(h);
                cfg.out_dir = cfg.out_dir.join(format!("holdout_{h}"));
            }
            let stage: pipeline::Stage = stage.parse()?;
            pipeline::run_train(&cfg, stage)
        }
        Command::Eval { config, metric, set } => {
            let cfg = load_config(&config, &set)?;
            match metric.as_str() {
                "ave" => {
                    pipeline::run_eval_ave(&cfg)?;
                    Ok(())
                }
                "w1" => {
                    pipeline::run_eval_w1(&cfg)?;
                    Ok(())
                }
                "both" => {
                    let ave = pipeline::run_eval_ave(&cfg);
                    let w1 = pipeline::run_eval_w1(&cfg);
                    match (ave, w1) {
                        (Err(a), Err(_)) => Err(a),
                        _ => Ok(()),
                    }
                }
                other => Err(Error::Config(format!("unknown metric `{other}` (expected ave|w1|both)"))),
            }
        }
        Command::ExportGrid {
            config,
            axis_i,
            axis_j,
            lo,
            hi,
            resolution,
            svg,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            pipeline::run_export_grid(&cfg, axis_i, axis_j, lo, hi, resolution, svg).map(|_| ())
        }
        Command::Interpolate {
            config,
            from,
            to,
            n_steps,
            n_traj,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            pipeline::run_interpolate(&cfg, from, to, n_steps, n_traj).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
