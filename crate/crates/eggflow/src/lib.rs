//! Energy-guided geodesic flow matching.
//!
//! The pipeline learns the shape of a point-cloud data manifold from
//! denoising score matching and energy distillation, refines the learned
//! density with self-normalized importance sampling (optionally stratified
//! by cluster), turns the energy into a conformal metric tensor, and then
//! trains geodesics, an isometric distance embedding, an optimal-transport
//! coupling, and a flow-matching vector field under that metric.
//!
//! Entry points:
//! - [`nn`]: the f64 network substrate (forward, exact reverse-mode
//!   gradients, dual/tangent passes, Adam+EMA, checkpoints).
//! - [`data`]: dataset ingestion, PCA whitening, synthetic spheres,
//!   clustering, weighted sampling.
//! - [`score`]: tempered denoising score matching and energy distillation.
//! - [`refine`]: SNIS reweighting, density annealing, stratified training.
//! - [`geometry`]: the energy-induced metric and geodesic training.
//! - [`transport`]: distance embedding, OT couplings, flow matching, ODE
//!   integration, timepoint schedules.
//! - [`eval`]: geodesic error on spheres, exact Wasserstein-1, energy grids.
//! - [`pipeline`]: staged orchestration used by the `eggflow` binary.
//!
//! The `examples/` directory has one runnable example per capability; see
//! the README for the list.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod score;
pub mod transport;

pub use error::{Error, Result};
