//! Loss-spike stabilization lab.
//!
//! Stochastic gradient descent can be destabilized by occasional very high
//! losses ("loss spikes"), especially with small batches or high-order loss
//! functions. This crate packages, on top of a minimal define-by-run
//! reverse-mode autodiff engine:
//!
//! * **ALRC** (adaptive learning rate clipping): rescales the backpropagated
//!   loss by a stop-gradient factor `L_max/L` whenever the loss exceeds a
//!   running-statistics threshold, limiting parameter perturbations without
//!   changing gradient direction ([`stabilize`]).
//! * **Baseline stabilizers**: huberization and global-norm / per-layer-norm /
//!   value gradient clipping ([`stabilize`]).
//! * A small **layer kit** and a residual 2x image supersampling network
//!   ([`nn`]), SGD/Adam with piecewise schedules ([`optim`]), and a synthetic
//!   or CIFAR-10-binary image pipeline ([`data`]).
//! * An **experiment harness** that runs seeded trials over policy grids,
//!   records unclipped learning curves, and emits CSV summaries and plots
//!   ([`experiment`]).
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! and the `alrc-lab` binary for the `run` / `grid` / `report` commands.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
pub mod stabilize;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Value};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
