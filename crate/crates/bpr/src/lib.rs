//! Desk-scale offline reinforcement learning built around behavior
//! preference regression: a paired-sample policy objective that regresses
//! log-density differences of the learned policy onto energy differences
//! of an implicit behavior model, with value terms from one of three
//! critic regimes. No partition function is ever computed — all consumers
//! of the energy model and critics are invariant to state-dependent
//! constant shifts, and the test suites verify that cancellation.
//!
//! The crate ships:
//! - [`nn`]: a minimal dense-network substrate with exact reverse-mode
//!   gradients, layer/spectral normalization, and a decoupled-weight-decay
//!   optimizer;
//! - [`envs`]: synthetic tasks (a 1-D bimodal bandit, a point-mass box
//!   with dense and sparse-stitching variants, finite tabular MDPs);
//! - [`dataset`]: offline transition storage, binary persistence,
//!   normalization, and seeded batch sampling;
//! - [`ebm`]: the energy-based behavior model trained with InfoNCE;
//! - [`critic`]: entropy-regularized off-policy, on-policy (SARSA), and
//!   independent-ensemble lower-confidence-bound value learning;
//! - [`policy`]: the tanh-Gaussian actor and the paired regression loss;
//! - [`trainer`]: full training pipelines, evaluation, a behavioral
//!   cloning comparator, and the λ-ablation sweep;
//! - [`oracle`]: exact tabular machinery that machine-checks the
//!   performance-difference identity, implicit-Q preferences, and the
//!   noisy-preference bound;
//! - [`cli`]: the `bpr` command-line entry point.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod error;
pub mod cli;
pub mod config;
pub mod critic;
pub mod dataset;
pub mod ebm;
pub mod envs;
pub mod nn;
pub mod oracle;
pub mod plot;
pub mod policy;
pub mod trainer;

pub use error::{BprError, Result};
