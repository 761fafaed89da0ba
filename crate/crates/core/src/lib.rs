//! Inference and learning for discrete pairwise Markov random fields.
//!
//! The crate covers the full loop from model generation to evaluation:
//!
//! * [`model`] — Ising-style pairwise models, factor graphs, file formats;
//! * [`exact`] — brute-force partition function, marginals, and samplers,
//!   used as the ground-truth oracle everywhere else;
//! * [`regiongraph`] — region graphs: cycle-basis roots, cluster-variation
//!   construction, counting numbers, and the region-based free energy;
//! * [`classic`] — mean field and (damped) loopy belief propagation;
//! * [`gbp`] — generalized belief propagation with parent-to-child messages;
//! * [`renn`] — direct minimization of the region free energy with a small
//!   trainable network producing the beliefs;
//! * [`learn`] — maximum-likelihood fitting of model parameters with an
//!   inference backend supplying the partition-function term;
//! * [`tensor`] — the reverse-mode autodiff engine behind [`renn`];
//! * [`harness`] — metrics, benchmark sweeps, and CSV reporting.

pub mod classic;
pub mod error;
pub mod exact;
pub mod gbp;
pub mod harness;
pub mod learn;
pub mod model;
pub mod regiongraph;
pub mod renn;
pub mod tensor;

pub use error::{Error, Result};
