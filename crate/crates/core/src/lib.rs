//! Contrastive learning over M modalities scored by a multilinear inner
//! product (MIP), with an optional candidate-conditioned gate that can
//! suppress misaligned modalities before scoring.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - a small reverse-mode autodiff engine over flat `f64`
//!   buffers, plus finite-difference gradient checking.
//! * [`mip`] - the multilinear inner product, normalized retrieval scores,
//!   and closed-form perturbation deltas with their Cauchy-Schwarz bounds.
//! * [`gate`] - the attention gate and its matrix-gate ablation, producing
//!   gated embeddings together with the effective interpolation factor beta.
//! * [`synthetic_xnor`] - the synthetic three-modality XNOR benchmark with
//!   controlled misalignment, including lossless export/import.
//! * [`encoders`] - per-modality MLP encoders with unit-norm outputs.
//! * [`objective`] - candidate sampling and the contrastive losses (pairwise
//!   CLIP-style baseline, MIP objective, gated MIP objective).
//! * [`trainer`] - AdamW with linear warmup, gradient clipping, checkpoint
//!   selection on validation accuracy.
//! * [`evaluation`] - top-1 retrieval, gate diagnostics, and the
//!   misalignment / batch-size sweeps.
//!
//! Parallel execution is provided by rayon behind the `parallel` feature
//! (enabled by default); without it every helper in [`parallel`] runs
//! sequentially with identical results. The environment variable
//! `GATED_MIP_THREADS` caps sweep-level parallelism.

pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gate;
pub mod linalg;
pub mod mip;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod synthetic_xnor;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Epsilon guarding every l2 normalization (rows divide by
/// `max(norm, NORM_EPS)`); shared so the graph and value paths agree.
pub const NORM_EPS: f64 = 1e-12;
