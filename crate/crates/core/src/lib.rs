//! Desk-scale laboratory for masked diffusion language models with
//! fast-weight parametric memory.
//!
//! The crate hosts a small dense-tensor autodiff engine, a tiny
//! bidirectional transformer with detachable low-rank fast weights, the
//! absorbing-state forward process and confidence-based sampler, the
//! bi-level trainer with its ablation surface, exposure-bias and retrieval
//! probes, synthetic long-context task generators, inference-time prompt
//! adaptation, and the run-configuration plumbing shared with the CLI.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod gradcheck;
pub mod inferadapt;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod rng;
pub mod tape;
pub mod taskgen;
pub mod trainer;

pub use tape::{Tape, Tensor, TensorError};

/// Cap the worker thread pool (honored by batch-parallel sections). The
/// first call in a process wins; later calls are ignored.
pub fn set_worker_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}
