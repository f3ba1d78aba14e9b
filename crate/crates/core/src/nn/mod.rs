//! Differentiable-compute substrate: dense f32 tensors, a tape-based
//! reverse-mode graph, the two optimizers used by the training loop, and
//! finite-difference gradient verification.
//!
//! The engine is deliberately small: every operation the models need is one
//! enum variant with a hand-written backward rule. All buffers are 32-bit
//! floats; scalar reductions accumulate in f64. Optimizer steps and backward
//! passes mutate shared parameter cells and are single-threaded by contract;
//! the kernels below may fan work out over a fixed-size chunk grid, which
//! keeps results bit-identical for any thread count.

mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod param;
pub mod rng;
mod tensor;

pub use gradcheck::finite_difference_gradcheck;
pub use graph::{Graph, Var};
pub use optim::{adam_step, sgd_step, AdamState, SgdState};
pub use param::{param_count, param_count_all, Param, ParameterGroup};
pub use tensor::{LabelMap, Tensor};

use std::sync::OnceLock;

/// Shared compute pool. Sized by `ETM_NUM_THREADS` when set (min 1), else by
/// the machine. Work is split on a fixed chunk grid, so results do not depend
/// on the pool size.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("ETM_NUM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build compute pool")
    })
}

/// Errors raised by the compute substrate.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: invalid configuration: {reason}")]
    BadConfig { op: &'static str, reason: String },
    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error("parameter '{0}' has a non-finite gradient")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter group '{0}' is empty")]
    EmptyGroup(String),
    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u32, classes: usize },
    #[error("no valid pixels (all labels ignored)")]
    NoValidPixels,
}

pub type NnResult<T> = Result<T, NnError>;
