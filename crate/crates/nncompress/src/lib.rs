//! Neural-network compression toolkit.
//!
//! Three compression passes — gradual magnitude pruning, SVD low-rank
//! factorization of convolution kernels, and knowledge distillation — built as
//! composable transforms over a small self-contained `f64` training engine,
//! plus an experiment harness that measures compression rate, accuracy, and
//! inference time and emits plot-ready JSON reports.
//!
//! Module map:
//! - [`tensor`]: dense tensors, deterministic RNG, matmul/transpose/SVD.
//! - [`nn`]: layers, forward/backward, SGD training loop, losses, and the
//!   reference teacher/student architectures.
//! - [`prune`]: magnitude pruning with persistent masks and the cubic
//!   gradual-sparsity schedule.
//! - [`lowrank`]: kernel matricization and rewriting of conv layers into
//!   rank-constrained vertical/horizontal pairs.
//! - [`distill`]: temperature-softened targets and the mixed distillation
//!   loss.
//! - [`harness`]: datasets, model serialization, compression accounting, the
//!   pipeline runner, and report emission.

pub mod distill;
pub mod error;
pub mod harness;
pub mod lowrank;
pub mod nn;
pub mod prune;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
