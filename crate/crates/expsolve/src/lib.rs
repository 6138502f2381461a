//! Closed-form ("explicit") solutions for softmax-activated single-layer
//! networks, the iterative Adagrad baseline they are compared against, and
//! the data pipelines for co-occurrence language modeling and digit
//! classification.
//!
//! A softmax layer over nonnegative features of 1-norm `K` is approximately
//! optimized in closed form by a column-wise translation of the
//! log-co-occurrence matrix:
//!
//! ```text
//! U[j, i] = ln F[j, i] − ((K − 1)/K) · ln Σ_d F[d, i]        F = HᵀY
//! ```
//!
//! Everything else in the crate exists to exercise that decoder: accumulate
//! `F` from sample streams, estimate `K` when feature norms vary, train the
//! same layer iteratively from cold or warm starts, extend the construction
//! layer-locally to two-layer stacks, and reproduce the language-modeling
//! and digit-classification experiments end to end.
//!
//! ```
//! use expsolve::{accumulate, explicit_solution, Sample};
//!
//! // a,b,a,b bigram stream with one-hot contexts
//! let stream = vec![
//!     Sample::new(vec![1.0, 0.0], 1),
//!     Sample::new(vec![0.0, 1.0], 0),
//!     Sample::new(vec![1.0, 0.0], 1),
//! ];
//! let f = accumulate(stream, (2, 2))?;
//! let decoder = explicit_solution(&f, 1.0, 1e-10)?;
//! // at K = 1 the decoder is exactly the log co-occurrence matrix
//! assert_eq!(decoder.values()[[0, 1]], 2.0f64.ln());
//! # Ok::<(), expsolve::Error>(())
//! ```

pub mod cooc;
pub mod engine;
mod error;
pub mod io;
pub mod lm;
pub mod mnist;
pub mod multilayer;
pub mod sample;
pub mod softmax;
pub mod solver;
pub mod train;

pub use cooc::{accumulate, CooccurrenceMatrix};
pub use engine::DenseEngine;
pub use error::{Error, Result};
pub use sample::{estimate_priming, Sample};
pub use softmax::{cross_entropy, forward, perplexity, CrossEntropy};
pub use solver::{
    default_floor, explicit_solution, explicit_solution_with, scaling_diagnostic, DecoderMatrix,
    EmptyColumns, ScalingRow, SolveOptions,
};
pub use train::{
    gradient, train, Adagrad, BatchRegime, EarlyStop, Engine, EpochRecord, EvalStats, Init,
    Metric, MonitorSplit, TrainConfig, TrainHistory,
};
