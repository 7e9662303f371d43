//! Text-encoder-free open-vocabulary detection at desk scale.
//!
//! The crate trains a toy DETR-style detector on synthetic scenes while a
//! hierarchical prototype pool, distilled from a deterministic stand-in
//! teacher, carries the open-vocabulary semantics. Localization and semantic
//! alignment are optimized as two gradient-isolated streams over a disjoint
//! DET/SEM parameter partition, so novel categories stay reachable at
//! inference without any teacher in the loop.
//!
//! Start from the runnable programs in `examples/`, or from the `protodet`
//! binary (`build-pool`, `train`, `eval`, `inspect-pool`, `gradcheck`).

pub mod boxes;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod hungarian;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod semantic;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
