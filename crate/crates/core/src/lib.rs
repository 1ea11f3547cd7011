//! Pipelined hyperdimensional computing inference for multi-core CPUs.
//!
//! Inference computes `H = hardsign(X·B)`, `S = H·J` and a row-wise arg-max.
//! [`pipeline::Engine`] splits this into two worker stages connected by
//! bounded lock-free queues, over blocked matrix layouts from [`tiling`] and
//! with optional NUMA-aware pinning from [`affinity`]. [`hdc::reference_forward`]
//! is the single-threaded oracle everything else is checked against.

pub mod affinity;
pub mod bench;
pub mod compare;
pub mod error;
pub mod hdc;
pub mod matrix;
pub mod model_io;
pub mod pipeline;
pub mod queue;
pub mod tiling;

pub use error::{HdError, Result};
pub use hdc::{Batch, BipolarVector, Model, RealVector};
pub use matrix::Matrix;
pub use pipeline::{Engine, PipelineConfig, TileSizes, Variant};
