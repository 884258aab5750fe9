//! Exemplar-free class-incremental learning at desk scale.
//!
//! The crate trains a frozen backbone with per-task low-rank adapters on a
//! stream of tasks with disjoint label spaces. Before each new task the
//! cumulative adapter weights are subtracted from the pretrained weights, the
//! new task's data is pushed through that subtracted model, and the top
//! principal directions of the per-layer input covariance define a
//! drift-resistant subspace; gradient updates for the new task are projected
//! into it. A triplet loss whose negative pool includes stored class
//! prototypes restores plasticity. Accuracy matrices, backward transfer and
//! feature-drift curves quantify the effect.

pub mod config;
pub mod data;
pub mod drs;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::SeededRng;
