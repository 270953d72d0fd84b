//! Desk-scale simulator for transductive federated learning.
//!
//! Clients train small MLPs on Non-IID shards of a labeled dataset while the
//! server holds the unlabeled pool it must eventually label. Three server
//! strategies are available: plain parameter averaging (`fedavg`), AvgLogi
//! ensemble distillation on the pool (`feddf`) and the model refinery
//! (`mrtf`) built from normalized teachers, rectified per-sample teacher
//! weights and a clustering pass in feature space.

pub mod data;
pub mod demo;
pub mod diagnostics;
pub mod error;
pub mod fedcore;
pub mod idx;
pub mod matrix;
pub mod nn;
pub mod refinery;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
pub use matrix::{LogitsMatrix, Matrix, ProbMatrix};
