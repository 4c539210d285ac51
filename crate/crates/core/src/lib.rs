//! Convergence analysis of neural-architecture cells.
//!
//! - [`graph`]: cell DAGs, NAS-Bench-201 strings, a TOML graph format, path
//!   enumeration.
//! - [`metrics`]: effective depth / width and the center-radius filter.
//! - [`nngp`]: ReLU NNGP kernel propagation and least-eigenvalue bounds.
//! - [`stats`]: benchmark CSV ingestion, binning, multiple correlation.
//! - [`sim`]: a small fully-connected simulator that trains cells with SGD.

pub mod graph;
pub mod metrics;
pub mod nngp;
pub mod sim;
pub mod stats;
