//! Inductive link prediction on bipartite user-item interaction graphs.
//!
//! The model runs a query-conditioned Bellman-Ford style message passing
//! from a user node, where every arc's message weight is derived from the
//! interaction's raw features. No parameter is tied to a specific node, so
//! a trained backbone applies to graphs with unseen users and items.

pub mod checkpoint;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod synth;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
