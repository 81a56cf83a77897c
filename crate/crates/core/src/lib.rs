//! Orthogonal low-rank adapters with Stiefel-manifold factors, a plain
//! low-rank baseline, and a synthetic retrieval benchmark to compare them.

pub mod adapters;
pub mod analysis;
pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod reparam;
