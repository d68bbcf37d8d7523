//! Self-supervised pre-training for multi-entity spatiotemporal event streams.

pub mod numkernel;
pub mod schema;
pub mod synthgen;
pub mod perturb;
pub mod cooc;
pub mod featencode;
pub mod backbone;
pub mod objectives;
pub mod model;
pub mod train;
pub mod eval;
pub mod config;
pub mod pipeline;
