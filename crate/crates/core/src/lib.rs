//! Pool-based active learning benchmark over frozen embedding matrices.
//!
//! Datasets are precomputed embeddings ([`store`]). Each experiment picks an
//! initial labeled pool ([`ips`]), then runs a fixed number of cycles in which
//! a query strategy ([`query`]) buys a batch of labels and a linear probe
//! ([`probe`]) is refit from scratch. [`runner`] drives the loop and
//! [`analysis`] turns result tables into paired win-rate summaries.

pub mod analysis;
pub mod error;
pub mod grid;
pub mod ips;
pub mod kmeans;
pub mod lbfgs;
pub mod probe;
pub mod query;
pub mod runner;
pub mod seeding;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
