//! Sparsification plus selective recomputation for multi-context KV caches.
//!
//! Documents retrieved for one request are prefilled independently, so their
//! caches lack cross-document attention. This crate retains each document's
//! initial/local blocks plus a query-personalized selection of its middle
//! blocks, then recomputes a small token subset over the concatenated sparse
//! cache to restore the missing interactions. A deterministic attention-only
//! transformer ([`model`], [`engine`]) serves as the reference model, and a
//! full-recomputation baseline is kept alongside every run for quality
//! tracking.
//!
//! Module map:
//! * [`model`] / [`engine`] — toy transformer weights and forward passes.
//! * [`kv`] — block partitioning, roles, composites, cache files.
//! * [`query`] — generic and personalized query vectors.
//! * [`analysis`] — power-law block attributes, outlier rules, stable layers.
//! * [`selection`] — per-layer/top-P block retention and the cross-context
//!   filter.
//! * [`recompute`] — schedules, padding alignment, overwrite/fusion updates.
//! * [`corpus`] / [`pipeline`] — synthetic corpora and end-to-end runs.

pub mod analysis;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod kv;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod recompute;
pub mod selection;

pub use error::{Error, Result};
