//! Deterministic cross-level deployment planner and fleet simulator for
//! deep-learning computation graphs.
//!
//! The crate is organized around a small intermediate representation
//! ([`ir::ComputationGraph`]) over which every other subsystem operates:
//!
//! * [`variants`] — elastic compression operators and the accuracy proxy
//! * [`offload`] — pre-partitioning, redundancy elimination, and
//!   cross-device assignment search
//! * [`passes`] — backend planning passes (fusion, parallel scheduling,
//!   lifetime memory allocation, training-memory planning)
//! * [`cost`] — layer-wise energy/latency models and plan-level estimates
//! * [`adapt`] — Pareto-front construction and the online adaptation loop
//! * [`pipeline`] — the end-to-end plan builder gluing the above together
//! * [`scenario`] — scenario bundles with machine-checkable manifests

pub mod adapt;
pub mod cost;
pub mod error;
pub mod ir;
pub mod offload;
pub mod passes;
pub mod pipeline;
pub mod scenario;
pub mod variants;

pub use error::{Error, Result};
