//! Grid-aware peer-to-peer energy trading among microgrids.
//!
//! The crate covers the full pipeline: a pooled-price Nash market among
//! microgrid agents, the distribution operator's SOCP branch-flow OPF that
//! corrects proposed trades, a transformer-encoder surrogate trained to
//! predict those corrections, and the three-case study that compares a
//! grid-unaware market, an iterative market/operator loop, and a market with
//! the surrogate embedded in every agent's objective.

pub mod config;
pub mod dopf;
pub mod harness;
pub mod market;
pub mod metrics;
pub mod microgrid;
pub mod network;
pub mod powerflow;
pub mod scenario;
pub mod surrogate;
