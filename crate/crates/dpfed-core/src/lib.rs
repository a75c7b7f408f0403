//! Desk-scale laboratory for differentially private federated learning under
//! gradient-leakage attacks.
//!
//! The crate simulates synchronous federated SGD with per-example or
//! per-client differential privacy, tracks every noise injection in an
//! append-only privacy ledger consumed by four composition accountants, and
//! mounts gradient-inversion attacks against three capture surfaces to score
//! resilience. Everything is deterministic under a single master seed.
//!
//! Module map:
//! - [`nn`]: dense networks, per-example gradients, double backprop for the
//!   gradient-matching loss.
//! - [`dp`]: clipping, l2-max sensitivity, Gaussian mechanism, noise-scale
//!   decay schedules.
//! - [`accountant`]: privacy ledger plus base / advanced / zCDP / moments
//!   composition and parallel combination.
//! - [`federation`]: client sampling, local training variants, aggregation,
//!   stop rules, capture instrumentation.
//! - [`attack`]: dummy-input reconstruction by gradient matching, campaigns.
//! - [`data`]: synthetic blobs, CSV and IDX ingestion, a deterministic
//!   digit-glyph corpus writer.
//! - [`config`]: TOML experiment configuration.
//! - [`report`]: CSV reports, ledgers on disk, checkpoints.
//! - [`seed`]: hierarchical seed derivation for independent random streams.

pub mod accountant;
pub mod attack;
pub mod config;
pub mod data;
pub mod dp;
pub mod federation;
pub mod nn;
pub mod report;
pub mod seed;
