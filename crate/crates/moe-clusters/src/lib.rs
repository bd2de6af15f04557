//! Desk-scale mixture-of-experts routing lab.
//!
//! This crate implements sparse top-1 expert routing together with the two
//! regularizers that make expert *clusters* form and stay healthy:
//!
//! * a load-balancing loss that spreads tokens across experts,
//! * a clustering loss that pulls the routing probabilities of experts in the
//!   same cluster together (variance inside clusters) while optionally keeping
//!   distinct clusters apart (gap between the two largest cluster means),
//! * cluster-level expert dropout, which drops a fixed fraction of experts in
//!   every cluster each step so tokens rotate among cluster members instead of
//!   sticking to a single expert.
//!
//! Everything runs on a small hand-rolled reverse-mode tape ([`numerics`]) in
//! `f64`, with deterministic seeded runs end to end. The [`simulator`] trains
//! the routing layer on synthetic clustered token data, and the `moe-clusters`
//! binary exposes training, sweeps, gradient checks, and oracle validations as
//! CSV-emitting subcommands.
//!
//! Module map:
//!
//! * [`numerics`] — tensors, the autodiff tape, finite-difference checking
//! * [`gating`] — routing scores, softmax/sigmoid gates, top-k selection
//! * [`losses`] — balance loss, clustering loss, task losses, routing stats
//! * [`dropout`] — cluster-level / global expert masks
//! * [`dispatch`] — capacity-limited top-1 token-to-expert assignment
//! * [`model`] — expert FFNs, the routed layer, checkpointing
//! * [`simulator`] — synthetic data, the trainer, hyperparameter sweeps
//! * [`config`] — TOML experiment configs with validation and presets
//! * [`cli`] — the `moe-clusters` command-line entry points

pub mod cli;
pub mod config;
pub mod dispatch;
pub mod dropout;
pub mod error;
pub mod gating;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod simulator;

pub use error::{Error, Result};
