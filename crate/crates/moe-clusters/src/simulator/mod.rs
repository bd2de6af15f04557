//! Synthetic-data experiments: data generation, the training loop, parameter
//! sweeps, and the end-to-end gradient report.
//!
//! The pieces compose bottom-up: [`synthetic`] builds clustered toy tasks
//! whose group structure the router can discover; [`trainer`] runs the
//! full optimization loop (forward, losses, reverse pass, Adam) with
//! per-step expert dropout and deterministic seeding; [`sweep`] repeats
//! training across one varied dimension with everything else pinned; and
//! [`gradreport`] re-derives every analytic gradient with finite
//! differences as a self-diagnostic.

pub mod gradreport;
pub mod sweep;
pub mod synthetic;
pub mod trainer;
