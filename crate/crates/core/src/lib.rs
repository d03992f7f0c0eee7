//! Simulation-to-reality propeller fault diagnosis for quadrotors.
//!
//! * [`quadsim`] flies faulty and healthy vehicles in a source simulator and
//!   in a perturbed "pseudo-reality" target simulator.
//! * [`features`] cuts flight logs into NIF (angular acceleration plus
//!   squared rotor speed) or CF (attitude, rates, rotor speed) windows.
//! * [`dataset`] generates, stores and batches labelled windows.
//! * [`nn`] is a small 1-D CNN with hand-written backward passes, Adam and
//!   finite-difference gradient checking.
//! * [`pipeline`] trains with cross-entropy plus an MMD penalty on healthy
//!   windows of both domains and runs the comparison experiments.

pub mod config;
pub mod container;
pub mod dataset;
pub mod exec;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod quadsim;
pub mod seed;

pub use exec::Exec;
