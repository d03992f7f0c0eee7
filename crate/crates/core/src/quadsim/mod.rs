//! Quadrotor rotational dynamics with propeller faults, first-order motors,
//! sensor noise and the unbalanced-ratio motor model.

mod controller;
mod dynamics;
mod episode;
mod params;
mod unbalance;

pub use controller::{controller_update, mix, Controller, ControllerGains};
pub use dynamics::{angular_accel, angular_dynamics, rotor_forces, rotor_torque, step, QuadState, MAX_DT};
pub use episode::{fly_episode, hover_spec, EpisodeSpec, FlightLog, FlightPlan, DIVERGENCE_RATE};
pub use params::{
    Domain, DomainConfig, FaultSpec, QuadParams, DEFAULT_FAULT_EFF, GRAVITY, NUM_CLASSES,
};
pub use unbalance::{
    adjust_all, adjust_speed, estimate_unbalance, UnbalanceModel, MIN_CALIBRATION_SAMPLES,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
    #[error("invalid fault spec: {0}")]
    InvalidFault(String),
    #[error("invalid domain config: {0}")]
    InvalidDomain(String),
    #[error("invalid unbalance model: {0}")]
    InvalidUnbalance(String),
    #[error("input outside domain: {0}")]
    InputDomain(String),
    #[error("invalid integration step: {0}")]
    InvalidStep(String),
    #[error("invalid vehicle state: {0}")]
    InvalidState(String),
    #[error("invalid flight plan: {0}")]
    InvalidPlan(String),
    #[error("invalid flight log: {0}")]
    InvalidLog(String),
    #[error("degenerate calibration log: {0}")]
    DegenerateLog(String),
    #[error("episode diverged at step {step}: {reason}")]
    EpisodeDiverged { step: usize, reason: String },
}
