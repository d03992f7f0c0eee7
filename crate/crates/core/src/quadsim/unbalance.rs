//! Unbalanced-ratio model of real motors.
//!
//! A motor whose steady-state speed runs higher than motor 1 is modelled as
//! weaker: to spin at the speed `w` that the dynamics need, it has to be
//! commanded `adjust_speed(w)`. The ratio at a given speed is interpolated
//! linearly from zero up to `rho_i` at `omega_ref_max`.

use serde::{Deserialize, Serialize};

use super::episode::FlightLog;
use super::SimError;

/// Minimum steady-state samples accepted by [`estimate_unbalance`].
pub const MIN_CALIBRATION_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnbalanceModel {
    pub rho: [f64; 4],
    pub omega_ref_max: f64,
}

impl UnbalanceModel {
    /// Builds a model, normalising nothing: `rho[0]` must already be 1.
    pub fn new(rho: [f64; 4], omega_ref_max: f64) -> Result<Self, SimError> {
        let m = Self { rho, omega_ref_max };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(omega_ref_max: f64) -> Self {
        Self {
            rho: [1.0; 4],
            omega_ref_max,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.rho[0] != 1.0 {
            return Err(SimError::InvalidUnbalance(format!(
                "rho_1 must be exactly 1, got {}",
                self.rho[0]
            )));
        }
        if self.rho.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(SimError::InvalidUnbalance(format!(
                "all ratios must be > 0, got {:?}",
                self.rho
            )));
        }
        if !(self.omega_ref_max.is_finite() && self.omega_ref_max > 0.0) {
            return Err(SimError::InvalidUnbalance(format!(
                "omega_ref_max must be > 0, got {}",
                self.omega_ref_max
            )));
        }
        Ok(())
    }

    /// Speed-dependent ratio `rho_i(w) = w / omega_ref_max * rho_i`.
    /// `rotor` is 1-based.
    pub fn ratio_at(&self, omega: f64, rotor: usize) -> Result<f64, SimError> {
        if !(1..=4).contains(&rotor) {
            return Err(SimError::InvalidUnbalance(format!("rotor index {rotor} outside 1..=4")));
        }
        if !(self.omega_ref_max > 0.0) {
            return Err(SimError::InvalidUnbalance("omega_ref_max is zero".into()));
        }
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(SimError::InputDomain(format!("rotor speed {omega} must be finite and >= 0")));
        }
        Ok(omega / self.omega_ref_max * self.rho[rotor - 1])
    }
}

/// Adjusted rotational speed `rho_i(w) * w` for 1-based rotor `rotor`.
pub fn adjust_speed(omega: f64, rotor: usize, model: &UnbalanceModel) -> Result<f64, SimError> {
    Ok(model.ratio_at(omega, rotor)? * omega)
}

/// Applies [`adjust_speed`] to all four rotors.
pub fn adjust_all(omega: &[f64; 4], model: &UnbalanceModel) -> Result<[f64; 4], SimError> {
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        *o = adjust_speed(omega[i], i + 1, model)?;
    }
    Ok(out)
}

/// Estimates per-motor unbalanced ratios from a healthy steady-state log.
///
/// The caller is responsible for trimming take-off and other transients.
pub fn estimate_unbalance(log: &FlightLog) -> Result<UnbalanceModel, SimError> {
    let n = log.omega_cmd.len();
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(SimError::DegenerateLog(format!(
            "need at least {MIN_CALIBRATION_SAMPLES} samples, got {n}"
        )));
    }
    let mut sums = [0.0f64; 4];
    let mut max = 0.0f64;
    for w in &log.omega_cmd {
        for i in 0..4 {
            sums[i] += w[i];
            max = max.max(w[i]);
        }
    }
    let means = sums.map(|s| s / n as f64);
    if !(means[0] > 0.0) {
        return Err(SimError::DegenerateLog("mean speed of motor 1 is zero".into()));
    }
    let mut rho = [1.0; 4];
    for i in 1..4 {
        rho[i] = means[i] / means[0];
    }
    UnbalanceModel::new(rho, max)
}
