use serde::{Deserialize, Serialize};

use super::unbalance::UnbalanceModel;
use super::SimError;

pub const GRAVITY: f64 = 9.81;

/// Physical constants of the airframe. Body frame is x forward, y left,
/// z up. Rotor 1 sits on +x, rotor 2 on -x, rotor 3 on +y, rotor 4 on -y,
/// so roll torque is `L (F3 - F4)` and pitch torque is `L (F2 - F1)`.
/// Rotors 1 and 2 react with positive yaw torque, 3 and 4 with negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    /// Diagonal of the inertia matrix (Ixx, Iyy, Izz), kg·m².
    pub inertia_diag: [f64; 3],
    /// Rotor arm length, m.
    pub arm_length: f64,
    /// Thrust coefficient, N·s²/rad².
    pub k_f: f64,
    /// Drag-torque coefficient, N·m·s²/rad².
    pub k_tau: f64,
    pub mass: f64,
    /// First-order motor gain, 1/s.
    pub k_m: f64,
    /// Rotor speed ceiling, rad/s.
    pub omega_max: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            inertia_diag: [0.0125, 0.0135, 0.0230],
            arm_length: 0.2,
            k_f: 1.0e-5,
            k_tau: 1.6e-7,
            mass: 1.2,
            k_m: 20.0,
            omega_max: 900.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("inertia_diag[0]", self.inertia_diag[0]),
            ("inertia_diag[1]", self.inertia_diag[1]),
            ("inertia_diag[2]", self.inertia_diag[2]),
            ("arm_length", self.arm_length),
            ("k_f", self.k_f),
            ("k_tau", self.k_tau),
            ("mass", self.mass),
            ("k_m", self.k_m),
            ("omega_max", self.omega_max),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Rotor speed at which four healthy rotors carry the weight.
    pub fn hover_speed(&self) -> f64 {
        (self.mass * GRAVITY / (4.0 * self.k_f)).sqrt()
    }
}

/// Source (simulation) or target (flight, here pseudo-reality) domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}` (expected source|target)")),
        }
    }
}

pub const NUM_CLASSES: usize = 5;

/// Which propeller (if any) is broken and how badly.
///
/// Label 1 is all-healthy; label `k + 1` means rotor `k` is degraded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    label: u8,
    faulty_rotor: Option<usize>,
    thrust_eff: f64,
    torque_eff: f64,
}

/// Default efficiency of a broken propeller.
pub const DEFAULT_FAULT_EFF: f64 = 0.85;

impl FaultSpec {
    pub fn healthy() -> Self {
        Self {
            label: 1,
            faulty_rotor: None,
            thrust_eff: 1.0,
            torque_eff: 1.0,
        }
    }

    pub fn from_label(label: u8) -> Result<Self, SimError> {
        Self::with_efficiency(label, DEFAULT_FAULT_EFF, DEFAULT_FAULT_EFF)
    }

    pub fn with_efficiency(label: u8, thrust_eff: f64, torque_eff: f64) -> Result<Self, SimError> {
        if !(1..=5).contains(&label) {
            return Err(SimError::InvalidFault(format!("label {label} outside 1..=5")));
        }
        if label == 1 {
            return Ok(Self::healthy());
        }
        for (name, v) in [("thrust_eff", thrust_eff), ("torque_eff", torque_eff)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SimError::InvalidFault(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(Self {
            label,
            faulty_rotor: Some(label as usize - 1),
            thrust_eff,
            torque_eff,
        })
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// 1-based index of the broken rotor.
    pub fn faulty_rotor(&self) -> Option<usize> {
        self.faulty_rotor
    }

    /// Per-rotor (thrust, torque) efficiencies, 1.0 for healthy rotors.
    pub fn efficiencies(&self) -> ([f64; 4], [f64; 4]) {
        let mut ef = [1.0; 4];
        let mut et = [1.0; 4];
        if let Some(k) = self.faulty_rotor {
            ef[k - 1] = self.thrust_eff;
            et[k - 1] = self.torque_eff;
        }
        (ef, et)
    }
}

/// Everything that distinguishes one flight environment from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub gyro_noise_std: f64,
    /// Centre-of-gravity offset (x, y) in the body frame, m.
    pub cog_offset: [f64; 2],
    /// Per-rotor multiplier on `k_m`.
    pub motor_gain_scale: [f64; 4],
    /// Treat motors as ideal (`k_m -> inf`): rotor speed equals command.
    pub perfect_motor: bool,
    pub unbalance: Option<UnbalanceModel>,
    pub seed: u64,
}

impl DomainConfig {
    /// Ideal simulator: no noise, no offsets, ideal motors.
    pub fn ideal(seed: u64) -> Self {
        Self {
            gyro_noise_std: 0.0,
            cog_offset: [0.0, 0.0],
            motor_gain_scale: [1.0; 4],
            perfect_motor: true,
            unbalance: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.gyro_noise_std.is_finite() && self.gyro_noise_std >= 0.0) {
            return Err(SimError::InvalidDomain(format!(
                "gyro_noise_std must be >= 0, got {}",
                self.gyro_noise_std
            )));
        }
        if self.cog_offset.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidDomain("cog_offset must be finite".into()));
        }
        if self.motor_gain_scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(SimError::InvalidDomain(
                "motor_gain_scale entries must be > 0".into(),
            ));
        }
        if let Some(u) = &self.unbalance {
            u.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rotor_mapping_follows_table() {
        assert_eq!(FaultSpec::from_label(1).unwrap().faulty_rotor(), None);
        for k in 1..=4usize {
            let f = FaultSpec::from_label(k as u8 + 1).unwrap();
            assert_eq!(f.faulty_rotor(), Some(k));
            let (ef, _) = f.efficiencies();
            for (i, e) in ef.iter().enumerate() {
                if i + 1 == k {
                    assert_eq!(*e, DEFAULT_FAULT_EFF);
                } else {
                    assert_eq!(*e, 1.0);
                }
            }
        }
        assert!(FaultSpec::from_label(0).is_err());
        assert!(FaultSpec::from_label(6).is_err());
        assert!(FaultSpec::with_efficiency(2, 0.0, 0.9).is_err());
        assert!(FaultSpec::with_efficiency(2, 1.2, 0.9).is_err());
    }

    #[test]
    fn healthy_label_ignores_efficiency() {
        let f = FaultSpec::with_efficiency(1, 0.5, 0.5).unwrap();
        assert_eq!(f, FaultSpec::healthy());
    }

    #[test]
    fn params_validation() {
        assert!(QuadParams::default().validate().is_ok());
        let mut p = QuadParams::default();
        p.k_f = 0.0;
        assert!(p.validate().is_err());
        p = QuadParams::default();
        p.inertia_diag[2] = -1.0;
        assert!(p.validate().is_err());
    }
}
