//! Cascaded position -> attitude -> body-rate controller with an inverted
//! rotor mixer. It stands in for an off-the-shelf autopilot: it only has to
//! fly the waypoint patterns steadily and compensate a weak rotor through
//! its integrators.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::dynamics::QuadState;
use super::params::{QuadParams, GRAVITY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    pub pos_kp: [f64; 3],
    pub pos_kd: [f64; 3],
    pub pos_ki: [f64; 3],
    /// Roll, pitch, yaw angle gains, 1/s.
    pub att_kp: [f64; 3],
    pub rate_kp: [f64; 3],
    pub rate_ki: [f64; 3],
    pub max_tilt: f64,
    pub max_accel_xy: f64,
    pub max_accel_z: f64,
    pub pos_int_limit: f64,
    pub rate_int_limit: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            pos_kp: [1.0, 1.0, 2.0],
            pos_kd: [1.8, 1.8, 2.5],
            pos_ki: [0.05, 0.05, 0.5],
            att_kp: [4.0, 4.0, 2.0],
            rate_kp: [10.0, 10.0, 5.0],
            rate_ki: [10.0, 10.0, 5.0],
            max_tilt: 0.35,
            max_accel_xy: 3.0,
            max_accel_z: 4.0,
            pos_int_limit: 2.0,
            rate_int_limit: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    gains: ControllerGains,
    pos_int: Vector3<f64>,
    rate_int: Vector3<f64>,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

impl Controller {
    pub fn new(gains: ControllerGains) -> Self {
        Self {
            gains,
            pos_int: Vector3::zeros(),
            rate_int: Vector3::zeros(),
        }
    }

    pub fn gains(&self) -> &ControllerGains {
        &self.gains
    }

    /// One control update; `dt` is the time since the previous update and
    /// feeds the integrators.
    pub fn update(
        &mut self,
        state: &QuadState,
        waypoint: &Vector3<f64>,
        params: &QuadParams,
        dt: f64,
    ) -> [f64; 4] {
        let g = &self.gains;
        let e_pos = waypoint - state.position;
        self.pos_int += e_pos * dt;
        let lim = g.pos_int_limit;
        self.pos_int = self.pos_int.map(|v| v.clamp(-lim, lim));

        let mut acc = Vector3::zeros();
        for k in 0..3 {
            acc[k] = g.pos_kp[k] * e_pos[k] - g.pos_kd[k] * state.velocity[k] + g.pos_ki[k] * self.pos_int[k];
        }
        let horiz = (acc.x * acc.x + acc.y * acc.y).sqrt();
        if horiz > g.max_accel_xy {
            let s = g.max_accel_xy / horiz;
            acc.x *= s;
            acc.y *= s;
        }
        acc.z = acc.z.clamp(-g.max_accel_z, g.max_accel_z);

        let (roll, pitch, yaw) = state.attitude.euler_angles();
        let (sy, cy) = yaw.sin_cos();
        let ax = cy * acc.x + sy * acc.y;
        let ay = -sy * acc.x + cy * acc.y;
        let vertical = GRAVITY + acc.z;
        let pitch_d = ax.atan2(vertical).clamp(-g.max_tilt, g.max_tilt);
        let roll_d = (-ay).atan2(vertical).clamp(-g.max_tilt, g.max_tilt);

        let angle_err = Vector3::new(roll_d - roll, pitch_d - pitch, wrap_angle(0.0 - yaw));
        let rate_d = Vector3::new(
            g.att_kp[0] * angle_err.x,
            g.att_kp[1] * angle_err.y,
            g.att_kp[2] * angle_err.z,
        );
        let rate_err = rate_d - state.rates;
        self.rate_int += rate_err * dt;
        let lim = g.rate_int_limit;
        self.rate_int = self.rate_int.map(|v| v.clamp(-lim, lim));

        let mut alpha = Vector3::zeros();
        for k in 0..3 {
            alpha[k] = g.rate_kp[k] * rate_err[k] + g.rate_ki[k] * self.rate_int[k];
        }
        let inertia = Vector3::from(params.inertia_diag);
        let torque = inertia.component_mul(&alpha) + state.rates.cross(&inertia.component_mul(&state.rates));

        let tilt = (roll.cos() * pitch.cos()).max(0.5);
        let thrust = params.mass * vertical / tilt;
        mix(thrust, &torque, params)
    }
}

/// Rotor speeds delivering total thrust `thrust` and body torque `torque`
/// on a healthy vehicle, clipped to `[0, omega_max]`.
pub fn mix(thrust: f64, torque: &Vector3<f64>, params: &QuadParams) -> [f64; 4] {
    let l = params.arm_length;
    let c = params.k_tau / params.k_f;
    let s12 = thrust / 2.0 + torque.z / (2.0 * c);
    let s34 = thrust / 2.0 - torque.z / (2.0 * c);
    let f = [
        (s12 - torque.y / l) / 2.0,
        (s12 + torque.y / l) / 2.0,
        (s34 + torque.x / l) / 2.0,
        (s34 - torque.x / l) / 2.0,
    ];
    f.map(|fi| (fi.max(0.0) / params.k_f).sqrt().min(params.omega_max))
}

/// Single update of a freshly initialised controller.
pub fn controller_update(
    state: &QuadState,
    waypoint: &Vector3<f64>,
    gains: &ControllerGains,
    params: &QuadParams,
) -> [f64; 4] {
    Controller::new(gains.clone()).update(state, waypoint, params, 0.0)
}
