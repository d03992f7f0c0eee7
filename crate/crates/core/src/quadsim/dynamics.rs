use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::params::{DomainConfig, FaultSpec, QuadParams, GRAVITY};
use super::SimError;

/// Largest integration step accepted by [`step`], s.
pub const MAX_DT: f64 = 0.02;

const QUAT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadState {
    pub attitude: UnitQuaternion<f64>,
    /// Body rates (p, q, r), rad/s.
    pub rates: Vector3<f64>,
    /// World-frame position (z up), m.
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotor_speed: [f64; 4],
    pub time: f64,
}

impl QuadState {
    /// Level, motionless, with every rotor at `omega`.
    pub fn at_rest(position: Vector3<f64>, omega: f64) -> Self {
        Self {
            attitude: UnitQuaternion::identity(),
            rates: Vector3::zeros(),
            position,
            velocity: Vector3::zeros(),
            rotor_speed: [omega; 4],
            time: 0.0,
        }
    }

    /// Roll and pitch (ZYX Euler), rad.
    pub fn roll_pitch(&self) -> [f64; 2] {
        let (roll, pitch, _) = self.attitude.euler_angles();
        [roll, pitch]
    }

    pub fn check(&self, params: &QuadParams) -> Result<(), SimError> {
        let n = self.attitude.quaternion().norm();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOL {
            return Err(SimError::InvalidState(format!("quaternion norm {n}")));
        }
        let finite = self.rates.iter().all(|v| v.is_finite())
            && self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SimError::InvalidState("non-finite kinematic state".into()));
        }
        for (i, &w) in self.rotor_speed.iter().enumerate() {
            if !(0.0..=params.omega_max).contains(&w) {
                return Err(SimError::InvalidState(format!(
                    "rotor {} speed {w} outside [0, {}]",
                    i + 1,
                    params.omega_max
                )));
            }
        }
        Ok(())
    }
}

/// Per-rotor thrust and drag torque for the given speeds.
pub fn rotor_forces(
    omega: &[f64; 4],
    params: &QuadParams,
    fault: &FaultSpec,
) -> Result<([f64; 4], [f64; 4]), SimError> {
    for (i, &w) in omega.iter().enumerate() {
        if !(w.is_finite() && w >= 0.0) {
            return Err(SimError::InputDomain(format!(
                "rotor {} speed {w} must be finite and >= 0",
                i + 1
            )));
        }
    }
    Ok(rotor_forces_unchecked(omega, params, fault))
}

fn rotor_forces_unchecked(
    omega: &[f64; 4],
    params: &QuadParams,
    fault: &FaultSpec,
) -> ([f64; 4], [f64; 4]) {
    let (eta_f, eta_t) = fault.efficiencies();
    let mut f = [0.0; 4];
    let mut tau = [0.0; 4];
    for i in 0..4 {
        let w2 = omega[i] * omega[i];
        f[i] = eta_f[i] * params.k_f * w2;
        tau[i] = eta_t[i] * params.k_tau * w2;
    }
    (f, tau)
}

/// Body torque produced by the rotors.
pub fn rotor_torque(f: &[f64; 4], tau: &[f64; 4], arm_length: f64) -> Vector3<f64> {
    Vector3::new(
        arm_length * (f[2] - f[3]),
        arm_length * (f[1] - f[0]),
        (tau[0] - tau[2]) + (tau[1] - tau[3]),
    )
}

/// `I^-1 (torque - w x I w)` for a diagonal inertia.
pub fn angular_accel(rates: &Vector3<f64>, torque: &Vector3<f64>, params: &QuadParams) -> Vector3<f64> {
    let i = Vector3::from(params.inertia_diag);
    let iw = i.component_mul(rates);
    let rhs = torque - rates.cross(&iw);
    rhs.component_div(&i)
}

/// Angular acceleration (p', q', r') from rotor thrusts and torques.
pub fn angular_dynamics(
    state: &QuadState,
    f: &[f64; 4],
    tau: &[f64; 4],
    params: &QuadParams,
) -> Result<Vector3<f64>, SimError> {
    if f.iter().chain(tau.iter()).any(|v| !v.is_finite()) || state.rates.iter().any(|v| !v.is_finite()) {
        return Err(SimError::InputDomain("non-finite force, torque or rate".into()));
    }
    Ok(angular_accel(&state.rates, &rotor_torque(f, tau, params.arm_length), params))
}

#[derive(Clone, Copy)]
struct Deriv {
    q: Quaternion<f64>,
    rates: Vector3<f64>,
    pos: Vector3<f64>,
    vel: Vector3<f64>,
    rotors: [f64; 4],
}

#[derive(Clone, Copy)]
struct Point {
    q: Quaternion<f64>,
    rates: Vector3<f64>,
    pos: Vector3<f64>,
    vel: Vector3<f64>,
    rotors: [f64; 4],
}

impl Point {
    fn offset(&self, d: &Deriv, h: f64) -> Point {
        let mut rotors = self.rotors;
        for i in 0..4 {
            rotors[i] += h * d.rotors[i];
        }
        Point {
            q: self.q + d.q * h,
            rates: self.rates + d.rates * h,
            pos: self.pos + d.pos * h,
            vel: self.vel + d.vel * h,
            rotors,
        }
    }
}

struct Model<'a> {
    params: &'a QuadParams,
    fault: &'a FaultSpec,
    domain: &'a DomainConfig,
    omega_ref: [f64; 4],
}

impl Model<'_> {
    fn deriv(&self, x: &Point) -> Deriv {
        let p = self.params;
        let (f, tau) = rotor_forces_unchecked(&x.rotors.map(|w| w.max(0.0)), p, self.fault);
        let mut torque = rotor_torque(&f, &tau, p.arm_length);

        // Normalise the stage quaternion so intermediate RK4 points stay on
        // the rotation manifold for the force projection.
        let unit = UnitQuaternion::from_quaternion(x.q);
        let [cx, cy] = self.domain.cog_offset;
        if cx != 0.0 || cy != 0.0 {
            let g_body = unit.inverse_transform_vector(&Vector3::new(0.0, 0.0, -p.mass * GRAVITY));
            torque += Vector3::new(cx, cy, 0.0).cross(&g_body);
        }

        let rates_dot = angular_accel(&x.rates, &torque, p);
        let q_dot = x.q * Quaternion::new(0.0, x.rates.x, x.rates.y, x.rates.z) * 0.5;

        let thrust: f64 = f.iter().sum();
        let acc = unit.transform_vector(&Vector3::new(0.0, 0.0, thrust / p.mass))
            - Vector3::new(0.0, 0.0, GRAVITY);

        let mut rotors = [0.0; 4];
        if !self.domain.perfect_motor {
            for i in 0..4 {
                let gain = p.k_m * self.domain.motor_gain_scale[i];
                rotors[i] = gain * (self.omega_ref[i] - x.rotors[i]);
            }
        }
        Deriv {
            q: q_dot,
            rates: rates_dot,
            pos: x.vel,
            vel: acc,
            rotors,
        }
    }
}

/// Advances the vehicle by one step of classic fourth-order Runge-Kutta.
///
/// `omega_ref` is the speed each rotor is driven toward (ideal-motor
/// command). Commands are held constant over the step. With a perfect motor
/// the rotors jump to `omega_ref` at the start of the step; otherwise they
/// follow `w' = k_m * scale_i * (ref - w)`.
pub fn step(
    state: &QuadState,
    omega_ref: &[f64; 4],
    dt: f64,
    params: &QuadParams,
    fault: &FaultSpec,
    domain: &DomainConfig,
) -> Result<QuadState, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidStep(format!("dt = {dt} outside (0, {MAX_DT}]")));
    }
    state.check(params)?;
    let mut reference = [0.0; 4];
    for i in 0..4 {
        let w = omega_ref[i];
        if !w.is_finite() {
            return Err(SimError::InputDomain(format!("rotor {} command is not finite", i + 1)));
        }
        reference[i] = w.clamp(0.0, params.omega_max);
    }

    let model = Model {
        params,
        fault,
        domain,
        omega_ref: reference,
    };
    let x0 = Point {
        q: *state.attitude.quaternion(),
        rates: state.rates,
        pos: state.position,
        vel: state.velocity,
        rotors: if domain.perfect_motor { reference } else { state.rotor_speed },
    };

    let k1 = model.deriv(&x0);
    let k2 = model.deriv(&x0.offset(&k1, dt / 2.0));
    let k3 = model.deriv(&x0.offset(&k2, dt / 2.0));
    let k4 = model.deriv(&x0.offset(&k3, dt));

    let combine = |a: f64, b: f64, c: f64, d: f64| (a + 2.0 * b + 2.0 * c + d) * (dt / 6.0);
    let q = x0.q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0);
    let rates = x0.rates + (k1.rates + k2.rates * 2.0 + k3.rates * 2.0 + k4.rates) * (dt / 6.0);
    let pos = x0.pos + (k1.pos + k2.pos * 2.0 + k3.pos * 2.0 + k4.pos) * (dt / 6.0);
    let vel = x0.vel + (k1.vel + k2.vel * 2.0 + k3.vel * 2.0 + k4.vel) * (dt / 6.0);
    let mut rotors = x0.rotors;
    for i in 0..4 {
        rotors[i] += combine(k1.rotors[i], k2.rotors[i], k3.rotors[i], k4.rotors[i]);
        rotors[i] = rotors[i].clamp(0.0, params.omega_max);
    }

    let next = QuadState {
        attitude: UnitQuaternion::new_normalize(q),
        rates,
        position: pos,
        velocity: vel,
        rotor_speed: rotors,
        time: state.time + dt,
    };
    next.check(params)?;
    Ok(next)
}
