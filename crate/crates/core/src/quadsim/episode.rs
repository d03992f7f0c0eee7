use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::controller::{Controller, ControllerGains};
use super::dynamics::{step, QuadState};
use super::params::{Domain, DomainConfig, FaultSpec, QuadParams};
use super::unbalance::adjust_all;
use super::SimError;
use crate::seed::{derive_seed, rng_from};

/// Any body rate beyond this marks the episode as diverged, rad/s.
pub const DIVERGENCE_RATE: f64 = 50.0;

/// Uniformly sampled record of one flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightLog {
    pub dt: f64,
    /// Measured body rates (p, q, r), rad/s.
    pub gyro: Vec<[f64; 3]>,
    /// Roll and pitch, rad.
    pub attitude: Vec<[f64; 2]>,
    /// Commanded rotor speeds as seen by the motors, rad/s.
    pub omega_cmd: Vec<[f64; 4]>,
    pub label: u8,
    pub domain: Domain,
}

impl FlightLog {
    pub fn len(&self) -> usize {
        self.gyro.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gyro.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidLog(format!("dt = {}", self.dt)));
        }
        if self.gyro.len() != self.omega_cmd.len() || self.gyro.len() != self.attitude.len() {
            return Err(SimError::InvalidLog(format!(
                "series lengths differ: gyro {}, attitude {}, omega_cmd {}",
                self.gyro.len(),
                self.attitude.len(),
                self.omega_cmd.len()
            )));
        }
        if !(1..=5).contains(&self.label) {
            return Err(SimError::InvalidLog(format!("label {}", self.label)));
        }
        Ok(())
    }

    /// Drops the first `n` samples.
    pub fn skip(&self, n: usize) -> FlightLog {
        let n = n.min(self.len());
        FlightLog {
            dt: self.dt,
            gyro: self.gyro[n..].to_vec(),
            attitude: self.attitude[n..].to_vec(),
            omega_cmd: self.omega_cmd[n..].to_vec(),
            label: self.label,
            domain: self.domain,
        }
    }
}

/// Waypoint pattern. Each visit to a waypoint can be jittered in position
/// and dwell time, which is how piloted flight is emulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlightPlan {
    pub waypoints: Vec<[f64; 3]>,
    /// Seconds spent heading to each waypoint before switching.
    pub dwell: f64,
    /// Uniform position jitter per visit, m (z gets half).
    pub jitter: f64,
    /// Relative dwell jitter, fraction of `dwell`.
    pub dwell_jitter: f64,
}

impl FlightPlan {
    /// Square circuit flown autonomously in simulation.
    pub fn square() -> Self {
        Self {
            waypoints: vec![
                [0.0, 0.0, 2.0],
                [2.0, 0.0, 2.0],
                [2.0, 2.0, 2.5],
                [0.0, 2.0, 2.0],
            ],
            dwell: 4.0,
            jitter: 0.0,
            dwell_jitter: 0.0,
        }
    }

    /// A single hover point.
    pub fn hover(at: [f64; 3]) -> Self {
        Self {
            waypoints: vec![at],
            dwell: 10.0,
            jitter: 0.0,
            dwell_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.is_empty() {
            return Err(SimError::InvalidPlan("waypoint list is empty".into()));
        }
        if !(self.dwell > 0.0) || self.jitter < 0.0 || !(0.0..1.0).contains(&self.dwell_jitter) {
            return Err(SimError::InvalidPlan(format!(
                "dwell {} jitter {} dwell_jitter {}",
                self.dwell, self.jitter, self.dwell_jitter
            )));
        }
        Ok(())
    }

    /// Switching schedule covering `duration` seconds.
    fn schedule(&self, duration: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, Vector3<f64>)> {
        let mut out = Vec::new();
        let mut t = 0.0;
        let mut k = 0usize;
        while t <= duration {
            let base = Vector3::from(self.waypoints[k % self.waypoints.len()]);
            let mut wp = base;
            if self.jitter > 0.0 {
                wp.x += rng.gen_range(-self.jitter..=self.jitter);
                wp.y += rng.gen_range(-self.jitter..=self.jitter);
                wp.z += 0.5 * rng.gen_range(-self.jitter..=self.jitter);
            }
            let dwell = if self.dwell_jitter > 0.0 {
                self.dwell * (1.0 + rng.gen_range(-self.dwell_jitter..=self.dwell_jitter))
            } else {
                self.dwell
            };
            out.push((t, wp));
            t += dwell;
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub plan: FlightPlan,
    /// Logged duration, s.
    pub duration: f64,
    /// Unlogged settling time at the first waypoint, s.
    pub warmup: f64,
    pub dt: f64,
}

impl EpisodeSpec {
    pub fn samples(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Closed-loop flight of one episode.
///
/// The controller computes the speed each rotor must reach. With an
/// unbalance model installed the motors need [`adjust_speed`] of that speed
/// as their command, and that adjusted command is what gets logged.
///
/// [`adjust_speed`]: super::unbalance::adjust_speed
pub fn fly_episode(
    params: &QuadParams,
    fault: &FaultSpec,
    domain_cfg: &DomainConfig,
    domain: Domain,
    gains: &ControllerGains,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<FlightLog, SimError> {
    params.validate()?;
    domain_cfg.validate()?;
    spec.plan.validate()?;
    if !(spec.duration > 0.0 && spec.warmup >= 0.0) {
        return Err(SimError::InvalidPlan(format!(
            "duration {} / warmup {}",
            spec.duration, spec.warmup
        )));
    }

    let mut plan_rng = rng_from(derive_seed(seed, 1));
    let mut noise_rng = rng_from(derive_seed(seed, 2));
    let noise = Normal::new(0.0, domain_cfg.gyro_noise_std.max(0.0))
        .map_err(|e| SimError::InvalidDomain(e.to_string()))?;

    let schedule = spec.plan.schedule(spec.duration, &mut plan_rng);
    let n = spec.samples();
    let warm = (spec.warmup / spec.dt).round() as usize;

    let start = schedule[0].1;
    let mut state = QuadState::at_rest(start, params.hover_speed());
    let mut ctrl = Controller::new(gains.clone());

    let mut log = FlightLog {
        dt: spec.dt,
        gyro: Vec::with_capacity(n),
        attitude: Vec::with_capacity(n),
        omega_cmd: Vec::with_capacity(n),
        label: fault.label(),
        domain,
    };

    let mut next_switch = 0usize;
    let mut waypoint = start;
    for k in 0..(warm + n) {
        let logging = k >= warm;
        if logging {
            let t = (k - warm) as f64 * spec.dt;
            while next_switch < schedule.len() && schedule[next_switch].0 <= t {
                waypoint = schedule[next_switch].1;
                next_switch += 1;
            }
        }
        let cmd = ctrl.update(&state, &waypoint, params, spec.dt);
        if logging {
            let r = state.rates;
            let measured = if domain_cfg.gyro_noise_std > 0.0 {
                [
                    r.x + noise.sample(&mut noise_rng),
                    r.y + noise.sample(&mut noise_rng),
                    r.z + noise.sample(&mut noise_rng),
                ]
            } else {
                [r.x, r.y, r.z]
            };
            log.gyro.push(measured);
            log.attitude.push(state.roll_pitch());
            let recorded = match &domain_cfg.unbalance {
                Some(model) => adjust_all(&cmd, model)?,
                None => cmd,
            };
            log.omega_cmd.push(recorded);
        }
        state = step(&state, &cmd, spec.dt, params, fault, domain_cfg).map_err(|e| {
            SimError::EpisodeDiverged {
                step: k,
                reason: e.to_string(),
            }
        })?;
        let worst = state.rates.amax();
        if worst > DIVERGENCE_RATE {
            return Err(SimError::EpisodeDiverged {
                step: k,
                reason: format!("body rate {worst:.1} rad/s exceeds {DIVERGENCE_RATE}"),
            });
        }
    }
    Ok(log)
}

/// Convenience: plan-free hover episode without jitter.
pub fn hover_spec(duration: f64, warmup: f64) -> EpisodeSpec {
    EpisodeSpec {
        plan: FlightPlan::hover([0.0, 0.0, 1.5]),
        duration,
        warmup,
        dt: 0.01,
    }
}
