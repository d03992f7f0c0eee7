//! Measurements shared by the module suites and the acceptance harness.
#![allow(dead_code)]

use nalgebra::Vector3;
use qfd_core::features::angular_accel_from_gyro;
use qfd_core::nn::{grad_check, ArchConfig, CeBatch, GradCheckConfig, GradCheckReport, LossSpec, MmdBatch, MmdKernel, ModelParams};
use qfd_core::quadsim::{
    estimate_unbalance, fly_episode, hover_spec, step, ControllerGains, Domain, DomainConfig, EpisodeSpec, FaultSpec,
    FlightPlan, QuadParams, QuadState, UnbalanceModel,
};

pub const INJECTED_RHO: [f64; 4] = [1.0, 1.03, 0.98, 1.01];

fn integrate(state: &QuadState, cmd: &[f64; 4], dt: f64, horizon: f64, params: &QuadParams, domain: &DomainConfig) -> QuadState {
    let n = (horizon / dt).round() as usize;
    let fault = FaultSpec::healthy();
    let mut s = state.clone();
    for _ in 0..n {
        s = step(&s, cmd, dt, params, &fault, domain).unwrap();
    }
    s
}

fn distance(a: &QuadState, b: &QuadState) -> f64 {
    let q = (a.attitude.quaternion().coords - b.attitude.quaternion().coords).norm();
    let r = (a.rates - b.rates).norm();
    let w: f64 = a.rotor_speed.iter().zip(&b.rotor_speed).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / 100.0;
    q + r + w
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Log-log slope of the global RK4 error against step size, measured on a
/// tumbling vehicle with lagging motors against a fine-step reference.
pub fn rk4_convergence_slope() -> f64 {
    let params = QuadParams::default();
    let domain = DomainConfig {
        perfect_motor: false,
        ..DomainConfig::ideal(0)
    };
    let mut start = QuadState::at_rest(Vector3::new(0.0, 0.0, 10.0), 400.0);
    start.rates = Vector3::new(1.0, -2.0, 3.0);
    let cmd = [520.0, 380.0, 610.0, 450.0];
    let horizon = 0.32;
    let reference = integrate(&start, &cmd, 1e-5, horizon, &params, &domain);
    let dts = [0.02, 0.01, 0.005];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| distance(&integrate(&start, &cmd, dt, horizon, &params, &domain), &reference))
        .collect();
    let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    ols_slope(&lx, &ly)
}

/// Relative change of `w^T I w` over 10 s of torque-free tumbling.
pub fn gyroscopic_energy_drift() -> f64 {
    let params = QuadParams::default();
    let domain = DomainConfig::ideal(0);
    let mut start = QuadState::at_rest(Vector3::zeros(), 0.0);
    start.rates = Vector3::new(1.0, 2.0, 3.0);
    let energy = |s: &QuadState| {
        let i = Vector3::from(params.inertia_diag);
        s.rates.dot(&i.component_mul(&s.rates))
    };
    let end = integrate(&start, &[0.0; 4], 0.01, 10.0, &params, &domain);
    ((energy(&end) - energy(&start)) / energy(&start)).abs()
}

/// Pseudo-reality with a known unbalance and no CoG offset.
pub fn calibration_target() -> DomainConfig {
    DomainConfig {
        gyro_noise_std: 0.005,
        cog_offset: [0.0, 0.0],
        motor_gain_scale: [1.0, 0.9, 1.1, 0.95],
        perfect_motor: false,
        unbalance: Some(UnbalanceModel::new(INJECTED_RHO, 570.0).unwrap()),
        seed: 3,
    }
}

/// Estimated ratios from a 60 s healthy hover of [`calibration_target`].
pub fn recovered_rho(seed: u64) -> [f64; 4] {
    let log = fly_episode(
        &QuadParams::default(),
        &FaultSpec::healthy(),
        &calibration_target(),
        Domain::Target,
        &ControllerGains::default(),
        &hover_spec(60.0, 10.0),
        seed,
    )
    .unwrap();
    assert_eq!(log.len(), 6000);
    estimate_unbalance(&log).unwrap().rho
}

/// Regression of the central-difference `p'` on `w3^2 - w4^2` over
/// noise-free hover-perturbation flights with ideal motors, as a ratio of
/// the fitted slope to `L k_F / Ixx`.
///
/// Commands are held over each step, so the difference at sample `k` spans
/// the commands of samples `k-1` and `k`. `held` selects the mean of those
/// two as regressor; otherwise the same-column command is used, exactly as
/// laid out in a NIF window.
pub fn nif_roll_slope_ratio(held: bool) -> f64 {
    let params = QuadParams::default();
    let spec = EpisodeSpec {
        plan: FlightPlan {
            jitter: 0.3,
            dwell: 2.0,
            dwell_jitter: 0.5,
            ..FlightPlan::hover([0.0, 0.0, 1.5])
        },
        duration: 30.0,
        warmup: 3.0,
        dt: 0.01,
    };
    let roll_input = |w: &[f64; 4]| w[2] * w[2] - w[3] * w[3];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for seed in 0..3 {
        let log = fly_episode(
            &params,
            &FaultSpec::healthy(),
            &DomainConfig::ideal(seed),
            Domain::Source,
            &ControllerGains::default(),
            &spec,
            seed,
        )
        .unwrap();
        let p: Vec<f64> = log.gyro.iter().map(|g| g[0]).collect();
        let pdot = angular_accel_from_gyro(&p, log.dt).unwrap();
        for k in 1..log.len() - 1 {
            let now = roll_input(&log.omega_cmd[k]);
            x.push(if held { 0.5 * (now + roll_input(&log.omega_cmd[k - 1])) } else { now });
            y.push(pdot[k]);
        }
    }
    ols_slope(&x, &y) / (params.arm_length * params.k_f / params.inertia_diag[0])
}

/// Central-difference checks of the full-size NIF network in double
/// precision: cross-entropy alone, linear MMD alone, and both together.
/// The combined weight keeps the two terms of similar size so that the
/// cross-entropy share of the difference quotient is not lost to rounding.
pub fn standard_grad_checks() -> Vec<(&'static str, GradCheckReport)> {
    use rand::Rng;
    let arch = ArchConfig::standard(7, 80);
    let p = ModelParams::<f64>::init(&arch, 17).unwrap();
    let n = 10;
    let per = arch.sample_len();
    let mut rng = qfd_core::seed::rng_from(5);
    let x: Vec<f64> = (0..n * per).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let ce = CeBatch { x: &x, labels: &labels };
    let h = n / 2;
    let mb = MmdBatch {
        source: &x[..h * per],
        n_source: h,
        target: &x[h * per..],
        n_target: n - h,
    };
    let spec = |lambda| LossSpec {
        lambda,
        kernel: MmdKernel::Linear,
        dropout: 0.1,
    };
    let cfg = GradCheckConfig::double();
    vec![
        ("cross-entropy", grad_check(&p, Some(ce), None, &spec(0.0), 1, &cfg).unwrap()),
        ("mmd", grad_check(&p, None, Some(mb), &spec(1.0), 2, &cfg).unwrap()),
        ("combined", grad_check(&p, Some(ce), Some(mb), &spec(0.1), 3, &cfg).unwrap()),
    ]
}
