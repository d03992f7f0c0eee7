//! Complete, serialisable description of an experiment.

use serde::{Deserialize, Serialize};

use crate::dataset::GenConfig;
use crate::features::{FeatureVariant, DEFAULT_STRIDE, DEFAULT_WINDOW_LEN};
use crate::nn::{ArchConfig, MmdKernel};
use crate::pipeline::TrainConfig;
use crate::quadsim::{
    hover_spec, ControllerGains, Domain, DomainConfig, EpisodeSpec, FlightPlan, QuadParams, UnbalanceModel, DEFAULT_FAULT_EFF,
    NUM_CLASSES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub filters: usize,
    pub conv_blocks: usize,
    pub hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            filters: 64,
            conv_blocks: 4,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub per_class: usize,
    pub window_len: usize,
    pub stride: usize,
    /// Thrust and torque efficiency of the broken propeller.
    pub fault_efficiency: f64,
    /// Replace the source unbalance model by one estimated from a healthy
    /// target hover before generating source data.
    pub calibrate_source: bool,
    pub runs: usize,
    /// Airframe of the source simulator.
    pub quad: QuadParams,
    /// Airframe actually flown in the target domain.
    pub target_quad: QuadParams,
    pub gains: ControllerGains,
    pub episode: EpisodeSpec,
    pub calibration: EpisodeSpec,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

/// Piloted-style target flight: a square circuit with jittered waypoints
/// and dwell times.
fn piloted_plan() -> FlightPlan {
    FlightPlan {
        jitter: 0.4,
        dwell_jitter: 0.3,
        ..FlightPlan::square()
    }
}

/// Nominal simulator: ideal motors and CoG, modelled IMU noise.
pub fn nominal_source() -> DomainConfig {
    DomainConfig {
        gyro_noise_std: 0.003,
        ..DomainConfig::ideal(0x5E)
    }
}

/// Pseudo-reality: lagging, mismatched motors, an off-centre CoG, gyro
/// noise and per-motor unbalance.
pub fn default_target() -> DomainConfig {
    DomainConfig {
        gyro_noise_std: 0.005,
        cog_offset: [0.004, -0.003],
        motor_gain_scale: [1.0, 0.9, 1.1, 0.95],
        perfect_motor: false,
        unbalance: Some(UnbalanceModel {
            rho: [1.0, 1.03, 0.98, 1.05],
            omega_ref_max: 570.0,
        }),
        seed: 0x7A,
    }
}

/// The real vehicle carries more mass than the nominal model and has
/// slightly larger moments of inertia.
pub fn default_target_quad() -> QuadParams {
    let q = QuadParams::default();
    QuadParams {
        mass: q.mass * 1.08,
        inertia_diag: q.inertia_diag.map(|i| i * 1.1),
        ..q
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl RunConfig {
    /// Full-scale configuration: 800 windows per class, ten runs.
    pub fn standard() -> Self {
        Self {
            seed: 2024,
            per_class: 800,
            window_len: DEFAULT_WINDOW_LEN,
            stride: DEFAULT_STRIDE,
            fault_efficiency: DEFAULT_FAULT_EFF,
            calibrate_source: true,
            runs: 10,
            quad: QuadParams::default(),
            target_quad: default_target_quad(),
            gains: ControllerGains::default(),
            episode: EpisodeSpec {
                plan: piloted_plan(),
                duration: 120.0,
                warmup: 3.0,
                dt: 0.01,
            },
            calibration: hover_spec(60.0, 10.0),
            source: nominal_source(),
            target: default_target(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }

    /// 200 windows per class and three runs.
    pub fn reduced() -> Self {
        Self {
            per_class: 200,
            runs: 3,
            episode: EpisodeSpec {
                duration: 30.0,
                ..Self::standard().episode
            },
            ..Self::standard()
        }
    }

    /// Smoke-test scale: T=16, 40 windows per class, two runs.
    pub fn tiny() -> Self {
        Self {
            per_class: 40,
            runs: 2,
            window_len: 16,
            stride: 8,
            episode: EpisodeSpec {
                duration: 20.0,
                ..Self::standard().episode
            },
            model: ModelSettings {
                filters: 16,
                conv_blocks: 2,
                hidden: 32,
            },
            train: TrainConfig {
                max_epochs: 10,
                patience: 5,
                batch_size: 32,
                mmd_batch: 16,
                ..TrainConfig::default()
            },
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self::standard()),
            "reduced" => Some(Self::reduced()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Generation settings for `domain`.
    pub fn gen_config(&self, domain: Domain) -> GenConfig {
        GenConfig {
            quad: match domain {
                Domain::Source => self.quad.clone(),
                Domain::Target => self.target_quad.clone(),
            },
            gains: self.gains.clone(),
            episode: self.episode.clone(),
            fault_efficiency: self.fault_efficiency,
            window_len: self.window_len,
            stride: self.stride,
            per_class: self.per_class,
        }
    }

    pub fn arch(&self, variant: FeatureVariant) -> ArchConfig {
        ArchConfig {
            in_channels: variant.channels(),
            window_len: self.window_len,
            filters: self.model.filters,
            conv_blocks: self.model.conv_blocks,
            hidden: self.model.hidden,
            classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.gen_config(Domain::Source).validate().map_err(|e| e.to_string())?;
        self.quad.validate().map_err(|e| e.to_string())?;
        self.target_quad.validate().map_err(|e| format!("target_quad: {e}"))?;
        self.source.validate().map_err(|e| format!("source: {e}"))?;
        self.target.validate().map_err(|e| format!("target: {e}"))?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.runs == 0 {
            return Err("runs must be >= 1".into());
        }
        if !(self.fault_efficiency > 0.0 && self.fault_efficiency <= 1.0) {
            return Err(format!("fault_efficiency {} outside (0, 1]", self.fault_efficiency));
        }
        self.arch(FeatureVariant::Nif).lengths().map_err(|e| e.to_string())?;
        if let MmdKernel::Rbf { bandwidth: Some(b) } = self.train.kernel {
            if !(b > 0.0) {
                return Err(format!("rbf bandwidth {b} must be > 0"));
            }
        }
        Ok(())
    }
}
