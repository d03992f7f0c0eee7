//! Classifier inputs cut from flight logs.
//!
//! NIF windows hold seven channels `[p', q', r', w1², w2², w3², w4²]` whose
//! rows are linearly related through the rotational dynamics. CF windows
//! hold nine `[roll, pitch, p, q, r, w1, w2, w3, w4]`. Rotor speeds are the
//! logged commands; angular accelerations are differentiated gyro rates.

use serde::{Deserialize, Serialize};

use crate::quadsim::{Domain, FlightLog};

pub const DEFAULT_WINDOW_LEN: usize = 80;
pub const DEFAULT_STRIDE: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("series too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("channel {channel} has zero variance; cannot standardise")]
    ZeroVariance { channel: usize },
    #[error("normalizer fitted on no windows")]
    Empty,
    #[error("window shape mismatch: {0}")]
    Shape(String),
    #[error("normalizer must be fitted on source-domain windows only")]
    TargetLeak,
    #[error("non-finite value in channel {channel}")]
    NonFinite { channel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureVariant {
    Nif,
    Cf,
}

impl FeatureVariant {
    pub fn channels(self) -> usize {
        match self {
            FeatureVariant::Nif => 7,
            FeatureVariant::Cf => 9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureVariant::Nif => "nif",
            FeatureVariant::Cf => "cf",
        }
    }
}

impl std::str::FromStr for FeatureVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nif" => Ok(FeatureVariant::Nif),
            "cf" => Ok(FeatureVariant::Cf),
            other => Err(format!("unknown feature variant `{other}` (expected nif|cf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub stride: usize,
    pub variant: FeatureVariant,
}

impl FeatureConfig {
    pub fn new(variant: FeatureVariant) -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            stride: DEFAULT_STRIDE,
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.window_len < 2 {
            return Err(FeatureError::InvalidConfig(format!(
                "window_len must be >= 2, got {}",
                self.window_len
            )));
        }
        if self.stride < 1 {
            return Err(FeatureError::InvalidConfig("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of windows produced from a log of `n` samples.
    pub fn window_count(&self, n: usize) -> usize {
        if n < self.window_len {
            0
        } else {
            (n - self.window_len) / self.stride + 1
        }
    }
}

/// One classifier sample: a `channels x len` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Vec<f32>,
    pub channels: usize,
    pub len: usize,
    pub label: u8,
    pub domain: Domain,
}

impl Window {
    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Derivative of a uniformly sampled series: central differences inside,
/// second-order one-sided differences at both ends.
pub fn angular_accel_from_gyro(series: &[f64], dt: f64) -> Result<Vec<f64>, FeatureError> {
    let n = series.len();
    if n < 3 {
        return Err(FeatureError::TooShort { needed: 3, got: n });
    }
    let h2 = 2.0 * dt;
    let mut out = Vec::with_capacity(n);
    out.push((-3.0 * series[0] + 4.0 * series[1] - series[2]) / h2);
    for k in 1..n - 1 {
        out.push((series[k + 1] - series[k - 1]) / h2);
    }
    out.push((3.0 * series[n - 1] - 4.0 * series[n - 2] + series[n - 3]) / h2);
    Ok(out)
}

fn channel_series(log: &FlightLog, variant: FeatureVariant) -> Result<Vec<Vec<f64>>, FeatureError> {
    let axis = |k: usize| log.gyro.iter().map(|g| g[k]).collect::<Vec<_>>();
    let rotor = |i: usize| log.omega_cmd.iter().map(move |w| w[i]);
    let mut rows = Vec::with_capacity(variant.channels());
    match variant {
        FeatureVariant::Nif => {
            for k in 0..3 {
                rows.push(angular_accel_from_gyro(&axis(k), log.dt)?);
            }
            for i in 0..4 {
                rows.push(rotor(i).map(|w| w * w).collect());
            }
        }
        FeatureVariant::Cf => {
            rows.push(log.attitude.iter().map(|a| a[0]).collect());
            rows.push(log.attitude.iter().map(|a| a[1]).collect());
            for k in 0..3 {
                rows.push(axis(k));
            }
            for i in 0..4 {
                rows.push(rotor(i).collect());
            }
        }
    }
    Ok(rows)
}

/// Slides a `window_len` window over the log. The first window ends at
/// sample `window_len - 1`; subsequent windows advance by `stride`.
pub fn build_windows(log: &FlightLog, cfg: &FeatureConfig) -> Result<Vec<Window>, FeatureError> {
    cfg.validate()?;
    let n = log.len();
    let t = cfg.window_len;
    if n < t.max(3) {
        return Err(FeatureError::TooShort {
            needed: t.max(3),
            got: n,
        });
    }
    let rows = channel_series(log, cfg.variant)?;
    let channels = rows.len();
    let count = cfg.window_count(n);
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let end = t - 1 + j * cfg.stride;
        let start = end + 1 - t;
        let mut data = Vec::with_capacity(channels * t);
        for row in &rows {
            data.extend(row[start..=end].iter().map(|&v| v as f32));
        }
        out.push(Window {
            data,
            channels,
            len: t,
            label: log.label,
            domain: log.domain,
        });
    }
    Ok(out)
}

/// Per-channel standardisation fitted on source windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a, I>(windows: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = &'a Window> + Clone,
    {
        let mut channels = None;
        let mut sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for w in windows.clone() {
            if w.domain != Domain::Source {
                return Err(FeatureError::TargetLeak);
            }
            let c = *channels.get_or_insert(w.channels);
            if c != w.channels {
                return Err(FeatureError::Shape(format!("{} vs {} channels", w.channels, c)));
            }
            if sums.is_empty() {
                sums = vec![0.0; c];
            }
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += w.row(ch).iter().map(|&v| v as f64).sum::<f64>();
            }
            count += w.len;
        }
        let channels = channels.ok_or(FeatureError::Empty)?;
        let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; channels];
        for w in windows {
            for (ch, s) in sq.iter_mut().enumerate() {
                let m = mean[ch];
                *s += w.row(ch).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
            }
        }
        let mut std = Vec::with_capacity(channels);
        for (ch, s) in sq.iter().enumerate() {
            let sd = (s / count as f64).sqrt();
            if !sd.is_finite() {
                return Err(FeatureError::NonFinite { channel: ch });
            }
            if sd <= 0.0 {
                return Err(FeatureError::ZeroVariance { channel: ch });
            }
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn apply(&self, w: &Window) -> Result<Window, FeatureError> {
        if w.channels != self.channels() {
            return Err(FeatureError::Shape(format!(
                "window has {} channels, normalizer {}",
                w.channels,
                self.channels()
            )));
        }
        let mut out = w.clone();
        for ch in 0..w.channels {
            for v in &mut out.data[ch * w.len..(ch + 1) * w.len] {
                *v = self.transform(ch, *v as f64) as f32;
                if !v.is_finite() {
                    return Err(FeatureError::NonFinite { channel: ch });
                }
            }
        }
        Ok(out)
    }

    /// Content hash used to tie datasets and checkpoints to one normalizer.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(self.std.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
