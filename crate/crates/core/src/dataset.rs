//! Labelled two-domain window datasets: generation, persistence, batching.
//!
//! On disk a dataset is a directory holding `dataset.json` (manifest),
//! `windows.f32` (little-endian f32, `[window][channel][time]`) and
//! `labels.u8` (one byte per window, labels 1..=5).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, BlobInfo, ContainerError, FORMAT_VERSION};
use crate::exec::Exec;
use crate::features::{build_windows, FeatureConfig, FeatureError, FeatureVariant, Normalizer, Window};
use crate::quadsim::{
    estimate_unbalance, fly_episode, ControllerGains, Domain, DomainConfig, EpisodeSpec, FaultSpec, FlightLog,
    QuadParams, SimError, UnbalanceModel, NUM_CLASSES,
};
use crate::seed::{derive_seed, derive_seed3, rng_from};

pub const MANIFEST: &str = "dataset.json";
pub const WINDOWS: &str = "windows.f32";
pub const LABELS: &str = "labels.u8";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("episode for label {label} (seed {seed}) failed: {source}")]
    Episode {
        label: u8,
        seed: u64,
        #[source]
        source: SimError,
    },
    #[error("calibration failed: {0}")]
    Calibration(#[source] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

/// Windows of one variant from one domain, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variant: FeatureVariant,
    pub domain: Domain,
    pub window_len: usize,
    pub channels: usize,
    /// Id of the normalizer applied to `data`, `None` for raw windows.
    pub normalizer: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    data: Vec<f32>,
    labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: String,
    pub variant: FeatureVariant,
    pub domain: Domain,
    pub window_len: usize,
    pub channels: usize,
    pub count: usize,
    pub class_counts: [usize; NUM_CLASSES],
    pub normalizer: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub windows: BlobInfo,
    pub labels: BlobInfo,
}

impl Dataset {
    pub fn new(
        variant: FeatureVariant,
        domain: Domain,
        window_len: usize,
        data: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self, DatasetError> {
        let channels = variant.channels();
        if data.len() != labels.len() * channels * window_len {
            return Err(DatasetError::Inconsistent(format!(
                "{} values for {} windows of {channels}x{window_len}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| !(1..=NUM_CLASSES as u8).contains(l)) {
            return Err(DatasetError::Inconsistent(format!("label {l} outside 1..=5")));
        }
        Ok(Self {
            variant,
            domain,
            window_len,
            channels,
            normalizer: None,
            config_hash: String::new(),
            seed: 0,
            data,
            labels,
        })
    }

    pub fn from_windows(variant: FeatureVariant, domain: Domain, windows: &[Window]) -> Result<Self, DatasetError> {
        let first = windows.first().ok_or(DatasetError::Empty)?;
        let (c, t) = (first.channels, first.len);
        if c != variant.channels() {
            return Err(DatasetError::Inconsistent(format!("{c} channels for variant {}", variant.as_str())));
        }
        let mut data = Vec::with_capacity(windows.len() * c * t);
        let mut labels = Vec::with_capacity(windows.len());
        for w in windows {
            if w.channels != c || w.len != t || w.domain != domain {
                return Err(DatasetError::Inconsistent("windows differ in shape or domain".into()));
            }
            data.extend_from_slice(&w.data);
            labels.push(w.label);
        }
        Self::new(variant, domain, t, data, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.window_len
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn window(&self, i: usize) -> Window {
        Window {
            data: self.sample(i).to_vec(),
            channels: self.channels,
            len: self.window_len,
            label: self.labels[i],
            domain: self.domain,
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize - 1] += 1;
        }
        c
    }

    /// Windows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            variant: self.variant,
            domain: self.domain,
            window_len: self.window_len,
            channels: self.channels,
            normalizer: self.normalizer.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Label-1 windows only, values untouched.
    pub fn healthy_subset(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 1).collect();
        self.subset(&idx)
    }

    /// Standardisation statistics of this (source, raw) dataset.
    pub fn fit_normalizer(&self) -> Result<Normalizer, DatasetError> {
        if self.normalizer.is_some() {
            return Err(DatasetError::Config("dataset is already normalized".into()));
        }
        let windows: Vec<Window> = (0..self.len()).map(|i| self.window(i)).collect();
        Ok(Normalizer::fit(&windows)?)
    }

    pub fn normalized(&self, norm: &Normalizer) -> Result<Dataset, DatasetError> {
        if self.normalizer.is_some() {
            return Err(DatasetError::Config("dataset is already normalized".into()));
        }
        if norm.channels() != self.channels {
            return Err(DatasetError::Inconsistent(format!(
                "normalizer has {} channels, dataset {}",
                norm.channels(),
                self.channels
            )));
        }
        let mut out = self.clone();
        let t = self.window_len;
        for (k, v) in out.data.iter_mut().enumerate() {
            let ch = (k / t) % self.channels;
            *v = norm.transform(ch, *v as f64) as f32;
            if !v.is_finite() {
                return Err(FeatureError::NonFinite { channel: ch }.into());
            }
        }
        out.normalizer = Some(norm.id());
        Ok(out)
    }

    pub fn manifest(&self, windows: BlobInfo, labels: BlobInfo) -> DatasetManifest {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            kind: "dataset".into(),
            variant: self.variant,
            domain: self.domain,
            window_len: self.window_len,
            channels: self.channels,
            count: self.len(),
            class_counts: self.class_counts(),
            normalizer: self.normalizer.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            windows,
            labels,
        }
    }
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    container::create_dir(dir)?;
    let w = container::write_blob(dir, WINDOWS, &container::f32_to_le(&ds.data))?;
    let l = container::write_blob(dir, LABELS, &ds.labels)?;
    let m = ds.manifest(w, l);
    container::write_manifest(&dir.join(MANIFEST), &m)?;
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST);
    let m: DatasetManifest = container::read_manifest(&path)?;
    let mismatch = |msg: String| DatasetError::Container(ContainerError::CountMismatch(format!("{}: {msg}", path.display())));
    if m.channels != m.variant.channels() {
        return Err(mismatch(format!("{} channels for variant {}", m.channels, m.variant.as_str())));
    }
    if m.class_counts.iter().sum::<usize>() != m.count {
        return Err(mismatch(format!("class counts sum to {}, count is {}", m.class_counts.iter().sum::<usize>(), m.count)));
    }
    let want = (m.count * m.channels * m.window_len * 4) as u64;
    if m.windows.bytes != want || m.labels.bytes != m.count as u64 {
        return Err(mismatch(format!(
            "{} windows need {want} window bytes and {} label bytes; manifest lists {} and {}",
            m.count, m.count, m.windows.bytes, m.labels.bytes
        )));
    }
    let data = container::le_to_f32(&container::read_blob(dir, &m.windows)?);
    let labels = container::read_blob(dir, &m.labels)?;
    let mut ds = Dataset::new(m.variant, m.domain, m.window_len, data, labels)?;
    if ds.class_counts() != m.class_counts {
        return Err(mismatch(format!(
            "stored labels count {:?}, manifest {:?}",
            ds.class_counts(),
            m.class_counts
        )));
    }
    ds.normalizer = m.normalizer;
    ds.config_hash = m.config_hash;
    ds.seed = m.seed;
    Ok(ds)
}

/// Everything except the domain that determines a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub quad: QuadParams,
    pub gains: ControllerGains,
    pub episode: EpisodeSpec,
    /// Thrust and torque efficiency of a broken propeller.
    pub fault_efficiency: f64,
    pub window_len: usize,
    pub stride: usize,
    pub per_class: usize,
}

impl GenConfig {
    pub fn feature_config(&self, variant: FeatureVariant) -> FeatureConfig {
        FeatureConfig {
            window_len: self.window_len,
            stride: self.stride,
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.per_class == 0 {
            return Err(DatasetError::Config("per_class must be >= 1".into()));
        }
        self.feature_config(FeatureVariant::Nif).validate()?;
        let per_episode = self.feature_config(FeatureVariant::Nif).window_count(self.episode.samples());
        if per_episode == 0 {
            return Err(DatasetError::Config(format!(
                "episode of {} samples yields no window of length {}",
                self.episode.samples(),
                self.window_len
            )));
        }
        Ok(())
    }

    /// Episodes each label needs to reach `per_class` windows.
    pub fn episodes_per_class(&self) -> usize {
        let per_episode = self.feature_config(FeatureVariant::Nif).window_count(self.episode.samples());
        self.per_class.div_ceil(per_episode.max(1))
    }
}

fn config_hash(cfg: &GenConfig, domain_cfg: &DomainConfig, domain: Domain, variant: FeatureVariant) -> String {
    let v = serde_json::json!({
        "gen": cfg,
        "domain_config": domain_cfg,
        "domain": domain,
        "variant": variant,
    });
    container::sha256_hex(v.to_string().as_bytes())[..16].to_string()
}

/// Flies every (label, episode) pair and returns one dataset per variant,
/// each holding exactly `per_class` windows of every label.
pub fn generate(
    cfg: &GenConfig,
    domain_cfg: &DomainConfig,
    domain: Domain,
    variants: &[FeatureVariant],
    seed: u64,
    exec: Exec,
) -> Result<Vec<Dataset>, DatasetError> {
    cfg.validate()?;
    let eps = cfg.episodes_per_class();
    let jobs: Vec<(u8, usize)> = (1..=NUM_CLASSES as u8).flat_map(|l| (0..eps).map(move |k| (l, k))).collect();
    let logs = exec.try_map(&jobs, |&(label, k)| -> Result<FlightLog, DatasetError> {
        let s = derive_seed3(seed, label as u64, k as u64);
        let fault = FaultSpec::with_efficiency(label, cfg.fault_efficiency, cfg.fault_efficiency)
            .map_err(|source| DatasetError::Episode { label, seed: s, source })?;
        fly_episode(&cfg.quad, &fault, domain_cfg, domain, &cfg.gains, &cfg.episode, s)
            .map_err(|source| DatasetError::Episode { label, seed: s, source })
    })?;

    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let fc = cfg.feature_config(variant);
        let mut windows = Vec::with_capacity(cfg.per_class * NUM_CLASSES);
        for per_label in logs.chunks(eps) {
            let mut got = Vec::new();
            for log in per_label {
                got.extend(build_windows(log, &fc)?);
                if got.len() >= cfg.per_class {
                    break;
                }
            }
            if got.len() < cfg.per_class {
                return Err(DatasetError::Config(format!(
                    "label {} produced {} windows, {} requested",
                    per_label[0].label,
                    got.len(),
                    cfg.per_class
                )));
            }
            got.truncate(cfg.per_class);
            windows.extend(got);
        }
        let mut ds = Dataset::from_windows(variant, domain, &windows)?;
        ds.config_hash = config_hash(cfg, domain_cfg, domain, variant);
        ds.seed = seed;
        out.push(ds);
    }
    Ok(out)
}

/// Flies a healthy target-domain calibration episode and estimates the
/// unbalanced-ratio model from it.
pub fn calibrate(
    cfg: &GenConfig,
    target: &DomainConfig,
    calibration: &EpisodeSpec,
    seed: u64,
) -> Result<(UnbalanceModel, FlightLog), DatasetError> {
    let log = fly_episode(
        &cfg.quad,
        &FaultSpec::healthy(),
        target,
        Domain::Target,
        &cfg.gains,
        calibration,
        derive_seed(seed, 0xCA1),
    )
    .map_err(DatasetError::Calibration)?;
    let model = estimate_unbalance(&log).map_err(DatasetError::Calibration)?;
    Ok((model, log))
}

/// A mini-batch copied out of a dataset; labels are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-major `len x 5` one-hot targets.
    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.len() * NUM_CLASSES];
        for (i, &l) in self.labels.iter().enumerate() {
            v[i * NUM_CLASSES + l as usize - 1] = 1.0;
        }
        v
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize - 1).collect()
    }
}

/// Seeded permutation of `0..n` cut into consecutive batches; the last one
/// may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::Config("batch_size must be >= 1".into()));
    }
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(shuffle_seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn gather(ds: &Dataset, indices: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(indices.len() * ds.sample_len());
    for &i in indices {
        data.extend_from_slice(ds.sample(i));
    }
    Batch {
        indices: indices.to_vec(),
        data,
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
    }
}

/// One epoch of shuffled batches.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<impl Iterator<Item = Batch> + '_, DatasetError> {
    let order = batch_indices(ds.len(), batch_size, shuffle_seed)?;
    Ok(order.into_iter().map(move |b| gather(ds, &b)))
}
