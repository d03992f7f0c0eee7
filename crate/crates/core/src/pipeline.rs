//! Training, evaluation, repeated experiment suites and feature export.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::container::{self, BlobInfo, ContainerError, FORMAT_VERSION};
use crate::dataset::{self, batch_indices, gather, Dataset, DatasetError};
use crate::exec::Exec;
use crate::features::{FeatureError, FeatureVariant, Normalizer};
use crate::nn::{
    adam_step, features, load_checkpoint, loss_and_grad, model_forward, save_checkpoint, AdamState, ArchConfig,
    CeBatch, LossSpec, MmdBatch, MmdKernel, Mode, ModelParams, NnError,
};
use crate::quadsim::{Domain, DomainConfig, UnbalanceModel, NUM_CLASSES};
use crate::seed::{derive_seed, derive_seed3, rng_from};

/// Minimum decrease of the epoch loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_DA_SOURCE: u64 = 3;
const STREAM_DA_TARGET: u64 = 4;
const STREAM_INIT: u64 = 5;

const EVAL_BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{suite} run {run}: {source}")]
    Run {
        suite: String,
        run: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Innermost error, looking through per-run wrappers.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Run { source, .. } => source.root(),
            e => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    /// Weight of the MMD term.
    pub lambda: f64,
    pub da_enabled: bool,
    /// Rows per side of each MMD mini-batch.
    pub mmd_batch: usize,
    pub kernel: MmdKernel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 5e-4,
            max_epochs: 50,
            patience: 10,
            dropout: 0.1,
            lambda: 1e4,
            da_enabled: false,
            mmd_batch: 64,
            kernel: MmdKernel::Linear,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.mmd_batch == 0 {
            return bad("batch_size, max_epochs, patience and mmd_batch must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Patience rule over epoch losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Feeds the loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Progress {
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return Progress::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Progress::Stop
        } else {
            Progress::Stale
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    /// Unweighted MMD, 0 without domain adaptation.
    pub mmd: f64,
    pub total: f64,
    /// Distance between mean dense1 features of source-healthy and
    /// target-healthy windows after this epoch.
    pub healthy_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Row = true label, column = predicted label.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: FeatureVariant,
    pub da_enabled: bool,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub initial_gap: Option<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub source: Evaluation,
    pub target: Option<Evaluation>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn best(&self) -> &EpochStats {
        &self.epochs[self.best_epoch - 1]
    }
}

fn check_shape(p: &ModelParams<f32>, ds: &Dataset) -> Result<(), PipelineError> {
    let a = p.arch();
    if ds.channels != a.in_channels || ds.window_len != a.window_len {
        return Err(NnError::Shape(format!(
            "dataset windows are {}x{}, model expects {}x{}",
            ds.channels, ds.window_len, a.in_channels, a.window_len
        ))
        .into());
    }
    Ok(())
}

/// Eval-mode logits argmax over every window.
pub fn evaluate(p: &ModelParams<f32>, ds: &Dataset, exec: Exec) -> Result<Evaluation, PipelineError> {
    check_shape(p, ds)?;
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let per = ds.sample_len();
    let k = p.arch().classes;
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BLOCK).min(ds.len());
        let out = model_forward(p, &ds.data()[start * per..end * per], end - start, Mode::Eval, 0.0, 0, exec)?;
        for (i, row) in out.logits.chunks(k).enumerate() {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            confusion[ds.labels()[start + i] as usize - 1][best] += 1;
        }
        start = end;
    }
    let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        count: ds.len(),
        correct,
        accuracy: correct as f64 / ds.len() as f64,
        confusion,
    })
}

fn mean_features(p: &ModelParams<f32>, ds: &Dataset, exec: Exec) -> Result<Vec<f64>, PipelineError> {
    let h = p.arch().hidden;
    let f = features(p, ds.data(), ds.len(), exec)?;
    let mut m = vec![0.0f64; h];
    for row in f.chunks(h) {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= ds.len() as f64);
    Ok(m)
}

/// Euclidean distance between the mean dense1 features of two datasets.
pub fn feature_gap(p: &ModelParams<f32>, a: &Dataset, b: &Dataset, exec: Exec) -> Result<f64, PipelineError> {
    if a.is_empty() || b.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let ma = mean_features(p, a, exec)?;
    let mb = mean_features(p, b, exec)?;
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Trains on `source` with optional healthy-only alignment to
/// `target_healthy`, returning the parameters of the lowest-loss epoch.
pub fn train(
    source: &Dataset,
    target_healthy: &Dataset,
    cfg: &TrainConfig,
    init: ModelParams<f32>,
    exec: Exec,
) -> Result<(ModelParams<f32>, RunReport), PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    check_shape(&init, source)?;
    if source.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    if source.domain != Domain::Source {
        return Err(PipelineError::Config("training set must come from the source domain".into()));
    }
    if target_healthy.labels().iter().any(|&l| l != 1) {
        return Err(PipelineError::Config("target alignment set contains non-healthy windows".into()));
    }
    if !target_healthy.is_empty() {
        check_shape(&init, target_healthy)?;
        if target_healthy.normalizer != source.normalizer {
            return Err(PipelineError::Config("source and target are not normalized alike".into()));
        }
    }
    let source_healthy = source.healthy_subset();
    if cfg.da_enabled {
        if target_healthy.is_empty() {
            return Err(PipelineError::Config("domain adaptation needs target-healthy windows".into()));
        }
        if source_healthy.is_empty() {
            return Err(PipelineError::Config("domain adaptation needs source-healthy windows".into()));
        }
    }
    let track_gap = !target_healthy.is_empty() && !source_healthy.is_empty();
    let gap = |p: &ModelParams<f32>| -> Result<Option<f64>, PipelineError> {
        if track_gap {
            Ok(Some(feature_gap(p, &source_healthy, target_healthy, exec)?))
        } else {
            Ok(None)
        }
    };

    let spec = LossSpec {
        lambda: if cfg.da_enabled { cfg.lambda } else { 0.0 },
        kernel: cfg.kernel,
        dropout: cfg.dropout,
    };
    let n_s = cfg.mmd_batch.min(source_healthy.len());
    let n_t = cfg.mmd_batch.min(target_healthy.len());

    let mut params = init;
    let initial_gap = gap(&params)?;
    let mut adam = AdamState::for_params(&params);
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut step = 0u64;

    for epoch in 1..=cfg.max_epochs {
        let order = batch_indices(source.len(), cfg.batch_size, derive_seed3(cfg.seed, STREAM_SHUFFLE, epoch as u64))?;
        let mut rng_s = rng_from(derive_seed3(cfg.seed, STREAM_DA_SOURCE, epoch as u64));
        let mut rng_t = rng_from(derive_seed3(cfg.seed, STREAM_DA_TARGET, epoch as u64));
        let (mut ce_sum, mut mmd_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for idx in &order {
            let batch = gather(source, idx);
            let labels = batch.class_indices();
            let ce = CeBatch {
                x: &batch.data,
                labels: &labels,
            };
            let da = if cfg.da_enabled {
                let si = sample(&mut rng_s, source_healthy.len(), n_s).into_vec();
                let ti = sample(&mut rng_t, target_healthy.len(), n_t).into_vec();
                Some((gather(&source_healthy, &si).data, gather(target_healthy, &ti).data))
            } else {
                None
            };
            let mmd_batch = da.as_ref().map(|(s, t)| MmdBatch {
                source: s,
                n_source: n_s,
                target: t,
                n_target: n_t,
            });
            let (parts, grads) =
                loss_and_grad(&params, Some(ce), mmd_batch, &spec, derive_seed3(cfg.seed, STREAM_DROPOUT, step), exec)?;
            if !parts.total.is_finite() {
                return Err(PipelineError::Diverged {
                    epoch,
                    loss: parts.total,
                });
            }
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            ce_sum += parts.ce;
            mmd_sum += parts.mmd;
            total_sum += parts.total;
            step += 1;
        }
        let nb = order.len() as f64;
        let stats = EpochStats {
            epoch,
            ce: ce_sum / nb,
            mmd: mmd_sum / nb,
            total: total_sum / nb,
            healthy_gap: gap(&params)?,
        };
        debug!(
            "epoch {epoch}: ce {:.5} mmd {:.3e} total {:.5} gap {:?}",
            stats.ce, stats.mmd, stats.total, stats.healthy_gap
        );
        let progress = stopper.observe(epoch, stats.total);
        epochs.push(stats);
        match progress {
            Progress::Improved => best.clone_from(&params),
            Progress::Stale => {}
            Progress::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }

    let source_eval = evaluate(&best, source, exec)?;
    let report = RunReport {
        variant: source.variant,
        da_enabled: cfg.da_enabled,
        seed: cfg.seed,
        epochs,
        initial_gap,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        source: source_eval,
        target: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((best, report))
}

/// The three compared configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    #[serde(rename = "CF")]
    Cf,
    #[serde(rename = "NIF")]
    Nif,
    #[serde(rename = "NIF+DA")]
    NifDa,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Cf, Suite::Nif, Suite::NifDa];

    pub fn variant(self) -> FeatureVariant {
        match self {
            Suite::Cf => FeatureVariant::Cf,
            Suite::Nif | Suite::NifDa => FeatureVariant::Nif,
        }
    }

    pub fn da(self) -> bool {
        self == Suite::NifDa
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Cf => "CF",
            Suite::Nif => "NIF",
            Suite::NifDa => "NIF+DA",
        }
    }
}

/// Raw source and target windows of one feature variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantData {
    pub source: Dataset,
    pub target: Dataset,
}

impl VariantData {
    pub fn new(source: Dataset, target: Dataset) -> Result<Self, PipelineError> {
        if source.variant != target.variant || source.window_len != target.window_len {
            return Err(PipelineError::Config("source and target variants differ".into()));
        }
        if source.domain != Domain::Source || target.domain != Domain::Target {
            return Err(PipelineError::Config("domain tags do not match their roles".into()));
        }
        if source.normalizer.is_some() || target.normalizer.is_some() {
            return Err(PipelineError::Config("expected raw, unnormalized datasets".into()));
        }
        Ok(Self { source, target })
    }

    pub fn variant(&self) -> FeatureVariant {
        self.source.variant
    }

    /// Source-fitted normalizer, normalized source, normalized target.
    pub fn prepare(&self) -> Result<(Normalizer, Dataset, Dataset), PipelineError> {
        let norm = self.source.fit_normalizer()?;
        let s = self.source.normalized(&norm)?;
        let t = self.target.normalized(&norm)?;
        Ok((norm, s, t))
    }
}

/// Everything an experiment trains and tests on.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub variants: Vec<VariantData>,
    /// Unbalance model installed in the source simulator.
    pub unbalance: Option<UnbalanceModel>,
}

impl DatasetBundle {
    pub fn get(&self, v: FeatureVariant) -> Option<&VariantData> {
        self.variants.iter().find(|d| d.variant() == v)
    }
}

/// Source domain configuration after calibration against the target.
pub fn calibrated_source(cfg: &RunConfig) -> Result<DomainConfig, PipelineError> {
    let mut source = cfg.source.clone();
    if cfg.calibrate_source {
        let (model, _) = dataset::calibrate(&cfg.gen_config(Domain::Target), &cfg.target, &cfg.calibration, cfg.seed)?;
        info!("estimated unbalance rho {:?} omega_ref_max {:.2}", model.rho, model.omega_ref_max);
        source.unbalance = Some(model);
    }
    Ok(source)
}

/// Generation seed of each domain's dataset.
pub fn domain_seed(seed: u64, domain: Domain) -> u64 {
    match domain {
        Domain::Source => derive_seed(seed, 10),
        Domain::Target => derive_seed(seed, 11),
    }
}

/// Calibrates, then generates source and target datasets of every variant.
pub fn prepare_datasets(
    cfg: &RunConfig,
    variants: &[FeatureVariant],
    exec: Exec,
) -> Result<DatasetBundle, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    let source_cfg = calibrated_source(cfg)?;
    let src = dataset::generate(&cfg.gen_config(Domain::Source), &source_cfg, Domain::Source, variants, domain_seed(cfg.seed, Domain::Source), exec)?;
    let tgt = dataset::generate(&cfg.gen_config(Domain::Target), &cfg.target, Domain::Target, variants, domain_seed(cfg.seed, Domain::Target), exec)?;
    let variants = src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| VariantData::new(s, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetBundle {
        variants,
        unbalance: source_cfg.unbalance,
    })
}

/// A trained model together with the normalizer its inputs need.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub normalizer: Normalizer,
    pub report: RunReport,
}

/// Normalizes, trains from a seeded initialisation and scores the target.
pub fn train_variant(
    data: &VariantData,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainedModel, PipelineError> {
    let (normalizer, source, target) = data.prepare()?;
    let init = ModelParams::init(arch, derive_seed(cfg.seed, STREAM_INIT))?;
    let (params, mut report) = train(&source, &target.healthy_subset(), cfg, init, exec)?;
    if !target.is_empty() {
        report.target = Some(evaluate(&params, &target, exec)?);
    }
    Ok(TrainedModel {
        params,
        normalizer,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub suite: Suite,
    pub run: usize,
    pub seed: u64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub first_mmd: f64,
    pub last_mmd: f64,
    pub first_gap: Option<f64>,
    pub last_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub suite: Suite,
    pub domain: Domain,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub format_version: u32,
    pub per_class: usize,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl ExperimentSummary {
    pub fn from_records(per_class: usize, records: Vec<RunRecord>) -> Self {
        let mut aggregates = Vec::new();
        for suite in Suite::ALL {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.suite == suite).collect();
            if rs.is_empty() {
                continue;
            }
            for domain in [Domain::Source, Domain::Target] {
                let v: Vec<f64> = rs
                    .iter()
                    .map(|r| match domain {
                        Domain::Source => r.source_accuracy,
                        Domain::Target => r.target_accuracy,
                    })
                    .collect();
                let (mean, std) = mean_std(&v);
                aggregates.push(Aggregate {
                    suite,
                    domain,
                    runs: v.len(),
                    mean,
                    std,
                });
            }
        }
        Self {
            format_version: FORMAT_VERSION,
            per_class,
            records,
            aggregates,
        }
    }

    pub fn aggregate(&self, suite: Suite, domain: Domain) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.suite == suite && a.domain == domain)
    }

    /// Fixed-width table, one line per suite.
    pub fn table(&self) -> String {
        let mut s = String::from("suite    source mean  source std  target mean  target std  runs\n");
        for suite in Suite::ALL {
            if let (Some(a), Some(b)) = (self.aggregate(suite, Domain::Source), self.aggregate(suite, Domain::Target)) {
                s.push_str(&format!(
                    "{:<8} {:>11.4} {:>11.4} {:>12.4} {:>11.4} {:>5}\n",
                    suite.as_str(),
                    a.mean,
                    a.std,
                    b.mean,
                    b.std,
                    a.runs
                ));
            }
        }
        s
    }
}

/// Seed of run `r`; shared by every suite so runs are paired.
pub fn run_seed(base: u64, r: usize) -> u64 {
    derive_seed(base, 1000 + r as u64)
}

/// Trains `cfg.runs` independently seeded models per suite. Runs execute
/// through `exec`; each run trains sequentially.
pub fn run_experiment(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    suites: &[Suite],
    exec: Exec,
) -> Result<(ExperimentSummary, Vec<(Suite, usize, TrainedModel)>), PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    for s in suites {
        if bundle.get(s.variant()).is_none() {
            return Err(PipelineError::Config(format!("no {} datasets for suite {}", s.variant().as_str(), s.as_str())));
        }
    }
    let jobs: Vec<(Suite, usize)> = suites.iter().flat_map(|&s| (0..cfg.runs).map(move |r| (s, r))).collect();
    let results = exec.try_map(&jobs, |&(suite, run)| {
        let data = bundle.get(suite.variant()).expect("checked above");
        let train_cfg = TrainConfig {
            da_enabled: suite.da(),
            seed: run_seed(cfg.train.seed, run),
            ..cfg.train.clone()
        };
        let m = train_variant(data, &cfg.arch(suite.variant()), &train_cfg, Exec::Sequential).map_err(|e| {
            PipelineError::Run {
                suite: suite.as_str().into(),
                run,
                source: Box::new(e),
            }
        })?;
        info!(
            "{} run {run}: source {:.4} target {:.4} ({} epochs, {:.1}s)",
            suite.as_str(),
            m.report.source.accuracy,
            m.report.target.as_ref().map_or(f64::NAN, |t| t.accuracy),
            m.report.epochs.len(),
            m.report.wall_time_s
        );
        Ok::<_, PipelineError>((suite, run, m))
    })?;
    let records = results
        .iter()
        .map(|(suite, run, m)| {
            let r = &m.report;
            RunRecord {
                suite: *suite,
                run: *run,
                seed: r.seed,
                source_accuracy: r.source.accuracy,
                target_accuracy: r.target.as_ref().map_or(0.0, |t| t.accuracy),
                best_epoch: r.best_epoch,
                epochs_run: r.epochs.len(),
                first_mmd: r.epochs[0].mmd,
                last_mmd: r.epochs.last().expect("at least one epoch").mmd,
                first_gap: r.epochs[0].healthy_gap,
                last_gap: r.epochs.last().expect("at least one epoch").healthy_gap,
            }
        })
        .collect();
    Ok((ExperimentSummary::from_records(cfg.per_class, records), results))
}

pub fn write_summary(summary: &ExperimentSummary, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        container::create_dir(dir)?;
    }
    container::write_manifest(path, summary)?;
    Ok(())
}

/// Metadata stored alongside checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub variant: FeatureVariant,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
}

pub fn save_model(dir: &Path, m: &TrainedModel, train: &TrainConfig) -> Result<(), PipelineError> {
    let meta = ModelMeta {
        variant: m.report.variant,
        normalizer: m.normalizer.clone(),
        train: train.clone(),
        source_accuracy: m.report.source.accuracy,
        target_accuracy: m.report.target.as_ref().map(|t| t.accuracy),
    };
    let value = serde_json::to_value(&meta).map_err(|e| PipelineError::Config(e.to_string()))?;
    save_checkpoint(dir, &m.params, train.seed, value)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(ModelParams<f32>, ModelMeta), PipelineError> {
    let (params, manifest) = load_checkpoint(dir)?;
    let meta: ModelMeta = serde_json::from_value(manifest.meta).map_err(|e| {
        PipelineError::Container(ContainerError::Manifest {
            path: dir.join(crate::nn::checkpoint::MANIFEST),
            msg: format!("meta: {e}"),
        })
    })?;
    Ok((params, meta))
}

pub const FEATURES_MANIFEST: &str = "features.json";
pub const FEATURES_BLOB: &str = "features.f32";
pub const FEATURE_LABELS: &str = "labels.u8";
pub const FEATURE_DOMAINS: &str = "domains.u8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub format_version: u32,
    pub kind: String,
    pub rows: usize,
    pub dim: usize,
    pub variant: FeatureVariant,
    /// Byte values used in `domains.u8`.
    pub domain_codes: Vec<(Domain, u8)>,
    pub features: BlobInfo,
    pub labels: BlobInfo,
    pub domains: BlobInfo,
}

/// Row-major `rows x dim` dense1 features with per-row label and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub domains: Vec<Domain>,
}

fn domain_code(d: Domain) -> u8 {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Eval-mode dense1 features of every window of every dataset, in order.
pub fn extract_features(p: &ModelParams<f32>, datasets: &[&Dataset], exec: Exec) -> Result<FeatureMatrix, PipelineError> {
    let dim = p.arch().hidden;
    let mut m = FeatureMatrix {
        rows: 0,
        dim,
        data: Vec::new(),
        labels: Vec::new(),
        domains: Vec::new(),
    };
    for ds in datasets {
        check_shape(p, ds)?;
        if ds.is_empty() {
            continue;
        }
        m.data.extend(features(p, ds.data(), ds.len(), exec)?);
        m.labels.extend_from_slice(ds.labels());
        m.domains.extend(std::iter::repeat(ds.domain).take(ds.len()));
        m.rows += ds.len();
    }
    Ok(m)
}

pub fn export_features(
    p: &ModelParams<f32>,
    datasets: &[&Dataset],
    dir: &Path,
    exec: Exec,
) -> Result<FeatureManifest, PipelineError> {
    let variant = datasets
        .first()
        .map(|d| d.variant)
        .ok_or_else(|| PipelineError::Config("nothing to export".into()))?;
    let m = extract_features(p, datasets, exec)?;
    container::create_dir(dir)?;
    let codes: Vec<u8> = m.domains.iter().map(|&d| domain_code(d)).collect();
    let manifest = FeatureManifest {
        format_version: FORMAT_VERSION,
        kind: "features".into(),
        rows: m.rows,
        dim: m.dim,
        variant,
        domain_codes: vec![(Domain::Source, 0), (Domain::Target, 1)],
        features: container::write_blob(dir, FEATURES_BLOB, &container::f32_to_le(&m.data))?,
        labels: container::write_blob(dir, FEATURE_LABELS, &m.labels)?,
        domains: container::write_blob(dir, FEATURE_DOMAINS, &codes)?,
    };
    container::write_manifest(&dir.join(FEATURES_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_features(dir: &Path) -> Result<FeatureMatrix, PipelineError> {
    let path = dir.join(FEATURES_MANIFEST);
    let m: FeatureManifest = container::read_manifest(&path)?;
    if m.features.bytes != (m.rows * m.dim * 4) as u64 || m.labels.bytes != m.rows as u64 || m.domains.bytes != m.rows as u64 {
        return Err(ContainerError::CountMismatch(format!("{}: blob sizes disagree with {} rows", path.display(), m.rows)).into());
    }
    let data = container::le_to_f32(&container::read_blob(dir, &m.features)?);
    let labels = container::read_blob(dir, &m.labels)?;
    let domains = container::read_blob(dir, &m.domains)?
        .into_iter()
        .map(|c| match c {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            x => Err(ContainerError::Manifest {
                path: path.clone(),
                msg: format!("unknown domain code {x}"),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureMatrix {
        rows: m.rows,
        dim: m.dim,
        data,
        labels,
        domains,
    })
}
