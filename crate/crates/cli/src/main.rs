//! `qfd`: generate datasets, train, evaluate, run experiment suites and
//! export features.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or simulation
//! error, 4 training error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use qfd_core::config::RunConfig;
use qfd_core::container::ContainerError;
use qfd_core::dataset::{self, Dataset, DatasetError};
use qfd_core::exec::{self, Exec};
use qfd_core::features::FeatureVariant;
use qfd_core::nn::NnError;
use qfd_core::pipeline::{self, PipelineError, Suite, TrainConfig, VariantData};
use qfd_core::quadsim::{Domain, SimError};
use serde::Serialize;
use thiserror::Error;

mod settings;

use settings::{load_config, write_resolved, ConfigError};

#[derive(Parser)]
#[command(name = "qfd", version, about = "Quadrotor propeller fault diagnosis experiments")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; keys override the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: standard, reduced or tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    Nif,
    Cf,
}

impl From<VariantArg> for FeatureVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Nif => FeatureVariant::Nif,
            VariantArg::Cf => FeatureVariant::Cf,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset; the source domain is calibrated against a
    /// healthy target hover first.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "nif")]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a source dataset, optionally aligning to the
    /// healthy windows of a target dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Enable healthy-only MMD domain adaptation.
        #[arg(long)]
        da: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the evaluation as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the CF, NIF and NIF+DA suites with repeated seeds.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write dense1 features of one or more datasets.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; repeat to export several.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(e) => pipeline_code(e.root()),
        }
    }
}

fn sim_code(e: &SimError) -> u8 {
    match e {
        SimError::EpisodeDiverged { .. } | SimError::DegenerateLog(_) => 3,
        _ => 2,
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Dataset(d) => match d {
            DatasetError::Config(_) => 2,
            DatasetError::Episode { source, .. } | DatasetError::Calibration(source) => sim_code(source),
            _ => 3,
        },
        PipelineError::Feature(_) | PipelineError::Container(_) => 3,
        PipelineError::Nn(NnError::Shape(_)) | PipelineError::Nn(NnError::Container(_)) => 3,
        PipelineError::Nn(NnError::Config(_)) => 2,
        PipelineError::Nn(_) | PipelineError::Diverged { .. } | PipelineError::Run { .. } => 4,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    qfd_core::container::write_manifest(path, value).map_err(|e| CliError::Pipeline(e.into()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    qfd_core::container::create_dir(dir).map_err(|e: ContainerError| CliError::Pipeline(e.into()))
}

fn print_counts(ds: &Dataset) {
    let counts = ds.class_counts();
    println!(
        "{} {} windows: {} ({})",
        ds.domain.as_str(),
        ds.variant.as_str(),
        ds.len(),
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("label {}: {c}", i + 1))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

fn cmd_gen(cfg: &RunConfig, domain: DomainArg, variant: FeatureVariant, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let (domain, domain_cfg) = match domain {
        DomainArg::Target => (Domain::Target, cfg.target.clone()),
        DomainArg::Source => {
            let d = pipeline::calibrated_source(cfg)?;
            if let Some(u) = &d.unbalance {
                println!("unbalance rho {:?} omega_ref_max {:.3}", u.rho, u.omega_ref_max);
                write_json(&out.join("unbalance.json"), u)?;
            }
            (Domain::Source, d)
        }
    };
    let mut sets = dataset::generate(
        &cfg.gen_config(domain),
        &domain_cfg,
        domain,
        &[variant],
        pipeline::domain_seed(cfg.seed, domain),
        Exec::Parallel,
    )?;
    let ds = sets.remove(0);
    dataset::save(&ds, out)?;
    write_resolved(cfg, out).map_err(CliError::Config)?;
    print_counts(&ds);
    Ok(())
}

fn load_pair(source: &Path, target: Option<&Path>) -> Result<VariantData, CliError> {
    let s = dataset::load(source)?;
    let t = match target {
        Some(p) => dataset::load(p)?,
        None => Dataset::new(s.variant, Domain::Target, s.window_len, Vec::new(), Vec::new())?,
    };
    Ok(VariantData::new(s, t)?)
}

fn cmd_train(cfg: &RunConfig, source: &Path, target: Option<&Path>, da: bool, out: &Path) -> Result<(), CliError> {
    let data = load_pair(source, target)?;
    let train_cfg = TrainConfig {
        da_enabled: da,
        ..cfg.train.clone()
    };
    let arch = cfg.arch(data.variant());
    let m = pipeline::train_variant(&data, &arch, &train_cfg, Exec::Parallel)?;
    create_dir(out)?;
    pipeline::save_model(out, &m, &train_cfg)?;
    write_json(&out.join("report.json"), &m.report)?;
    write_resolved(cfg, out).map_err(CliError::Config)?;
    let r = &m.report;
    println!(
        "epochs {} (best {}), source accuracy {:.4}{}",
        r.epochs.len(),
        r.best_epoch,
        r.source.accuracy,
        r.target
            .as_ref()
            .map_or(String::new(), |t| format!(", target accuracy {:.4}", t.accuracy))
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (params, meta) = pipeline::load_model(checkpoint)?;
    let ds = dataset::load(data)?;
    if ds.variant != meta.variant {
        return Err(PipelineError::Nn(NnError::Shape(format!(
            "checkpoint expects {} windows, dataset holds {}",
            meta.variant.as_str(),
            ds.variant.as_str()
        )))
        .into());
    }
    let ds = ds.normalized(&meta.normalizer)?;
    let e = pipeline::evaluate(&params, &ds, Exec::Parallel)?;
    println!("accuracy {:.4} ({}/{})", e.accuracy, e.correct, e.count);
    for (i, row) in e.confusion.iter().enumerate() {
        println!("  true {}: {:?}", i + 1, row);
    }
    if let Some(p) = out {
        write_json(p, &e)?;
    }
    Ok(())
}

fn save_variant(out: &Path, vd: &VariantData) -> Result<(), CliError> {
    let v = vd.variant().as_str();
    dataset::save(&vd.source, &out.join(format!("source-{v}")))?;
    dataset::save(&vd.target, &out.join(format!("target-{v}")))?;
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_resolved(cfg, out).map_err(CliError::Config)?;
    let bundle = pipeline::prepare_datasets(cfg, &[FeatureVariant::Nif, FeatureVariant::Cf], Exec::Parallel)?;
    let data_dir = out.join("data");
    for vd in &bundle.variants {
        save_variant(&data_dir, vd)?;
        print_counts(&vd.source);
        print_counts(&vd.target);
    }
    if let Some(u) = &bundle.unbalance {
        write_json(&data_dir.join("unbalance.json"), u)?;
    }
    let (summary, runs) = pipeline::run_experiment(&bundle, cfg, &Suite::ALL, Exec::Parallel)?;
    for (suite, run, m) in &runs {
        let dir = out.join("runs").join(format!("{}-{run}", suite.as_str().replace('+', "-").to_lowercase()));
        let train_cfg = TrainConfig {
            da_enabled: suite.da(),
            seed: pipeline::run_seed(cfg.train.seed, *run),
            ..cfg.train.clone()
        };
        pipeline::save_model(&dir, m, &train_cfg)?;
        write_json(&dir.join("report.json"), &m.report)?;
    }
    pipeline::write_summary(&summary, &out.join("summary.json"))?;
    for r in &summary.records {
        println!(
            "{{\"suite\":\"{}\",\"run\":{},\"source\":{:.4},\"target\":{:.4}}}",
            r.suite.as_str(),
            r.run,
            r.source_accuracy,
            r.target_accuracy
        );
    }
    print!("{}", summary.table());
    Ok(())
}

fn cmd_export(checkpoint: &Path, data: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let (params, meta) = pipeline::load_model(checkpoint)?;
    let sets = data
        .iter()
        .map(|p| Ok(dataset::load(p)?.normalized(&meta.normalizer)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let refs: Vec<&Dataset> = sets.iter().collect();
    let m = pipeline::export_features(&params, &refs, out, Exec::Parallel)?;
    println!("wrote {} x {} features to {}", m.rows, m.dim, out.display());
    Ok(())
}

fn resolve(args: &ConfigArgs, runs: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(args.config.as_deref(), args.preset.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(n) = args.per_class {
        cfg.per_class = n;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.validate().map_err(ConfigError::Invalid)?;
    info!("resolved configuration:\n{}", settings::to_toml(&cfg)?);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Gen {
            cfg,
            domain,
            variant,
            out,
        } => cmd_gen(&resolve(&cfg, None)?, domain, variant.into(), &out),
        Command::Train {
            cfg,
            source,
            target,
            da,
            out,
        } => cmd_train(&resolve(&cfg, None)?, &source, target.as_deref(), da, &out),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Experiment { cfg, runs, out } => cmd_experiment(&resolve(&cfg, runs)?, &out),
        Command::ExportFeatures { checkpoint, data, out } => cmd_export(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("QFD_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        exec::init_threads(j);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
