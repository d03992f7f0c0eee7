//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use serde::Serialize;

use super::model::{evaluate, CeBatch, LossSpec, MmdBatch, ModelParams};
use super::real::Real;
use super::NnError;
use crate::exec::Exec;
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub probes_per_tensor: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn double() -> Self {
        Self {
            probes_per_tensor: 6,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }

    pub fn single() -> Self {
        Self {
            probes_per_tensor: 6,
            h: 1e-3,
            tolerance: 1e-2,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_layer: String,
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.layers.iter().map(|l| l.checked).sum()
    }
}

/// Checks the gradient computed by the model against central differences
/// of the same loss. Dropout stays on but is frozen by `dropout_seed`.
pub fn grad_check<F: Real>(
    p: &ModelParams<F>,
    ce: Option<CeBatch<'_, F>>,
    mmd: Option<MmdBatch<'_, F>>,
    spec: &LossSpec,
    dropout_seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError> {
    let e = evaluate(p, ce, mmd, spec, dropout_seed, Exec::Sequential, true)?;
    grad_check_with(p, &e.grads.expect("gradient requested"), ce, mmd, spec, dropout_seed, cfg)
}

/// As [`grad_check`] but against caller-supplied analytic gradients.
/// Probes whose perturbation flips a ReLU or pooling decision are skipped.
pub fn grad_check_with<F: Real>(
    p: &ModelParams<F>,
    analytic: &ModelParams<F>,
    ce: Option<CeBatch<'_, F>>,
    mmd: Option<MmdBatch<'_, F>>,
    spec: &LossSpec,
    dropout_seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError> {
    if analytic.arch() != p.arch() {
        return Err(NnError::Shape("gradient and parameter architectures differ".into()));
    }
    let loss = |q: &ModelParams<F>| evaluate(q, ce, mmd, spec, dropout_seed, Exec::Sequential, false);
    let base_sig = loss(p)?.signature;
    let mut layers = Vec::new();
    let mut work = p.clone();
    for (ti, name) in p.names().iter().enumerate() {
        let len = p.tensors()[ti].len();
        let k = cfg.probes_per_tensor.min(len);
        let mut rng = rng_from(derive_seed(cfg.seed, ti as u64));
        let mut lc = LayerCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in sample(&mut rng, len, k).into_vec() {
            let orig = p.tensors()[ti].data()[idx];
            work.tensors_mut()[ti].data_mut()[idx] = F::of(orig.as_f64() + cfg.h);
            let plus = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[idx] = F::of(orig.as_f64() - cfg.h);
            let minus = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[idx] = orig;
            if plus.signature != base_sig || minus.signature != base_sig {
                lc.skipped += 1;
                continue;
            }
            let num = (plus.parts.total - minus.parts.total) / (2.0 * cfg.h);
            let a = analytic.tensors()[ti].data()[idx].as_f64();
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(cfg.floor);
            lc.max_rel_error = lc.max_rel_error.max(rel);
            lc.checked += 1;
        }
        if lc.max_rel_error > cfg.tolerance || lc.max_rel_error.is_nan() {
            return Err(NnError::GradCheck {
                layer: name.clone(),
                rel_error: lc.max_rel_error,
                tolerance: cfg.tolerance,
            });
        }
        layers.push(lc);
    }
    let worst = layers
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one layer");
    Ok(GradCheckReport {
        max_rel_error: worst.max_rel_error,
        worst_layer: worst.name.clone(),
        tolerance: cfg.tolerance,
        layers,
    })
}
