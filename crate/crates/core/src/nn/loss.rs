//! Softmax, cross-entropy and maximum mean discrepancy with gradients.
//! Scalar losses are accumulated in f64.

use serde::{Deserialize, Serialize};

use super::real::Real;
use super::NnError;

const LOG_FLOOR: f64 = 1e-12;

/// Max-shifted softmax of one logit vector, evaluated in f64.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().map(|z| z.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| F::of(v / s)).collect()
}

/// `-sum p log q` with the logarithm clamped at 1e-12.
pub fn cross_entropy<F: Real>(p: &[F], q: &[F]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| -pi.as_f64() * qi.as_f64().max(LOG_FLOOR).ln())
        .sum()
}

/// Mean cross-entropy of `n` rows of `k` logits against 0-based class
/// indices, and its gradient with respect to the logits, `(q - p) / n`.
pub fn softmax_cross_entropy<F: Real>(logits: &[F], labels: &[usize], k: usize) -> Result<(f64, Vec<F>), NnError> {
    let n = labels.len();
    if logits.len() != n * k {
        return Err(NnError::Shape(format!("{} logits for {n} rows of {k}", logits.len())));
    }
    if n == 0 {
        return Err(NnError::Empty("cross-entropy batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    let inv = F::of(1.0 / n as f64);
    for (row, &y) in logits.chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(NnError::Config(format!("class index {y} >= {k}")));
        }
        let q = softmax(row);
        loss += -q[y].as_f64().max(LOG_FLOOR).ln();
        for (j, qj) in q.into_iter().enumerate() {
            let p = if j == y { F::one() } else { F::zero() };
            grad.push((qj - p) * inv);
        }
    }
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum MmdKernel {
    /// Squared distance of feature means.
    #[default]
    Linear,
    /// Unbiased Gaussian-kernel estimate. `bandwidth = None` selects the
    /// median pairwise distance of the pooled batch, held constant for the
    /// gradient.
    Rbf { bandwidth: Option<f64> },
}

/// Value and per-row gradients of an MMD estimate between `n_s` source rows
/// and `n_t` target rows of width `d`.
pub struct MmdOut<F> {
    pub value: f64,
    pub grad_source: Vec<F>,
    pub grad_target: Vec<F>,
}

fn check_sides<F>(fs: &[F], n_s: usize, ft: &[F], n_t: usize, d: usize, min: usize) -> Result<(), NnError> {
    if n_s < min || n_t < min {
        return Err(NnError::Empty(format!(
            "MMD needs at least {min} rows per side, got {n_s} and {n_t}"
        )));
    }
    if fs.len() != n_s * d || ft.len() != n_t * d {
        return Err(NnError::Shape(format!(
            "MMD feature buffers {} and {} do not match {n_s}x{d} and {n_t}x{d}",
            fs.len(),
            ft.len()
        )));
    }
    Ok(())
}

fn mean_rows<F: Real>(x: &[F], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    m
}

/// `||mean_s - mean_t||^2`.
pub fn mmd_linear<F: Real>(fs: &[F], n_s: usize, ft: &[F], n_t: usize, d: usize) -> Result<MmdOut<F>, NnError> {
    check_sides(fs, n_s, ft, n_t, d, 1)?;
    let ms = mean_rows(fs, n_s, d);
    let mt = mean_rows(ft, n_t, d);
    let diff: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|v| v * v).sum();
    let gs: Vec<F> = diff.iter().map(|v| F::of(2.0 * v / n_s as f64)).collect();
    let gt: Vec<F> = diff.iter().map(|v| F::of(-2.0 * v / n_t as f64)).collect();
    Ok(MmdOut {
        value,
        grad_source: gs.iter().copied().cycle().take(n_s * d).collect(),
        grad_target: gt.iter().copied().cycle().take(n_t * d).collect(),
    })
}

fn sq_dist<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

fn median_bandwidth<F: Real>(rows: &[&[F]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.get(d.len() / 2).copied().unwrap_or(1.0);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased Gaussian-kernel MMD estimate, `k(x, y) = exp(-|x-y|^2 / 2s^2)`.
pub fn mmd_rbf<F: Real>(
    fs: &[F],
    n_s: usize,
    ft: &[F],
    n_t: usize,
    d: usize,
    bandwidth: Option<f64>,
) -> Result<MmdOut<F>, NnError> {
    check_sides(fs, n_s, ft, n_t, d, 2)?;
    let s: Vec<&[F]> = fs.chunks_exact(d).collect();
    let t: Vec<&[F]> = ft.chunks_exact(d).collect();
    let sigma = match bandwidth {
        Some(b) if b.is_finite() && b > 0.0 => b,
        Some(b) => return Err(NnError::Config(format!("RBF bandwidth {b} must be > 0"))),
        None => median_bandwidth(&[s.clone(), t.clone()].concat()),
    };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut gs = vec![0.0f64; n_s * d];
    let mut gt = vec![0.0f64; n_t * d];
    let mut value = 0.0;

    // Within-set terms: each unordered pair appears twice in the sum.
    let within = |x: &[&[F]], g: &mut [f64], value: &mut f64| {
        let n = x.len();
        let c = 1.0 / (n * (n - 1)) as f64;
        for i in 0..n {
            for j in i + 1..n {
                let k = (-sq_dist(x[i], x[j]) * inv2s2).exp();
                *value += 2.0 * c * k;
                for a in 0..d {
                    let diff = x[i][a].as_f64() - x[j][a].as_f64();
                    let v = -2.0 * c * k * diff * inv_s2;
                    g[i * d + a] += v;
                    g[j * d + a] -= v;
                }
            }
        }
    };
    within(&s, &mut gs, &mut value);
    within(&t, &mut gt, &mut value);

    let c = 2.0 / (n_s * n_t) as f64;
    for i in 0..n_s {
        for j in 0..n_t {
            let k = (-sq_dist(s[i], t[j]) * inv2s2).exp();
            value -= c * k;
            for a in 0..d {
                let diff = s[i][a].as_f64() - t[j][a].as_f64();
                let v = c * k * diff * inv_s2;
                gs[i * d + a] += v;
                gt[j * d + a] -= v;
            }
        }
    }
    Ok(MmdOut {
        value,
        grad_source: gs.into_iter().map(F::of).collect(),
        grad_target: gt.into_iter().map(F::of).collect(),
    })
}

pub fn mmd<F: Real>(kernel: MmdKernel, fs: &[F], n_s: usize, ft: &[F], n_t: usize, d: usize) -> Result<MmdOut<F>, NnError> {
    match kernel {
        MmdKernel::Linear => mmd_linear(fs, n_s, ft, n_t, d),
        MmdKernel::Rbf { bandwidth } => mmd_rbf(fs, n_s, ft, n_t, d, bandwidth),
    }
}
