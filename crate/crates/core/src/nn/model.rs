//! The 1-D DCNN: `conv_blocks` x (conv3 -> ReLU -> maxpool2), flatten,
//! dense1 -> ReLU -> dropout, dense2 -> ReLU -> dropout, linear output.
//!
//! Samples are processed in fixed chunks of [`CHUNK`] rows. Per-chunk
//! gradients are summed in chunk order, so results do not depend on the
//! execution mode or thread count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    check_rate, conv_backward, conv_forward, dense_backward, dense_forward, dropout_mask, maxpool_backward,
    maxpool_forward, relu_backward_inplace, relu_inplace, Mode, KERNEL,
};
use super::loss::{mmd, softmax_cross_entropy, MmdKernel};
use super::real::Real;
use super::tensor::Tensor;
use super::NnError;
use crate::exec::Exec;
use crate::seed::{derive_seed, rng_from};

pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub window_len: usize,
    pub filters: usize,
    pub conv_blocks: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ArchConfig {
    /// Four blocks of 64 filters, two dense layers of 128, five classes.
    pub fn standard(in_channels: usize, window_len: usize) -> Self {
        Self {
            in_channels,
            window_len,
            filters: 64,
            conv_blocks: 4,
            hidden: 128,
            classes: crate::quadsim::NUM_CLASSES,
        }
    }

    /// Sequence lengths along the chain: input, then conv and pool output of
    /// each block.
    pub fn lengths(&self) -> Result<Vec<usize>, NnError> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("filters", self.filters),
            ("conv_blocks", self.conv_blocks),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be >= 1")));
            }
        }
        let mut out = vec![self.window_len];
        let mut l = self.window_len;
        for b in 0..self.conv_blocks {
            if l < KERNEL {
                return Err(NnError::Shape(format!(
                    "conv{}: input length {l} shorter than kernel {KERNEL}",
                    b + 1
                )));
            }
            l -= KERNEL - 1;
            out.push(l);
            if l < 2 {
                return Err(NnError::Shape(format!("pool{}: input length {l} < 2", b + 1)));
            }
            l /= 2;
            out.push(l);
        }
        Ok(out)
    }

    pub fn flat_dim(&self) -> Result<usize, NnError> {
        Ok(self.filters * self.lengths()?.last().copied().unwrap_or(0))
    }

    pub fn sample_len(&self) -> usize {
        self.in_channels * self.window_len
    }

    /// Names and shapes of every parameter tensor in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        let flat = self.flat_dim()?;
        let mut v = Vec::new();
        let mut c = self.in_channels;
        for b in 0..self.conv_blocks {
            v.push((format!("conv{}.weight", b + 1), vec![self.filters, c, KERNEL]));
            v.push((format!("conv{}.bias", b + 1), vec![self.filters]));
            c = self.filters;
        }
        for (name, i, o) in [
            ("dense1", flat, self.hidden),
            ("dense2", self.hidden, self.hidden),
            ("output", self.hidden, self.classes),
        ] {
            v.push((format!("{name}.weight"), vec![o, i]));
            v.push((format!("{name}.bias"), vec![o]));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    arch: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(arch: &ArchConfig) -> Result<Self, NnError> {
        let shapes = arch.param_shapes()?;
        Ok(Self {
            arch: arch.clone(),
            names: shapes.iter().map(|(n, _)| n.clone()).collect(),
            tensors: shapes.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        })
    }

    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases. Each tensor draws from its own derived stream.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NnError> {
        let mut p = Self::zeros(arch)?;
        for (i, t) in p.tensors.iter_mut().enumerate() {
            if t.shape().len() == 1 {
                continue;
            }
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = rng_from(derive_seed(seed, i as u64));
            for v in t.data_mut() {
                *v = F::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from tensors in storage order, checking shapes.
    pub fn from_tensors(arch: &ArchConfig, tensors: Vec<Tensor<F>>) -> Result<Self, NnError> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, s), t) in shapes.iter().zip(&tensors) {
            if t.shape() != s.as_slice() {
                return Err(NnError::Shape(format!("{name}: shape {:?} != {s:?}", t.shape())));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }

    fn w(&self, i: usize) -> &[F] {
        self.tensors[2 * i].data()
    }

    fn b(&self, i: usize) -> &[F] {
        self.tensors[2 * i + 1].data()
    }

    fn wb_mut(&mut self, i: usize) -> (&mut [F], &mut [F]) {
        let (w, rest) = self.tensors[2 * i..].split_at_mut(1);
        (w[0].data_mut(), rest[0].data_mut())
    }

    fn dense_idx(&self, k: usize) -> usize {
        self.arch.conv_blocks + k
    }
}

struct BlockCache<F> {
    cols: Vec<F>,
    act: Vec<F>,
    arg: Vec<u8>,
    l_in: usize,
}

struct FeatCache<F> {
    b: usize,
    blocks: Vec<BlockCache<F>>,
    flat: Vec<F>,
    h1: Vec<F>,
}

/// Conv stack and dense1 for `b` samples stored `[sample][channel][time]`.
fn features_chunk<F: Real>(p: &ModelParams<F>, x: &[F], b: usize) -> FeatCache<F> {
    let a = &p.arch;
    let (c0, t) = (a.in_channels, a.window_len);
    let mut cur = vec![F::zero(); c0 * b * t];
    for s in 0..b {
        for c in 0..c0 {
            cur[(c * b + s) * t..(c * b + s + 1) * t].copy_from_slice(&x[(s * c0 + c) * t..(s * c0 + c + 1) * t]);
        }
    }
    let (mut c, mut l) = (c0, t);
    let mut blocks = Vec::with_capacity(a.conv_blocks);
    for i in 0..a.conv_blocks {
        let out = conv_forward(&cur, c, b, l, p.w(i), p.b(i));
        let mut act = out.y;
        relu_inplace(&mut act);
        let lc = l - (KERNEL - 1);
        let (pooled, arg) = maxpool_forward(&act, a.filters * b, lc);
        blocks.push(BlockCache {
            cols: out.cols,
            act,
            arg,
            l_in: l,
        });
        cur = pooled;
        c = a.filters;
        l = lc / 2;
    }
    let fd = c * l;
    let mut flat = vec![F::zero(); b * fd];
    for s in 0..b {
        for ch in 0..c {
            flat[s * fd + ch * l..s * fd + (ch + 1) * l].copy_from_slice(&cur[(ch * b + s) * l..(ch * b + s + 1) * l]);
        }
    }
    let d1 = p.dense_idx(0);
    let mut h1 = dense_forward(&flat, b, p.w(d1), p.b(d1));
    relu_inplace(&mut h1);
    FeatCache { b, blocks, flat, h1 }
}

/// Accumulates feature-extractor gradients for one chunk into `g`.
fn features_backward_chunk<F: Real>(p: &ModelParams<F>, cache: &FeatCache<F>, dh1: &[F], g: &mut ModelParams<F>) {
    let a = &p.arch;
    let b = cache.b;
    let mut dz = dh1.to_vec();
    relu_backward_inplace(&mut dz, &cache.h1);
    let d1 = p.dense_idx(0);
    let (dw, db) = g.wb_mut(d1);
    let dflat = dense_backward(&dz, &cache.flat, b, p.w(d1), dw, db, true).expect("input gradient requested");
    let l_last = *a.lengths().expect("validated").last().unwrap_or(&0);
    let c = a.filters;
    let fd = c * l_last;
    let mut dcur = vec![F::zero(); c * b * l_last];
    for s in 0..b {
        for ch in 0..c {
            dcur[(ch * b + s) * l_last..(ch * b + s + 1) * l_last]
                .copy_from_slice(&dflat[s * fd + ch * l_last..s * fd + (ch + 1) * l_last]);
        }
    }
    for i in (0..a.conv_blocks).rev() {
        let blk = &cache.blocks[i];
        let lc = blk.l_in - (KERNEL - 1);
        let mut dact = maxpool_backward(&dcur, &blk.arg, c * b, lc);
        relu_backward_inplace(&mut dact, &blk.act);
        let c_in = if i == 0 { a.in_channels } else { c };
        let (dw, db) = g.wb_mut(i);
        match conv_backward(&dact, &blk.cols, c_in, b, blk.l_in, p.w(i), dw, db, i > 0) {
            Some(dx) => dcur = dx,
            None => break,
        }
    }
}

struct HeadCache<F> {
    n: usize,
    a1: Vec<F>,
    m1: Vec<F>,
    h2: Vec<F>,
    a2: Vec<F>,
    m2: Vec<F>,
    logits: Vec<F>,
}

fn head_forward<F: Real>(p: &ModelParams<F>, h1: &[F], n: usize, mode: Mode, rate: f64, seed: u64) -> HeadCache<F> {
    let hd = p.arch.hidden;
    let mut rng = rng_from(seed);
    let m1: Vec<F> = dropout_mask(n * hd, rate, mode, &mut rng);
    let a1: Vec<F> = h1.iter().zip(&m1).map(|(x, m)| *x * *m).collect();
    let d2 = p.dense_idx(1);
    let mut h2 = dense_forward(&a1, n, p.w(d2), p.b(d2));
    relu_inplace(&mut h2);
    let m2: Vec<F> = dropout_mask(n * hd, rate, mode, &mut rng);
    let a2: Vec<F> = h2.iter().zip(&m2).map(|(x, m)| *x * *m).collect();
    let o = p.dense_idx(2);
    let logits = dense_forward(&a2, n, p.w(o), p.b(o));
    HeadCache {
        n,
        a1,
        m1,
        h2,
        a2,
        m2,
        logits,
    }
}

fn head_backward<F: Real>(p: &ModelParams<F>, c: &HeadCache<F>, dlogits: &[F], g: &mut ModelParams<F>) -> Vec<F> {
    let o = p.dense_idx(2);
    let (dw, db) = g.wb_mut(o);
    let da2 = dense_backward(dlogits, &c.a2, c.n, p.w(o), dw, db, true).expect("input gradient requested");
    let mut dh2: Vec<F> = da2.iter().zip(&c.m2).map(|(x, m)| *x * *m).collect();
    relu_backward_inplace(&mut dh2, &c.h2);
    let d2 = p.dense_idx(1);
    let (dw, db) = g.wb_mut(d2);
    let da1 = dense_backward(&dh2, &c.a1, c.n, p.w(d2), dw, db, true).expect("input gradient requested");
    da1.iter().zip(&c.m1).map(|(x, m)| *x * *m).collect()
}

fn check_input<F: Real>(p: &ModelParams<F>, x: &[F], n: usize, what: &str) -> Result<(), NnError> {
    let per = p.arch.sample_len();
    if x.len() != n * per {
        return Err(NnError::Shape(format!(
            "{what}: {} values for {n} windows of {} channels x {} samples",
            x.len(),
            p.arch.in_channels,
            p.arch.window_len
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(format!("{what}: input value {i} is not finite")));
    }
    Ok(())
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect()
}

/// Dense1 features (post-ReLU) of `n` windows.
pub fn features<F: Real>(p: &ModelParams<F>, x: &[F], n: usize, exec: Exec) -> Result<Vec<F>, NnError> {
    check_input(p, x, n, "features")?;
    let per = p.arch.sample_len();
    let parts = exec.map(&chunk_ranges(n), |&(s, e)| features_chunk(p, &x[s * per..e * per], e - s).h1);
    Ok(parts.concat())
}

pub struct ForwardOutput<F> {
    pub n: usize,
    /// `n x classes`.
    pub logits: Vec<F>,
    /// `n x hidden`, post-ReLU and pre-dropout.
    pub features: Vec<F>,
}

/// Forward pass over `n` windows stored `[window][channel][time]`.
/// Dropout masks are drawn from `seed` in train mode.
pub fn model_forward<F: Real>(
    p: &ModelParams<F>,
    x: &[F],
    n: usize,
    mode: Mode,
    dropout: f64,
    seed: u64,
    exec: Exec,
) -> Result<ForwardOutput<F>, NnError> {
    check_rate(dropout)?;
    let feats = features(p, x, n, exec)?;
    let head = head_forward(p, &feats, n, mode, dropout, seed);
    Ok(ForwardOutput {
        n,
        logits: head.logits,
        features: feats,
    })
}

/// Rows entering the cross-entropy term, with 0-based class indices.
#[derive(Clone, Copy)]
pub struct CeBatch<'a, F> {
    pub x: &'a [F],
    pub labels: &'a [usize],
}

/// Source and target rows entering the MMD term only.
#[derive(Clone, Copy)]
pub struct MmdBatch<'a, F> {
    pub source: &'a [F],
    pub n_source: usize,
    pub target: &'a [F],
    pub n_target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub lambda: f64,
    pub kernel: MmdKernel,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub mmd: f64,
    pub total: f64,
}

pub(crate) struct Evaluated<F> {
    pub parts: LossParts,
    pub grads: Option<ModelParams<F>>,
    pub signature: u64,
}

fn fnv(h: &mut u64, bits: impl Iterator<Item = u8>) {
    for b in bits {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100_0000_01b3);
    }
}

fn active<F: Real>(v: &[F]) -> impl Iterator<Item = u8> + '_ {
    v.iter().map(|x| (*x > F::zero()) as u8)
}

/// Loss `CE + lambda * MMD` and, when `want_grad`, its gradient. The
/// signature hashes every ReLU and pooling decision so callers can detect
/// when a perturbation crossed a kink.
pub(crate) fn evaluate<F: Real>(
    p: &ModelParams<F>,
    ce: Option<CeBatch<'_, F>>,
    mmd_batch: Option<MmdBatch<'_, F>>,
    spec: &LossSpec,
    dropout_seed: u64,
    exec: Exec,
    want_grad: bool,
) -> Result<Evaluated<F>, NnError> {
    check_rate(spec.dropout)?;
    if !(spec.lambda.is_finite() && spec.lambda >= 0.0) {
        return Err(NnError::Config(format!("lambda {} must be finite and >= 0", spec.lambda)));
    }
    let per = p.arch.sample_len();
    let hd = p.arch.hidden;
    let n_ce = ce.map_or(0, |c| c.labels.len());
    if let Some(c) = ce {
        check_input(p, c.x, n_ce, "cross-entropy batch")?;
    }
    if let Some(m) = mmd_batch {
        check_input(p, m.source, m.n_source, "MMD source batch")?;
        check_input(p, m.target, m.n_target, "MMD target batch")?;
    }
    if n_ce == 0 && mmd_batch.is_none() {
        return Err(NnError::Empty("loss needs a cross-entropy or MMD batch".into()));
    }

    // Chunks never mix roles: CE rows, then MMD source, then MMD target.
    let mut jobs: Vec<(&[F], usize)> = Vec::new();
    let roles: Vec<(&[F], usize)> = {
        let mut r = Vec::new();
        if let Some(c) = ce {
            r.push((c.x, n_ce));
        }
        if let Some(m) = mmd_batch {
            r.push((m.source, m.n_source));
            r.push((m.target, m.n_target));
        }
        r
    };
    for &(x, n) in &roles {
        for (s, e) in chunk_ranges(n) {
            jobs.push((&x[s * per..e * per], e - s));
        }
    }
    let caches = exec.map(&jobs, |&(x, b)| features_chunk(p, x, b));
    let h1_all: Vec<F> = caches.iter().flat_map(|c| c.h1.iter().copied()).collect();

    let mut parts = LossParts::default();
    let mut grads = if want_grad { Some(p.zeros_like()) } else { None };
    let mut dh1 = vec![F::zero(); h1_all.len()];
    let mut sig = 0xcbf2_9ce4_8422_2325u64;

    if n_ce > 0 {
        let labels = ce.expect("n_ce > 0").labels;
        let head = head_forward(p, &h1_all[..n_ce * hd], n_ce, Mode::Train, spec.dropout, dropout_seed);
        let (loss, dlogits) = softmax_cross_entropy(&head.logits, labels, p.arch.classes)?;
        parts.ce = loss;
        fnv(&mut sig, active(&head.h2));
        if let Some(g) = grads.as_mut() {
            let d = head_backward(p, &head, &dlogits, g);
            dh1[..n_ce * hd].copy_from_slice(&d);
        }
    }
    if let Some(m) = mmd_batch {
        let s0 = n_ce * hd;
        let t0 = s0 + m.n_source * hd;
        let out = mmd(spec.kernel, &h1_all[s0..t0], m.n_source, &h1_all[t0..], m.n_target, hd)?;
        parts.mmd = out.value;
        if grads.is_some() {
            let lam = F::of(spec.lambda);
            for (d, v) in dh1[s0..t0].iter_mut().zip(&out.grad_source) {
                *d = lam * *v;
            }
            for (d, v) in dh1[t0..].iter_mut().zip(&out.grad_target) {
                *d = lam * *v;
            }
        }
    }
    parts.total = parts.ce + spec.lambda * parts.mmd;

    for c in &caches {
        for blk in &c.blocks {
            fnv(&mut sig, active(&blk.act));
            fnv(&mut sig, blk.arg.iter().copied());
        }
        fnv(&mut sig, active(&c.h1));
    }

    if let Some(g) = grads.as_mut() {
        let mut offsets = Vec::with_capacity(caches.len());
        let mut o = 0;
        for c in &caches {
            offsets.push(o);
            o += c.b * hd;
        }
        let idx: Vec<usize> = (0..caches.len()).collect();
        let partial = exec.map(&idx, |&i| {
            let mut gi = p.zeros_like();
            let c = &caches[i];
            features_backward_chunk(p, c, &dh1[offsets[i]..offsets[i] + c.b * hd], &mut gi);
            gi
        });
        for gi in &partial {
            g.add_assign(gi);
        }
    }
    Ok(Evaluated {
        parts,
        grads,
        signature: sig,
    })
}

/// Loss and gradient of one optimisation step.
pub fn loss_and_grad<F: Real>(
    p: &ModelParams<F>,
    ce: Option<CeBatch<'_, F>>,
    mmd_batch: Option<MmdBatch<'_, F>>,
    spec: &LossSpec,
    dropout_seed: u64,
    exec: Exec,
) -> Result<(LossParts, ModelParams<F>), NnError> {
    let e = evaluate(p, ce, mmd_batch, spec, dropout_seed, exec, true)?;
    Ok((e.parts, e.grads.expect("gradient requested")))
}
