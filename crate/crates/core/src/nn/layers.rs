//! Layer kernels with explicit backward passes.
//!
//! Activations of a chunk of `b` samples are stored channel-major as
//! `[channel][sample][time]`; a single sample is the `b = 1` case, i.e. a
//! plain `C x L` matrix.

use rand::Rng;

use super::real::{gemm, Real, View};
use super::tensor::Tensor;
use super::NnError;
use crate::seed::rng_from;

pub const KERNEL: usize = 3;

/// Convolution output plus the unfolded input kept for the backward pass.
pub struct ConvOut<F> {
    pub y: Vec<F>,
    pub cols: Vec<F>,
}

/// Valid stride-1 correlation over a chunk. `w` is `[c_out][c_in][3]`.
pub fn conv_forward<F: Real>(
    x: &[F],
    c_in: usize,
    b: usize,
    l: usize,
    w: &[F],
    bias: &[F],
) -> ConvOut<F> {
    let c_out = bias.len();
    debug_assert_eq!(x.len(), c_in * b * l);
    debug_assert_eq!(w.len(), c_out * c_in * KERNEL);
    let lo = l - (KERNEL - 1);
    let n = b * lo;
    let rows = c_in * KERNEL;
    let mut cols = vec![F::zero(); rows * n];
    for ci in 0..c_in {
        for j in 0..KERNEL {
            let dst = &mut cols[(ci * KERNEL + j) * n..(ci * KERNEL + j + 1) * n];
            for s in 0..b {
                let src = &x[ci * b * l + s * l + j..ci * b * l + s * l + j + lo];
                dst[s * lo..(s + 1) * lo].copy_from_slice(src);
            }
        }
    }
    let mut y = vec![F::zero(); c_out * n];
    for (co, row) in y.chunks_exact_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    gemm(c_out, rows, n, F::one(), View::new(w, rows, 1), View::new(&cols, n, 1), F::one(), &mut y, n, 1);
    ConvOut { y, cols }
}

/// Accumulates weight and bias gradients into `dw`, `db` and returns the
/// input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Real>(
    dy: &[F],
    cols: &[F],
    c_in: usize,
    b: usize,
    l: usize,
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    need_dx: bool,
) -> Option<Vec<F>> {
    let c_out = db.len();
    let lo = l - (KERNEL - 1);
    let n = b * lo;
    let rows = c_in * KERNEL;
    for (co, row) in dy.chunks_exact(n).enumerate() {
        db[co] += row.iter().copied().sum::<F>();
    }
    gemm(c_out, n, rows, F::one(), View::new(dy, n, 1), View::new(cols, 1, n), F::one(), dw, rows, 1);
    if !need_dx {
        return None;
    }
    let mut dcols = vec![F::zero(); rows * n];
    gemm(rows, c_out, n, F::one(), View::new(w, 1, rows), View::new(dy, n, 1), F::zero(), &mut dcols, n, 1);
    let mut dx = vec![F::zero(); c_in * b * l];
    for ci in 0..c_in {
        for j in 0..KERNEL {
            let src = &dcols[(ci * KERNEL + j) * n..(ci * KERNEL + j + 1) * n];
            for s in 0..b {
                let dst = &mut dx[ci * b * l + s * l + j..ci * b * l + s * l + j + lo];
                for (d, v) in dst.iter_mut().zip(&src[s * lo..(s + 1) * lo]) {
                    *d += *v;
                }
            }
        }
    }
    Some(dx)
}

/// Width-2 stride-2 max pooling over rows of length `l`. Returns the pooled
/// rows and, per output, the offset (0 or 1) of the winner; ties go to 0.
pub fn maxpool_forward<F: Real>(x: &[F], rows: usize, l: usize) -> (Vec<F>, Vec<u8>) {
    let lo = l / 2;
    let mut y = Vec::with_capacity(rows * lo);
    let mut arg = Vec::with_capacity(rows * lo);
    for r in 0..rows {
        let row = &x[r * l..(r + 1) * l];
        for t in 0..lo {
            let (a, c) = (row[2 * t], row[2 * t + 1]);
            if c > a {
                y.push(c);
                arg.push(1);
            } else {
                y.push(a);
                arg.push(0);
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<F: Real>(dy: &[F], arg: &[u8], rows: usize, l: usize) -> Vec<F> {
    let lo = l / 2;
    let mut dx = vec![F::zero(); rows * l];
    for r in 0..rows {
        for t in 0..lo {
            let k = r * lo + t;
            dx[r * l + 2 * t + arg[k] as usize] = dy[k];
        }
    }
    dx
}

pub fn relu_inplace<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        if !(*v > F::zero()) {
            *v = F::zero();
        }
    }
}

/// Masks `dy` by the ReLU output `out` (derivative taken as 0 at 0).
pub fn relu_backward_inplace<F: Real>(dy: &mut [F], out: &[F]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if !(*o > F::zero()) {
            *d = F::zero();
        }
    }
}

/// `y = x W^T + b` for `n` rows; `w` is `[d_out][d_in]`.
pub fn dense_forward<F: Real>(x: &[F], n: usize, w: &[F], bias: &[F]) -> Vec<F> {
    let d_out = bias.len();
    let d_in = w.len() / d_out;
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(n, d_in, d_out, F::one(), View::new(x, d_in, 1), View::new(w, 1, d_in), F::one(), &mut y, d_out, 1);
    y
}

/// Accumulates `dw`, `db`; returns `dx` when requested.
pub fn dense_backward<F: Real>(
    dy: &[F],
    x: &[F],
    n: usize,
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    need_dx: bool,
) -> Option<Vec<F>> {
    let d_out = db.len();
    let d_in = w.len() / d_out;
    for row in dy.chunks_exact(d_out) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
    gemm(d_out, n, d_in, F::one(), View::new(dy, 1, d_out), View::new(x, d_in, 1), F::one(), dw, d_in, 1);
    if !need_dx {
        return None;
    }
    let mut dx = vec![F::zero(); n * d_in];
    gemm(n, d_out, d_in, F::one(), View::new(dy, d_out, 1), View::new(w, d_in, 1), F::zero(), &mut dx, d_in, 1);
    Some(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn check_rate(rate: f64) -> Result<(), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask of length `n`: entries are 0 with probability
/// `rate`, else `1 / (1 - rate)`. All ones in eval mode or at rate 0.
pub fn dropout_mask<F: Real>(n: usize, rate: f64, mode: Mode, rng: &mut impl Rng) -> Vec<F> {
    if mode == Mode::Eval || rate == 0.0 {
        return vec![F::one(); n];
    }
    let keep = F::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

fn shape_err(what: &str, axis: &str, want: usize, got: usize) -> NnError {
    NnError::Shape(format!("{what}: axis {axis} expected {want}, got {got}"))
}

/// Single-sample convolution: `input` is `C_in x L`, `weights` is
/// `C_out x C_in x 3`, `bias` is `C_out`.
pub fn conv1d<F: Real>(input: &Tensor<F>, weights: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let (c_in, l, c_out) = conv_dims(input, weights, bias)?;
    let out = conv_forward(input.data(), c_in, 1, l, weights.data(), bias.data());
    Tensor::new(&[c_out, l - 2], out.y)
}

/// Gradients of a single-sample convolution: `(d_input, d_weights, d_bias)`.
pub fn conv1d_backward<F: Real>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), NnError> {
    let (c_in, l, c_out) = conv_dims(input, weights, bias)?;
    if d_out.shape() != [c_out, l - 2] {
        return Err(NnError::Shape(format!(
            "conv1d_backward: upstream gradient shape {:?} != [{c_out}, {}]",
            d_out.shape(),
            l - 2
        )));
    }
    let out = conv_forward(input.data(), c_in, 1, l, weights.data(), bias.data());
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(bias.shape());
    let dx = conv_backward(d_out.data(), &out.cols, c_in, 1, l, weights.data(), dw.data_mut(), db.data_mut(), true)
        .expect("input gradient requested");
    Ok((Tensor::new(&[c_in, l], dx)?, dw, db))
}

fn conv_dims<F: Real>(input: &Tensor<F>, weights: &Tensor<F>, bias: &Tensor<F>) -> Result<(usize, usize, usize), NnError> {
    let [c_in, l] = input.shape() else {
        return Err(NnError::Shape(format!("conv1d: input must be C_in x L, got {:?}", input.shape())));
    };
    let [c_out, wc, k] = weights.shape() else {
        return Err(NnError::Shape(format!(
            "conv1d: weights must be C_out x C_in x 3, got {:?}",
            weights.shape()
        )));
    };
    if *k != KERNEL {
        return Err(shape_err("conv1d weights", "kernel", KERNEL, *k));
    }
    if wc != c_in {
        return Err(shape_err("conv1d weights", "C_in", *c_in, *wc));
    }
    if bias.shape() != [*c_out] {
        return Err(NnError::Shape(format!("conv1d: bias shape {:?} != [{c_out}]", bias.shape())));
    }
    if *l < KERNEL {
        return Err(shape_err("conv1d input", "L (minimum)", KERNEL, *l));
    }
    Ok((*c_in, *l, *c_out))
}

/// Single-sample pooling over a `C x L` tensor.
pub fn maxpool1d<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<u8>), NnError> {
    let [c, l] = input.shape() else {
        return Err(NnError::Shape(format!("maxpool1d: input must be C x L, got {:?}", input.shape())));
    };
    if *l < 2 {
        return Err(shape_err("maxpool1d input", "L (minimum)", 2, *l));
    }
    let (y, arg) = maxpool_forward(input.data(), *c, *l);
    Ok((Tensor::new(&[*c, l / 2], y)?, arg))
}

pub fn maxpool1d_backward<F: Real>(input_shape: &[usize], arg: &[u8], d_out: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [c, l] = input_shape else {
        return Err(NnError::Shape(format!("maxpool1d_backward: bad input shape {input_shape:?}")));
    };
    if d_out.shape() != [*c, l / 2] || arg.len() != d_out.len() {
        return Err(NnError::Shape("maxpool1d_backward: gradient shape mismatch".into()));
    }
    Tensor::new(&[*c, *l], maxpool_backward(d_out.data(), arg, *c, *l))
}

/// Affine map of a single vector: `W x + b`.
pub fn dense<F: Real>(input: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let [d_out, d_in] = w.shape() else {
        return Err(NnError::Shape(format!("dense: weights must be 2-D, got {:?}", w.shape())));
    };
    if input.len() != *d_in {
        return Err(shape_err("dense input", "features", *d_in, input.len()));
    }
    if b.shape() != [*d_out] {
        return Err(shape_err("dense bias", "features", *d_out, b.len()));
    }
    Tensor::new(&[*d_out], dense_forward(input.data(), 1, w.data(), b.data()))
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    relu_inplace(y.data_mut());
    y
}

/// Inverted dropout seeded by `seed`.
pub fn dropout<F: Real>(x: &Tensor<F>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<F>, NnError> {
    check_rate(rate)?;
    let mask: Vec<F> = dropout_mask(x.len(), rate, mode, &mut rng_from(seed));
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_trims_input() {
        let x = Tensor::new(&[1, 6], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv1d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn ones_kernel_sums_channels() {
        let c_in = 4;
        let x = Tensor::new(&[c_in, 10], vec![1.0f32; 40]).unwrap();
        let w = Tensor::new(&[2, c_in, 3], vec![1.0; 2 * c_in * 3]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = conv1d(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0 * c_in as f32));
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::<f32>::zeros(&[2, 8]);
        let w = Tensor::<f32>::zeros(&[3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[3]);
        let e = conv1d(&x, &w, &b).unwrap_err().to_string();
        assert!(e.contains("C_in"), "{e}");
        let short = Tensor::<f32>::zeros(&[3, 2]);
        let e = conv1d(&short, &w, &b).unwrap_err().to_string();
        assert!(e.contains("L"), "{e}");
    }

    #[test]
    fn conv_backward_matches_central_differences() {
        let x = rand_tensor(&[2, 8], 1);
        let w = rand_tensor(&[3, 2, 3], 2);
        let b = rand_tensor(&[3], 3);
        let r = rand_tensor(&[3, 6], 4);
        // Loss = sum(r * conv(x)); its gradient wrt the output is r.
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv1d(x, w, b).unwrap().data().iter().zip(r.data()).map(|(a, c)| a * c).sum()
        };
        let (dx, dw, db) = conv1d_backward(&x, &w, &b, &r).unwrap();
        let h = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for (i, &a) in analytic.iter().enumerate() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                match which {
                    0 => {
                        xp.data_mut()[i] += h;
                        xm.data_mut()[i] -= h;
                    }
                    1 => {
                        wp.data_mut()[i] += h;
                        wm.data_mut()[i] -= h;
                    }
                    _ => {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                }
                let n = (loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * h);
                assert!((a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-3), "{which} {i}: {a} vs {n}");
            }
        };
        check(dx.data(), 0);
        check(dw.data(), 1);
        check(db.data(), 2);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(&[1, 4], vec![1.0f32, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(maxpool1d(&x).unwrap().0.data(), &[3.0, 5.0]);
        let odd = Tensor::new(&[1, 5], vec![1.0f32, 3.0, 2.0, 5.0, 9.0]).unwrap();
        assert_eq!(maxpool1d(&odd).unwrap().0.data(), &[3.0, 5.0]);

        let c = Tensor::new(&[2, 4], vec![7.0f32; 8]).unwrap();
        let (y, arg) = maxpool1d(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let g = maxpool1d_backward(c.shape(), &arg, &Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]);

        assert!(maxpool1d(&Tensor::<f32>::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn maxpool_backward_matches_central_differences() {
        let x = rand_tensor(&[3, 9], 5);
        let r = rand_tensor(&[3, 4], 6);
        let (_, arg) = maxpool1d(&x).unwrap();
        let g = maxpool1d_backward(x.shape(), &arg, &r).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| -> f64 {
                maxpool1d(t).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let n = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((g.data()[i] - n).abs() < 1e-3 * n.abs().max(1e-3));
        }
    }

    #[test]
    fn dense_backward_matches_central_differences() {
        let n = 3;
        let x = rand_tensor(&[n, 5], 7);
        let w = rand_tensor(&[4, 5], 8);
        let b = rand_tensor(&[4], 9);
        let r = rand_tensor(&[n, 4], 10);
        let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            dense_forward(x, n, w, b).iter().zip(r.data()).map(|(a, c)| a * c).sum()
        };
        let mut dw = vec![0.0; 20];
        let mut db = vec![0.0; 4];
        let dx = dense_backward(r.data(), x.data(), n, w.data(), &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in 0..20 {
            let mut p = w.data().to_vec();
            let mut m = w.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let num = (f(x.data(), &p, b.data()) - f(x.data(), &m, b.data())) / (2.0 * h);
            assert!((dw[i] - num).abs() < 1e-7);
        }
        for i in 0..15 {
            let mut p = x.data().to_vec();
            let mut m = x.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let num = (f(&p, w.data(), b.data()) - f(&m, w.data(), b.data())) / (2.0 * h);
            assert!((dx[i] - num).abs() < 1e-7);
        }
        for (i, g) in db.iter().enumerate() {
            let s: f64 = (0..n).map(|k| r.data()[k * 4 + i]).sum();
            assert!((g - s).abs() < 1e-12);
        }
        let single = dense(&Tensor::new(&[5], x.data()[..5].to_vec()).unwrap(), &w, &b).unwrap();
        assert_eq!(single.data(), &dense_forward(&x.data()[..5], 1, w.data(), b.data())[..]);
    }

    #[test]
    fn dropout_contract() {
        let x = rand_tensor(&[50], 11).cast::<f32>();
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.3, Mode::Train, 9).unwrap(), dropout(&x, 0.3, Mode::Train, 9).unwrap());
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, 1).is_err());
        let r = relu(&x);
        assert!(r.data().iter().zip(x.data()).all(|(a, b)| *a == b.max(0.0)));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 100_000;
        let x = Tensor::new(&[n], vec![1.0f64; n]).unwrap();
        let y = dropout(&x, 0.1, Mode::Train, 42).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.1).abs() < 0.005);
    }
}
