use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the network. `f32` is the training path;
/// `f64` exists for tight finite-difference checks.
pub trait Real:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// The strides and dimensions must describe memory inside the
    /// respective allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view: `(slice, row stride, column stride)`.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    pub fn new(data: &'a [F], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// Bounds-checked `C = alpha * A B + beta * C` with `A: m x k`, `B: k x n`,
/// `C: m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: &mut [F],
    rsc: usize,
    csc: usize,
) {
    assert!(a.fits(m, k), "gemm: A view out of bounds");
    assert!(b.fits(k, n), "gemm: B view out of bounds");
    assert!(
        m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: C view out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above against its slice.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        // A is 2x3 stored transposed (3x2 row-major).
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f64, 0.0, 2.0, 1.0, 0.0, 1.0];
        let mut c = [1.0f64; 4];
        gemm(2, 3, 2, 1.0, View::new(&at, 1, 2), View::new(&b, 2, 1), 2.0, &mut c, 2, 1);
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[2,1],[0,1]] -> AB = [[5,5],[14,11]]
        assert_eq!(c, [7.0, 7.0, 16.0, 13.0]);
    }
}
