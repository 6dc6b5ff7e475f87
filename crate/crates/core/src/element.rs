//! Floating-point element types and the dense matrix product used by every kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A float type the kernels can run on. Training runs on `f32`; gradient
/// oracles run the same code on `f64`.
pub trait Element: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static {
    const NAME: &'static str;

    /// `c = alpha * a @ b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Every index reachable through the given strides must lie inside the
    /// corresponding allocation.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided 2D view into a slice: `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    /// Dense row-major `rows x cols` matrix starting at `offset`.
    pub fn dense(rows: usize, cols: usize, offset: usize) -> Self {
        MatView { rows, cols, offset, rs: cols, cs: 1 }
    }

    /// Dense row-major matrix with an explicit row stride.
    pub fn strided(rows: usize, cols: usize, offset: usize, rs: usize) -> Self {
        MatView { rows, cols, offset, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Bounds-checked `c = alpha * a @ b + beta * c`.
pub fn gemm<T: Element>(alpha: T, a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // Empty inner product: only the beta scaling survives.
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(bv.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(cv.last_index() < c.len(), "gemm output out of bounds");
    // SAFETY: all reachable indices were bounds-checked above and `c` does
    // not alias `a` or `b` (distinct borrows).
    unsafe {
        T::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
