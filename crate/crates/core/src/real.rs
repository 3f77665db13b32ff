//! Floating-point element types the library is instantiated for.
//!
//! Training runs in `f32`; operator tests and gradient checks use `f64`.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};

pub trait Real:
    Float
    + FftNum
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into file headers.
    const DTYPE: u8;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    /// `c = alpha * a * b + beta * c` for row-major matrices with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`) regions of
    /// the stated dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    /// A cached FFT plan of the given length for the current thread.
    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>>;
}

thread_local! {
    static PLANNER_F32: RefCell<FftPlanner<f32>> = RefCell::new(FftPlanner::new());
    static PLANNER_F64: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

impl Real for f32 {
    const DTYPE: u8 = 1;

    unsafe fn gemm(
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

    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
        PLANNER_F32.with(|p| {
            let mut p = p.borrow_mut();
            if inverse {
                p.plan_fft_inverse(len)
            } else {
                p.plan_fft_forward(len)
            }
        })
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;

    unsafe fn gemm(
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

    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        PLANNER_F64.with(|p| {
            let mut p = p.borrow_mut();
            if inverse {
                p.plan_fft_inverse(len)
            } else {
                p.plan_fft_forward(len)
            }
        })
    }
}

/// Human readable dtype name for a header tag.
pub fn dtype_name(tag: u8) -> &'static str {
    match tag {
        1 => "f32",
        2 => "f64",
        _ => "unknown",
    }
}
