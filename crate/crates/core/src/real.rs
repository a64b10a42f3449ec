use num_traits::Float;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating point scalar used by the encoder and projection code, so the
/// same path runs in f32 for training and in f64 for gradient checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn cast(x: f64) -> Self;
    fn widen(self) -> f64;

    /// `c = a' * b' + beta * c` over row-major storage, where `a'` is `m x k`
    /// (stored transposed when `ta`) and `b'` is `k x n` (transposed when `tb`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

/// Row and column strides of an `r x c` operand, stored transposed or not.
fn strides(r: usize, c: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, r as isize)
    } else {
        (c as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($f:path) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            ta: bool,
            b: &[Self],
            tb: bool,
            beta: Self,
            c: &mut [Self],
        ) {
            assert!(
                a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
                "gemm operand too small"
            );
            let (rsa, csa) = strides(m, k, ta);
            let (rsb, csb) = strides(k, n, tb);
            // SAFETY: bounds asserted above; c does not alias a or b
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    gemm_impl!(matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    gemm_impl!(matrixmultiply::dgemm);
}
