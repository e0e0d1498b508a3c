//! Floating-point scalar abstraction shared by the numerical engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type usable by tensors, tapes, splines and models.
///
/// Implemented for `f32` and `f64`. The only primitive that is not expressible
/// through `num_traits::Float` is the dense matrix product, which dispatches to
/// the matching `matrixmultiply` kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = alpha * a(m×k) * b(k×n) + beta * c`, all row-major with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// Lossy conversion from `f64`; every finite `f64` maps to some value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(!a.is_empty() || k == 0);
                // SAFETY: callers pass slices sized for the given dimensions and
                // strides; `Tensor` enforces this for every call site.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Hyperbolic tangent through a single `exp`; roughly twice as fast as the
/// libm routine and within a few ulps of it away from zero.
pub fn tanh<S: Scalar>(x: S) -> S {
    let two = S::one() + S::one();
    let a = x.abs();
    if a < S::from(0.005).unwrap() {
        // odd Taylor series keeps relative accuracy near the origin
        let x2 = x * x;
        return x * (S::one() - x2 / S::from(3.0).unwrap() * (S::one() - x2 * S::from(0.4).unwrap()));
    }
    let t = S::one() - two / ((two * a).exp() + S::one());
    if x < S::zero() {
        -t
    } else {
        t
    }
}
