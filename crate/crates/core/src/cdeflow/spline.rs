//! Natural cubic spline interpolation with first and second derivatives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Natural cubic spline through `(t_i, y_i)`; `M_0 = M_{n−1} = 0`.
///
/// Outside `[t_0, t_{n−1}]` the path is held constant at the nearest knot
/// value, so the derivative is zero there. A single knot gives a constant path.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline<S> {
    t: Vec<S>,
    y: Vec<S>,
    /// Second derivatives at the knots.
    m: Vec<S>,
}

impl<S: Scalar> CubicSpline<S> {
    pub fn natural(t: &[S], y: &[S]) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::Structural("spline needs at least one knot".into()));
        }
        if t.len() != y.len() {
            return Err(Error::Structural(format!(
                "spline has {} knot times but {} values",
                t.len(),
                y.len()
            )));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Structural(
                "spline knot times must be strictly increasing".into(),
            ));
        }
        let n = t.len();
        let mut m = vec![S::zero(); n];
        if n > 2 {
            // Interior equations for M_1..M_{n-2}, solved by forward elimination
            // and back substitution on the tridiagonal system.
            let k = n - 2;
            let two = S::of(2.0);
            let six = S::of(6.0);
            let h: Vec<S> = t.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![S::zero(); k];
            let mut rhs = vec![S::zero(); k];
            for i in 0..k {
                diag[i] = two * (h[i] + h[i + 1]);
                rhs[i] = six * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] = rhs[i] - w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(CubicSpline {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn knots(&self) -> &[S] {
        &self.t
    }

    pub fn second_derivatives_at_knots(&self) -> &[S] {
        &self.m
    }

    /// Interval index and local coordinates, or `None` outside the knot range.
    fn locate(&self, x: S) -> Option<(usize, S, S, S)> {
        let n = self.t.len();
        if n < 2 || x < self.t[0] || x > self.t[n - 1] {
            return None;
        }
        let i = match self
            .t
            .binary_search_by(|k| k.partial_cmp(&x).expect("finite knots"))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        Some((i, h, a, b))
    }

    pub fn value(&self, x: S) -> S {
        match self.locate(x) {
            Some((i, h, a, b)) => {
                let six = S::of(6.0);
                a * self.y[i]
                    + b * self.y[i + 1]
                    + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / six
            }
            None if x <= self.t[0] => self.y[0],
            None => *self.y.last().expect("non-empty"),
        }
    }

    pub fn derivative(&self, x: S) -> S {
        match self.locate(x) {
            Some((i, h, a, b)) => {
                let three = S::of(3.0);
                let six = S::of(6.0);
                (self.y[i + 1] - self.y[i]) / h
                    + ((S::one() - three * a * a) * self.m[i] + (three * b * b - S::one()) * self.m[i + 1])
                        * h
                        / six
            }
            None => S::zero(),
        }
    }

    pub fn second_derivative(&self, x: S) -> S {
        match self.locate(x) {
            Some((i, _, a, b)) => a * self.m[i] + b * self.m[i + 1],
            None => S::zero(),
        }
    }
}

/// Piecewise-linear interpolant with the same boundary behaviour as [`CubicSpline`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearInterp<S> {
    t: Vec<S>,
    y: Vec<S>,
}

impl<S: Scalar> LinearInterp<S> {
    pub fn new(t: &[S], y: &[S]) -> Result<Self> {
        // Validation is shared with the cubic constructor.
        CubicSpline::natural(t, y)?;
        Ok(LinearInterp {
            t: t.to_vec(),
            y: y.to_vec(),
        })
    }

    fn segment(&self, x: S) -> Option<usize> {
        let n = self.t.len();
        if n < 2 || x < self.t[0] || x > self.t[n - 1] {
            return None;
        }
        Some(self.t.partition_point(|&k| k <= x).clamp(1, n - 1) - 1)
    }

    pub fn value(&self, x: S) -> S {
        match self.segment(x) {
            Some(i) => {
                let w = (x - self.t[i]) / (self.t[i + 1] - self.t[i]);
                self.y[i] + w * (self.y[i + 1] - self.y[i])
            }
            None if x <= self.t[0] => self.y[0],
            None => *self.y.last().expect("non-empty"),
        }
    }

    pub fn derivative(&self, x: S) -> S {
        match self.segment(x) {
            Some(i) => (self.y[i + 1] - self.y[i]) / (self.t[i + 1] - self.t[i]),
            None => S::zero(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense Gaussian elimination on the full natural-spline system, including
    /// the two boundary rows. Independent of the tridiagonal sweep above.
    fn dense_second_derivatives(t: &[f64], y: &[f64]) -> Vec<f64> {
        let n = t.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = t[i] - t[i - 1];
            let h1 = t[i + 1] - t[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            a[i][n] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn two_knots_interpolate_endpoints() {
        let s = CubicSpline::natural(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert_eq!(s.value(0.0), 1.0);
        assert_eq!(s.value(1.0), 3.0);
        assert_eq!(s.derivative(0.5), 2.0);
    }

    #[test]
    fn single_knot_is_constant() {
        let s = CubicSpline::natural(&[2.0], &[5.0]).unwrap();
        for x in [-1.0, 2.0, 7.5] {
            assert_eq!(s.value(x), 5.0);
            assert_eq!(s.derivative(x), 0.0);
        }
    }

    #[test]
    fn empty_and_unsorted_knots_rejected() {
        assert!(CubicSpline::<f64>::natural(&[], &[]).is_err());
        assert!(CubicSpline::natural(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(CubicSpline::natural(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn five_knot_path_matches_dense_oracle() {
        let t = [0.0, 0.7, 1.5, 3.0, 3.4];
        let y = [1.0, -0.4, 2.2, 0.3, 0.9];
        let s = CubicSpline::natural(&t, &y).unwrap();
        let oracle = dense_second_derivatives(&t, &y);
        for (a, b) in s.second_derivatives_at_knots().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(s.second_derivative(0.0), 0.0);
        assert!(s.second_derivative(3.4).abs() < 1e-12);
    }

    #[test]
    fn linear_interp_matches_segments() {
        let l = LinearInterp::new(&[0.0, 1.0, 3.0], &[0.0, 2.0, 0.0]).unwrap();
        assert_eq!(l.value(0.5), 1.0);
        assert_eq!(l.derivative(2.0), -1.0);
        assert_eq!(l.derivative(4.0), 0.0);
    }

    fn knots() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(0.1f64..2.0, n),
                prop::collection::vec(-3.0f64..3.0, n),
            )
                .prop_map(|(gaps, y)| {
                    let mut acc = 0.0;
                    let t = gaps
                        .iter()
                        .map(|g| {
                            acc += g;
                            acc
                        })
                        .collect();
                    (t, y)
                })
        })
    }

    proptest! {
        #[test]
        fn interpolates_every_knot((t, y) in knots()) {
            let s = CubicSpline::natural(&t, &y).unwrap();
            for (ti, yi) in t.iter().zip(&y) {
                prop_assert!((s.value(*ti) - yi).abs() < 1e-10);
            }
        }

        #[test]
        fn derivative_matches_finite_differences((t, y) in knots(), frac in 0.05f64..0.95) {
            let s = CubicSpline::natural(&t, &y).unwrap();
            let x = t[0] + frac * (t[t.len() - 1] - t[0]);
            let h = 1e-6;
            let fd = (s.value(x + h) - s.value(x - h)) / (2.0 * h);
            let an = s.derivative(x);
            prop_assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0));
        }

        #[test]
        fn derivative_is_continuous_at_interior_knots((t, y) in knots()) {
            let s = CubicSpline::natural(&t, &y).unwrap();
            for &k in &t[1..t.len() - 1] {
                let eps = 1e-9;
                prop_assert!((s.derivative(k - eps) - s.derivative(k + eps)).abs() < 1e-5);
            }
        }
    }
}
