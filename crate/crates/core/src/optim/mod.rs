//! Exact derivatives and the quasi-Newton minimizer.

mod lbfgs;
mod least_squares;

pub use lbfgs::{
    minimize, minimize_bounded, Bounds, FitReport, Objective, OptimizerOptions, Termination,
};
pub use least_squares::{LeastSquares, ResidualModel};

use crate::error::{Error, Result};
use crate::scalar::{Dual, Scalar};

/// A scalar function that can be evaluated on any [`Scalar`].
pub trait DiffFn {
    fn dim(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

const CHUNK: usize = 16;

/// Exact gradient of `f` at `x` by forward accumulation, 16 partials per pass.
pub fn gradient<F: DiffFn>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x.len() });
    }
    if !f.eval(x).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut g = vec![0.0; x.len()];
    let mut duals: Vec<Dual<CHUNK>> = x.iter().map(|v| Dual::constant(*v)).collect();
    for start in (0..x.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.len());
        for i in start..end {
            duals[i] = Dual::variable(x[i], i - start);
        }
        let out = f.eval(&duals);
        g[start..end].copy_from_slice(&out.d[..end - start]);
        for i in start..end {
            duals[i] = Dual::constant(x[i]);
        }
    }
    Ok(g)
}

/// Central finite differences with step `1e-6·max(1, |xᵢ|)`. Test oracle only.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error `|a−b| / max(|a|, |b|, 1)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SqNorm(usize);
    impl DiffFn for SqNorm {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            x.iter().fold(S::zero(), |acc, v| acc + *v * *v)
        }
    }

    struct Constant;
    impl DiffFn for Constant {
        fn dim(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, _x: &[S]) -> S {
            S::cst(4.2)
        }
    }

    struct Wiggly;
    impl DiffFn for Wiggly {
        fn dim(&self) -> usize {
            40
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            let mut acc = S::zero();
            for i in 1..x.len() {
                acc += (x[i] * x[i - 1]).sin() + x[i] / (x[i - 1] * x[i - 1] + 1.0);
            }
            acc
        }
    }

    #[test]
    fn squared_norm_gradient() {
        assert_eq!(gradient(&SqNorm(2), &[1.0, 2.0]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        assert_eq!(gradient(&Constant, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn multi_chunk_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = gradient(&Wiggly, &x).unwrap();
        let fd = finite_difference(|v| Wiggly.eval(v), &x);
        assert!(max_relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        struct Nan;
        impl DiffFn for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn eval<S: Scalar>(&self, x: &[S]) -> S {
                x[0] / 0.0
            }
        }
        assert_eq!(gradient(&Nan, &[1.0]).unwrap_err(), Error::NonFiniteObjective);
    }

    #[test]
    fn dimension_checked() {
        assert!(matches!(gradient(&SqNorm(3), &[1.0]), Err(Error::DimensionMismatch { .. })));
    }
}
