//! Sums of squared residuals with exact gradients.
//!
//! A [`ResidualModel`] splits its residuals into independent blocks (one per
//! timestep, typically), each depending on a small set of parameters. The
//! [`LeastSquares`] engine turns it into an [`Objective`] over the free
//! parameters: blocks are evaluated in parallel, partial derivatives are
//! propagated with chunked forward-mode duals, and the per-block results are
//! summed in block order.

use nalgebra::{DMatrix, DVector};

use crate::optim::lbfgs::Objective;
use crate::par::{map_indexed, Execution};
use crate::scalar::{Dual, Scalar};

/// Residual structure of a least-squares problem.
pub trait ResidualModel: Sync {
    fn num_params(&self) -> usize;
    fn num_blocks(&self) -> usize;
    /// Global indices of the parameters block `block` depends on, in the order
    /// [`ResidualModel::residuals`] receives them.
    fn block_indices(&self, block: usize, out: &mut Vec<usize>);
    /// Residuals of `block` given its local parameter values.
    fn residuals<S: Scalar>(&self, block: usize, local: &[S], out: &mut Vec<S>);
    /// Residuals of `block` and their Jacobian (row-major, one column per
    /// local parameter), for models that can compute it more cheaply than
    /// forward-mode duals. Returns `false` to use the duals.
    fn jacobian(&self, _block: usize, _local: &[f64], _res: &mut Vec<f64>, _jac: &mut Vec<f64>) -> bool {
        false
    }
}

const WIDE: usize = 16;
const NARROW: usize = 8;

/// Least-squares objective over a subset of a model's parameters.
///
/// The optimization variable `y` relates to the model parameters through
/// `θ[i] = base[i] + y[v] / scale[v]` for each free parameter `i` mapped to
/// variable `v`; frozen parameters stay at `base`.
pub struct LeastSquares<'a, M: ResidualModel> {
    model: &'a M,
    base: Vec<f64>,
    var_of: Vec<Option<usize>>,
    scale: Vec<f64>,
    exec: Execution,
    blocks: Vec<Vec<usize>>,
    model_jacobian: bool,
}

/// Residuals of one block with their Jacobian over the block's free variables.
struct Dense {
    vars: Vec<usize>,
    res: Vec<f64>,
    /// Row-major, `res.len() × vars.len()`, unscaled.
    jac: Vec<f64>,
}

impl<'a, M: ResidualModel> LeastSquares<'a, M> {
    /// Engine over all parameters, unit scaling.
    pub fn new(model: &'a M, base: Vec<f64>) -> Self {
        let free = vec![true; model.num_params()];
        Self::with_free(model, base, &free)
    }

    pub fn with_free(model: &'a M, base: Vec<f64>, free: &[bool]) -> Self {
        assert_eq!(base.len(), model.num_params());
        assert_eq!(free.len(), model.num_params());
        let mut var_of = vec![None; free.len()];
        let mut n = 0;
        for (i, f) in free.iter().enumerate() {
            if *f {
                var_of[i] = Some(n);
                n += 1;
            }
        }
        let blocks = (0..model.num_blocks())
            .map(|b| {
                let mut idx = Vec::new();
                model.block_indices(b, &mut idx);
                idx
            })
            .collect();
        LeastSquares { model, base, var_of, scale: vec![1.0; n], exec: Execution::default(), blocks, model_jacobian: true }
    }

    pub fn execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Whether to use [`ResidualModel::jacobian`] where the model provides
    /// one (the default) or always forward-mode duals.
    pub fn model_jacobian(mut self, on: bool) -> Self {
        self.model_jacobian = on;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.scale.len()
    }

    /// Rescales variables so the Gauss-Newton Hessian has a unit diagonal at
    /// the base point.
    pub fn precondition(&mut self) {
        self.scale = vec![1.0; self.scale.len()];
        let diag = self.jtj_diagonal(&vec![0.0; self.num_vars()]);
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let floor = (max * 1e-10).max(1e-300);
        self.scale = diag.iter().map(|d| d.max(floor).sqrt()).collect();
    }

    /// Full parameter vector at variable value `y`.
    pub fn params_at(&self, y: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (i, v) in self.var_of.iter().enumerate() {
            if let Some(v) = v {
                theta[i] += y[*v] / self.scale[*v];
            }
        }
        theta
    }

    fn block_value(&self, b: usize, theta: &[f64]) -> f64 {
        let idx = &self.blocks[b];
        let local: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
        let mut out = Vec::new();
        self.model.residuals(b, &local, &mut out);
        out.iter().map(|r| r * r).sum()
    }

    fn dense(&self, b: usize, theta: &[f64]) -> Dense {
        let idx = &self.blocks[b];
        if self.model_jacobian {
            let local: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
            let mut res = Vec::new();
            let mut full = Vec::new();
            if self.model.jacobian(b, &local, &mut res, &mut full) {
                let nl = idx.len();
                let cols: Vec<(usize, usize)> =
                    idx.iter().enumerate().filter_map(|(slot, &i)| self.var_of[i].map(|v| (slot, v))).collect();
                let mut jac = Vec::with_capacity(res.len() * cols.len());
                for r in 0..res.len() {
                    jac.extend(cols.iter().map(|(slot, _)| full[r * nl + slot]));
                }
                return Dense { vars: cols.into_iter().map(|(_, v)| v).collect(), res, jac };
            }
        }
        let nfree = idx.iter().filter(|&&i| self.var_of[i].is_some()).count();
        if nfree <= NARROW {
            self.block_dense::<NARROW>(b, theta)
        } else {
            self.block_dense::<WIDE>(b, theta)
        }
    }

    /// Diagonal of `JᵀJ` with respect to the (scaled) variables.
    pub fn jtj_diagonal(&self, y: &[f64]) -> Vec<f64> {
        let theta = self.params_at(y);
        let parts = map_indexed(self.blocks.len(), self.exec, |b| {
            let d = self.dense(b, &theta);
            let nf = d.vars.len();
            let mut acc = vec![0.0; nf];
            for row in d.jac.chunks(nf.max(1)) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x * x;
                }
            }
            (d.vars, acc)
        });
        let mut diag = vec![0.0; self.num_vars()];
        for (vars, acc) in parts {
            for (v, d) in vars.into_iter().zip(acc) {
                diag[v] += d / (self.scale[v] * self.scale[v]);
            }
        }
        diag
    }

    /// Local Jacobian of block `b`: the block's variables, its residuals and
    /// the row-major Jacobian with respect to those variables (unscaled).
    fn block_dense<const N: usize>(&self, b: usize, theta: &[f64]) -> Dense {
        let idx = &self.blocks[b];
        let free_slots: Vec<(usize, usize)> = idx
            .iter()
            .enumerate()
            .filter_map(|(slot, &i)| self.var_of[i].map(|v| (slot, v)))
            .collect();
        let nf = free_slots.len();
        let mut local: Vec<Dual<N>> = idx.iter().map(|&i| Dual::constant(theta[i])).collect();
        let mut out: Vec<Dual<N>> = Vec::new();
        let mut res = Vec::new();
        let mut jac = Vec::new();
        if nf == 0 {
            self.model.residuals(b, &local, &mut out);
            res.extend(out.iter().map(|r| r.v));
        }
        for (c, chunk) in free_slots.chunks(N).enumerate() {
            for (k, (slot, _)) in chunk.iter().enumerate() {
                local[*slot] = Dual::variable(theta[idx[*slot]], k);
            }
            out.clear();
            self.model.residuals(b, &local, &mut out);
            if c == 0 {
                res.extend(out.iter().map(|r| r.v));
                jac = vec![0.0; res.len() * nf];
            }
            for (row, r) in out.iter().enumerate() {
                for k in 0..chunk.len() {
                    jac[row * nf + c * N + k] = r.d[k];
                }
            }
            for (slot, _) in chunk {
                local[*slot] = Dual::constant(theta[idx[*slot]]);
            }
        }
        Dense { vars: free_slots.iter().map(|(_, v)| *v).collect(), res, jac }
    }

    /// `Σr²`, `JᵀJ` and `Jᵀr` with respect to the (scaled) variables at `y`.
    pub fn normal_equations(&self, y: &[f64]) -> (f64, DMatrix<f64>, DVector<f64>) {
        let theta = self.params_at(y);
        let parts = map_indexed(self.blocks.len(), self.exec, |b| {
            let Dense { vars, res, jac } = self.dense(b, &theta);
            let nf = vars.len();
            let j = DMatrix::from_row_slice(res.len(), nf, &jac);
            let r = DVector::from_column_slice(&res);
            (vars, j.tr_mul(&j), j.tr_mul(&r), r.norm_squared())
        });
        let n = self.num_vars();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut f = 0.0;
        for (vars, hb, gb, fb) in parts {
            f += fb;
            for (a, &va) in vars.iter().enumerate() {
                g[va] += gb[a];
                for (b, &vb) in vars.iter().enumerate() {
                    h[(va, vb)] += hb[(a, b)];
                }
            }
        }
        for a in 0..n {
            g[a] /= self.scale[a];
            for b in 0..n {
                h[(a, b)] /= self.scale[a] * self.scale[b];
            }
        }
        (f, h, g)
    }

    /// One damped Gauss-Newton step from `y = 0`.
    ///
    /// Solves `(D⁻¹JᵀJD⁻¹ + μI)·z = −D⁻¹Jᵀr` with `D` the Jacobi scaling,
    /// trying the full, half and quarter step and raising the damping `μ`
    /// tenfold until one lowers the objective; `μ` drops tenfold after a
    /// full step succeeds. `damping` carries `μ` from
    /// step to step. Returns the accepted point, its objective, the starting
    /// objective and the number of evaluations, or `None` when no damping up
    /// to 1e6 gives a decrease.
    pub fn gauss_newton_step(&self, damping: &mut f64) -> Option<(Vec<f64>, f64, f64, usize)> {
        let n = self.num_vars();
        let (f0, mut h, g) = self.normal_equations(&vec![0.0; n]);
        let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max);
        if !(max_diag > 0.0) || f0 == 0.0 {
            return None;
        }
        let d: Vec<f64> = (0..n).map(|i| h[(i, i)].max(1e-12 * max_diag).sqrt()).collect();
        for a in 0..n {
            for b in 0..n {
                h[(a, b)] /= d[a] * d[b];
            }
        }
        let rhs = DVector::from_iterator(n, (0..n).map(|i| -g[i] / d[i]));
        let mut evals = 1;
        while *damping <= 1e6 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += *damping;
            }
            if let Some(ch) = damped.cholesky() {
                let z = ch.solve(&rhs);
                for (k, t) in [1.0, 0.5, 0.25].into_iter().enumerate() {
                    let y: Vec<f64> = (0..n).map(|i| t * z[i] / d[i]).collect();
                    let f = self.eval(&y, None);
                    evals += 1;
                    if f < f0 {
                        if k == 0 {
                            *damping = (*damping * 0.1).max(1e-12);
                        }
                        return Some((y, f, f0, evals));
                    }
                }
            }
            *damping *= 10.0;
        }
        None
    }

    /// Residual vector at `y`, blocks concatenated.
    pub fn residual_vector(&self, y: &[f64]) -> Vec<f64> {
        let theta = self.params_at(y);
        let mut all = Vec::new();
        for b in 0..self.blocks.len() {
            let local: Vec<f64> = self.blocks[b].iter().map(|&i| theta[i]).collect();
            self.model.residuals(b, &local, &mut all);
        }
        all
    }
}

impl<'a, M: ResidualModel> Objective for LeastSquares<'a, M> {
    fn dim(&self) -> usize {
        self.num_vars()
    }

    fn eval(&self, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let theta = self.params_at(y);
        match grad {
            None => {
                let parts = map_indexed(self.blocks.len(), self.exec, |b| self.block_value(b, &theta));
                parts.iter().sum()
            }
            Some(g) => {
                let parts = map_indexed(self.blocks.len(), self.exec, |b| {
                    let d = self.dense(b, &theta);
                    let nf = d.vars.len();
                    let mut acc = vec![0.0; nf];
                    for (r, row) in d.res.iter().zip(d.jac.chunks(nf.max(1))) {
                        for (a, x) in acc.iter_mut().zip(row) {
                            *a += 2.0 * r * x;
                        }
                    }
                    (d.res.iter().map(|r| r * r).sum::<f64>(), d.vars, acc)
                });
                g.iter_mut().for_each(|v| *v = 0.0);
                let mut total = 0.0;
                for (value, vars, acc) in parts {
                    total += value;
                    for (v, d) in vars.into_iter().zip(acc) {
                        g[v] += d;
                    }
                }
                for (gi, s) in g.iter_mut().zip(&self.scale) {
                    *gi /= s;
                }
                total
            }
        }
    }
}
