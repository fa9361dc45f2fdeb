//! Limited-memory BFGS with a Wolfe line search and optional box constraints.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A smooth objective with an exact gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Returns `f(x)`; fills `grad` with `∇f(x)` when requested.
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Stop once `‖∇f‖∞ ≤ gradient_tolerance · max(1, |f|)`.
    pub gradient_tolerance: f64,
    pub history_size: usize,
    pub line_search_max_steps: usize,
    /// Gauss-Newton iterations run after the quasi-Newton phase of a
    /// least-squares fit; 0 disables the polish.
    #[serde(default = "default_polish")]
    pub polish_iterations: usize,
}

fn default_polish() -> usize {
    30
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-9,
            history_size: 20,
            line_search_max_steps: 40,
            polish_iterations: default_polish(),
        }
    }
}

impl OptimizerOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_gradient_tolerance(mut self, tol: f64) -> Self {
        self.gradient_tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.history_size == 0
            || self.line_search_max_steps == 0
            || !(self.gradient_tolerance > 0.0)
        {
            return Err(Error::ConfigInvalid("optimizer options must be strictly positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTol,
    MaxIter,
    LineSearchFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination_reason: Termination,
    /// Objective after each accepted iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

impl FitReport {
    /// Chains the report of a follow-up run onto this one.
    pub fn merge(&mut self, next: FitReport) {
        self.final_objective = next.final_objective;
        self.iterations += next.iterations;
        self.evaluations += next.evaluations;
        self.converged = next.converged;
        self.termination_reason = next.termination_reason;
        self.trace.extend(next.trace);
    }
}

/// Box constraints `lo ≤ x ≤ hi`; infinite bounds are allowed.
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Unconstrained minimization.
pub fn minimize<O: Objective + ?Sized>(
    f: &O,
    x0: &[f64],
    opts: &OptimizerOptions,
) -> Result<(Vec<f64>, FitReport)> {
    run(f, x0, opts, None)
}

/// Minimization with the iterate projected onto a box after every step.
pub fn minimize_bounded<O: Objective + ?Sized>(
    f: &O,
    x0: &[f64],
    bounds: &Bounds,
    opts: &OptimizerOptions,
) -> Result<(Vec<f64>, FitReport)> {
    run(f, x0, opts, Some(bounds))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(history: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

/// Components pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], bounds: Option<&Bounds>) -> Vec<bool> {
    match bounds {
        None => vec![false; x.len()],
        Some(b) => x
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (xi, gi))| (*xi <= b.lo[i] && *gi > 0.0) || (*xi >= b.hi[i] && *gi < 0.0))
            .collect(),
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: Option<&Bounds>) -> f64 {
    match bounds {
        None => inf_norm(g),
        Some(b) => x
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (xi, gi))| ((xi - gi).clamp(b.lo[i], b.hi[i]) - xi).abs())
            .fold(0.0, f64::max),
    }
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Evaluator<'a, O: Objective + ?Sized> {
    f: &'a O,
    evals: usize,
}

impl<'a, O: Objective + ?Sized> Evaluator<'a, O> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evals += 1;
        let mut g = vec![0.0; x.len()];
        let v = self.f.eval(x, Some(&mut g));
        if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return (f64::INFINITY, g);
        }
        (v, g)
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
/// Relative slack for the approximate sufficient-decrease test, used once the
/// objective is flat to rounding.
const FLAT_EPS: f64 = 1e-14;

fn accept_approx(f0: f64, d0: f64, ft: f64, dt: f64) -> bool {
    ft <= f0 + FLAT_EPS * f0.abs() && dt >= C2 * d0 && dt <= (2.0 * C1 - 1.0) * d0
}

/// Strong Wolfe search along `d` (Nocedal & Wright, Alg. 3.5/3.6), falling
/// back to the approximate Wolfe conditions when `f` is flat to rounding.
fn wolfe_search<O: Objective + ?Sized>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    max_steps: usize,
) -> Option<Trial> {
    let d0 = dot(g0, d);
    let point = |a: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    let mut steps = 0;
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut dd_prev = d0;
    let mut a = alpha0;
    let mut best: Option<Trial> = None;

    // zoom between lo (satisfies decrease) and hi
    let zoom = |ev: &mut Evaluator<'_, O>,
                mut lo: (f64, f64, f64),
                mut hi: (f64, f64, f64),
                steps: &mut usize,
                best: &mut Option<Trial>|
     -> Option<Trial> {
        while *steps < max_steps {
            *steps += 1;
            let (alo, flo, dlo) = lo;
            let (ahi, fhi, dhi) = hi;
            let mut at = cubic_min(alo, flo, dlo, ahi, fhi, dhi);
            let (left, right) = if alo < ahi { (alo, ahi) } else { (ahi, alo) };
            let margin = 0.1 * (right - left);
            if !at.is_finite() || at < left + margin || at > right - margin {
                at = 0.5 * (alo + ahi);
            }
            let xt = point(at);
            let (ft, gt) = ev.eval(&xt);
            let dt = dot(&gt, d);
            if ft.is_finite() && ft <= f0 && best.as_ref().map_or(true, |b| ft < b.f) {
                *best = Some(Trial { alpha: at, x: xt.clone(), f: ft, g: gt.clone() });
            }
            if ft > f0 + C1 * at * d0 || ft >= flo {
                if ft.is_finite() && accept_approx(f0, d0, ft, dt) {
                    return Some(Trial { alpha: at, x: xt, f: ft, g: gt });
                }
                hi = (at, ft, dt);
            } else {
                if dt.abs() <= -C2 * d0 {
                    return Some(Trial { alpha: at, x: xt, f: ft, g: gt });
                }
                if dt * (ahi - alo) >= 0.0 {
                    hi = lo;
                }
                lo = (at, ft, dt);
            }
            if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1e-300) {
                break;
            }
        }
        None
    };

    while steps < max_steps {
        steps += 1;
        let xt = point(a);
        let (ft, gt) = ev.eval(&xt);
        let dt = dot(&gt, d);
        if ft.is_finite() && ft <= f0 && best.as_ref().map_or(true, |b| ft < b.f) {
            best = Some(Trial { alpha: a, x: xt.clone(), f: ft, g: gt.clone() });
        }
        if !ft.is_finite() {
            // shrink toward the last good point
            let r = zoom(ev, (a_prev, f_prev, dd_prev), (a, ft, 0.0), &mut steps, &mut best);
            return r.or(best.filter(|b| b.f < f0));
        }
        if ft > f0 + C1 * a * d0 || (steps > 1 && ft >= f_prev) {
            if accept_approx(f0, d0, ft, dt) {
                return Some(Trial { alpha: a, x: xt, f: ft, g: gt });
            }
            let r = zoom(ev, (a_prev, f_prev, dd_prev), (a, ft, dt), &mut steps, &mut best);
            return r.or(best.filter(|b| b.f < f0));
        }
        if dt.abs() <= -C2 * d0 {
            return Some(Trial { alpha: a, x: xt, f: ft, g: gt });
        }
        if dt >= 0.0 {
            let r = zoom(ev, (a, ft, dt), (a_prev, f_prev, dd_prev), &mut steps, &mut best);
            return r.or(best.filter(|b| b.f < f0));
        }
        a_prev = a;
        f_prev = ft;
        dd_prev = dt;
        a *= 2.0;
    }
    best.filter(|b| b.f < f0)
}

/// Minimizer of the cubic interpolating two points with derivatives.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    if !fb.is_finite() {
        return a + 0.5 * (b - a);
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

/// Projected backtracking (Armijo along the projection arc).
fn projected_search<O: Objective + ?Sized>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    bounds: &Bounds,
    alpha0: f64,
    max_steps: usize,
) -> Option<Trial> {
    let mut a = alpha0;
    for _ in 0..max_steps {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        bounds.project(&mut xt);
        let step: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        let slope = dot(g0, &step);
        let (ft, gt) = ev.eval(&xt);
        if ft.is_finite() && slope < 0.0 && ft <= f0 + C1 * slope {
            return Some(Trial { alpha: a, x: xt, f: ft, g: gt });
        }
        if ft.is_finite() && ft < f0 && slope < 0.0 && ft <= f0 + FLAT_EPS * f0.abs() {
            return Some(Trial { alpha: a, x: xt, f: ft, g: gt });
        }
        a *= 0.5;
    }
    None
}

fn run<O: Objective + ?Sized>(
    f: &O,
    x0: &[f64],
    opts: &OptimizerOptions,
    bounds: Option<&Bounds>,
) -> Result<(Vec<f64>, FitReport)> {
    opts.validate()?;
    if x0.len() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x0.len() });
    }
    let mut x = x0.to_vec();
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let mut ev = Evaluator { f, evals: 0 };
    let (mut fx, mut g) = ev.eval(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut report = FitReport {
        initial_objective: fx,
        final_objective: fx,
        iterations: 0,
        evaluations: 1,
        converged: false,
        termination_reason: Termination::MaxIter,
        trace: Vec::new(),
    };
    if x.is_empty() {
        report.converged = true;
        report.termination_reason = Termination::GradientTol;
        return Ok((x, report));
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.history_size);
    let mut reason = Termination::MaxIter;
    let mut iter = 0;
    while iter < opts.max_iterations {
        if projected_gradient_norm(&x, &g, bounds) <= opts.gradient_tolerance * fx.abs().max(1.0)
        {
            reason = Termination::GradientTol;
            break;
        }
        let active = active_set(&x, &g, bounds);
        let mut gm = g.clone();
        for (gi, a) in gm.iter_mut().zip(&active) {
            if *a {
                *gi = 0.0;
            }
        }
        let mut d = two_loop(&history, &gm);
        for (di, a) in d.iter_mut().zip(&active) {
            if *a {
                *di = 0.0;
            }
        }
        if !(dot(&d, &gm) < 0.0) {
            history.clear();
            d = gm.iter().map(|v| -v).collect();
        }
        let alpha0 = if history.is_empty() { (1.0 / inf_norm(&d)).min(1.0) } else { 1.0 };
        let trial = match bounds {
            None => wolfe_search(&mut ev, &x, fx, &g, &d, alpha0, opts.line_search_max_steps),
            Some(b) => {
                projected_search(&mut ev, &x, fx, &g, &d, b, alpha0, opts.line_search_max_steps)
            }
        };
        let trial = match trial {
            Some(t) => t,
            None if !history.is_empty() => {
                history.clear();
                continue;
            }
            None => {
                reason = Termination::LineSearchFailure;
                break;
            }
        };
        let _ = trial.alpha;
        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 && sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == opts.history_size {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = trial.x;
        fx = trial.f;
        g = trial.g;
        iter += 1;
        report.trace.push(fx);
    }
    report.final_objective = fx;
    report.iterations = iter;
    report.evaluations = ev.evals;
    report.termination_reason = reason;
    report.converged = reason == Termination::GradientTol;
    Ok((x, report))
}
