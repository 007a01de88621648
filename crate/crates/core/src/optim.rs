//! BFGS quasi-Newton minimization with a strong-Wolfe line search.
//!
//! The line search follows the bracket-then-zoom scheme of Nocedal & Wright
//! (Algorithms 3.5/3.6) with safeguarded cubic interpolation. The inverse
//! Hessian approximation is reset to the identity whenever the curvature
//! condition `sᵀy > 1e-10·‖s‖‖y‖` fails.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable function `ℝᵖ → ℝ`.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Returns the value at `x` and writes the gradient into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapts a closure to [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    Converged,
    MaxIter,
    LineSearchFail,
    /// Relative decrease fell below `ftol` before the gradient test passed.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    /// Stop when the Euclidean gradient norm is at most this.
    pub gtol: f64,
    /// Stop when `|Δf| ≤ ftol·max(1, |f|)`; zero disables the test.
    pub ftol: f64,
    pub max_iter: usize,
    /// Symmetric per-coordinate box `[-b, b]`, enforced by projection.
    pub box_bound: Option<f64>,
    pub c1: f64,
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
    /// Warm-start inverse Hessian (row-major `p × p`).
    pub initial_inv_hessian: Option<Vec<f64>>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            gtol: 1e-6,
            ftol: 0.0,
            max_iter: 200,
            box_bound: None,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
            initial_inv_hessian: None,
        }
    }
}

/// One accepted step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub alpha: f64,
    pub f_before: f64,
    pub f_after: f64,
    /// Directional derivative at the start of the step.
    pub slope_before: f64,
    /// Directional derivative at the accepted point.
    pub slope_after: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: OptimStatus,
    pub evaluations: usize,
    /// Final inverse Hessian approximation (row-major).
    pub inv_hessian: Vec<f64>,
    pub steps: Vec<StepInfo>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn identity(p: usize) -> Vec<f64> {
    let mut h = vec![0.0; p * p];
    (0..p).for_each(|i| h[i * p + i] = 1.0);
    h
}

struct Counter<'a, O: Objective> {
    obj: &'a O,
    evals: usize,
}

impl<O: Objective> Counter<'_, O> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        self.obj.eval(x, g)
    }
}

#[derive(Clone, Copy)]
struct LinePoint {
    alpha: f64,
    f: f64,
    slope: f64,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, if it exists.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Strong-Wolfe line search along `dir`. On success returns the accepted step
/// with `trial`/`g_trial` holding the new point and its gradient.
#[allow(clippy::too_many_arguments)]
fn line_search<O: Objective>(
    f: &mut Counter<'_, O>,
    x: &[f64],
    fx: f64,
    slope0: f64,
    dir: &[f64],
    opts: &MinimizeOptions,
    trial: &mut [f64],
    g_trial: &mut [f64],
    refine: bool,
) -> std::result::Result<LinePoint, Option<LinePoint>> {
    let mut evals = 0usize;
    let mut best: Option<LinePoint> = None;
    let mut probe = |alpha: f64, trial: &mut [f64], g_trial: &mut [f64]| -> LinePoint {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(dir) {
            *t = xi + alpha * di;
        }
        let fv = f.eval(trial, g_trial);
        let slope = dot(g_trial, dir);
        if fv.is_finite() && slope.is_finite() {
            LinePoint { alpha, f: fv, slope }
        } else {
            LinePoint {
                alpha,
                f: f64::INFINITY,
                slope: f64::INFINITY,
            }
        }
    };
    let armijo = |p: &LinePoint| p.f <= fx + opts.c1 * p.alpha * slope0;
    let curvature = |p: &LinePoint| p.slope.abs() <= -opts.c2 * slope0;

    let mut prev = LinePoint {
        alpha: 0.0,
        f: fx,
        slope: slope0,
    };
    let mut alpha = 1.0;
    let (mut lo, mut hi);
    loop {
        if evals >= opts.max_line_search {
            return Err(best);
        }
        evals += 1;
        let cur = probe(alpha, trial, g_trial);
        if armijo(&cur) && best.as_ref().is_none_or(|b| cur.f < b.f) {
            best = Some(cur);
        }
        if !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            if prev.alpha == 0.0 && (refine || cur.slope.abs() > 0.1 * slope0.abs()) {
                // A poorly scaled first trial: one interpolation pass toward the
                // exact minimizer, kept only if it is also acceptable.
                if let Some(t) = cubic_min(0.0, fx, slope0, cur.alpha, cur.f, cur.slope) {
                    if t > 0.0 && t < 4.0 * cur.alpha && evals < opts.max_line_search {
                        let keep: Vec<f64> = trial.to_vec();
                        let keep_g: Vec<f64> = g_trial.to_vec();
                        let alt = probe(t, trial, g_trial);
                        if armijo(&alt) && curvature(&alt) && alt.f < cur.f {
                            return Ok(alt);
                        }
                        trial.copy_from_slice(&keep);
                        g_trial.copy_from_slice(&keep_g);
                    }
                }
            }
            return Ok(cur);
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        prev = cur;
        alpha *= 2.0;
    }

    // zoom: `lo` satisfies Armijo with the lowest value seen; `hi` brackets.
    loop {
        if evals >= opts.max_line_search {
            return Err(best);
        }
        evals += 1;
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1.0) {
            return Err(best);
        }
        let interp = if hi.f.is_finite() {
            cubic_min(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope)
        } else {
            None
        };
        let guard = 0.1 * width;
        let next = match interp {
            Some(t) if t > a + guard && t < b - guard => t,
            _ => 0.5 * (a + b),
        };
        let cur = probe(next, trial, g_trial);
        if armijo(&cur) && best.as_ref().is_none_or(|b| cur.f < b.f) {
            best = Some(cur);
        }
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
}

fn bfgs<O: Objective>(obj: &O, x0: &[f64], opts: &MinimizeOptions, h_init: Option<&[f64]>) -> Result<OptimResult> {
    let p = obj.dim();
    if x0.len() != p {
        return Err(Error::Shape(format!("start point has length {}, objective dimension is {p}", x0.len())));
    }
    let mut counter = Counter { obj, evals: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; p];
    let mut fx = counter.eval(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("objective is not finite at the starting point".into()));
    }
    let mut h = match h_init {
        Some(h0) if h0.len() == p * p => h0.to_vec(),
        _ => identity(p),
    };
    let mut scale_first = h_init.is_none();
    let mut dir = vec![0.0; p];
    let mut trial = vec![0.0; p];
    let mut g_trial = vec![0.0; p];
    let mut s = vec![0.0; p];
    let mut y = vec![0.0; p];
    let mut hy = vec![0.0; p];
    let mut steps = Vec::new();
    let mut status = OptimStatus::MaxIter;
    let mut iterations = 0;

    loop {
        if norm(&g) <= opts.gtol {
            status = OptimStatus::Converged;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let mut reset_tried = false;
        let mut fallback = None;
        let accepted = loop {
            for i in 0..p {
                dir[i] = -dot(&h[i * p..(i + 1) * p], &g);
            }
            let mut slope0 = dot(&g, &dir);
            if !(slope0 < 0.0) {
                h = identity(p);
                scale_first = true;
                dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                slope0 = dot(&g, &dir);
                reset_tried = true;
            }
            match line_search(&mut counter, &x, fx, slope0, &dir, opts, &mut trial, &mut g_trial, scale_first) {
                Ok(pt) => break Some((pt, slope0)),
                Err(best) => {
                    if let Some(b) = best {
                        fallback = Some((b.alpha, dir.clone()));
                    }
                    if reset_tried {
                        break None;
                    }
                    h = identity(p);
                    scale_first = true;
                    reset_tried = true;
                }
            }
        };
        let Some((pt, slope0)) = accepted else {
            // Keep the best Armijo point seen before giving up.
            if let Some((alpha, d)) = fallback {
                for i in 0..p {
                    trial[i] = x[i] + alpha * d[i];
                }
                let ft = counter.eval(&trial, &mut g_trial);
                if ft < fx {
                    x.copy_from_slice(&trial);
                    g.copy_from_slice(&g_trial);
                    fx = ft;
                }
            }
            status = OptimStatus::LineSearchFail;
            break;
        };
        iterations += 1;
        for i in 0..p {
            s[i] = trial[i] - x[i];
            y[i] = g_trial[i] - g[i];
        }
        steps.push(StepInfo {
            alpha: pt.alpha,
            f_before: fx,
            f_after: pt.f,
            slope_before: slope0,
            slope_after: pt.slope,
        });
        let f_prev = fx;
        x.copy_from_slice(&trial);
        g.copy_from_slice(&g_trial);
        fx = pt.f;

        let sy = dot(&s, &y);
        if sy <= 1e-10 * norm(&s) * norm(&y) {
            h = identity(p);
            scale_first = true;
        } else {
            if scale_first {
                let gamma = sy / dot(&y, &y);
                h = identity(p);
                h.iter_mut().for_each(|v| *v *= gamma);
                scale_first = false;
            }
            let rho = 1.0 / sy;
            for i in 0..p {
                hy[i] = dot(&h[i * p..(i + 1) * p], &y);
            }
            let yhy = dot(&y, &hy);
            let coef = rho * rho * yhy + rho;
            for i in 0..p {
                for j in 0..p {
                    h[i * p + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + coef * s[i] * s[j];
                }
            }
        }

        if opts.ftol > 0.0 && (f_prev - fx).abs() <= opts.ftol * fx.abs().max(1.0) {
            status = if norm(&g) <= opts.gtol {
                OptimStatus::Converged
            } else {
                OptimStatus::Stalled
            };
            break;
        }
    }

    Ok(OptimResult {
        grad_norm: norm(&g),
        x_opt: x,
        f_opt: fx,
        iterations,
        status,
        evaluations: counter.evals,
        inv_hessian: h,
        steps,
    })
}

fn project(x: &mut [f64], bound: f64) -> bool {
    let mut moved = false;
    for v in x.iter_mut() {
        let c = v.clamp(-bound, bound);
        moved |= c != *v;
        *v = c;
    }
    moved
}

/// Minimizes `obj` from `x0`.
///
/// With a box bound, the unconstrained BFGS result is projected onto the box;
/// if that moves it, BFGS is restarted once from the projected point and the
/// outcome projected again.
pub fn minimize<O: Objective>(obj: &O, x0: &[f64], opts: &MinimizeOptions) -> Result<OptimResult> {
    let mut res = bfgs(obj, x0, opts, opts.initial_inv_hessian.as_deref())?;
    let Some(bound) = opts.box_bound else {
        return Ok(res);
    };
    let mut x = res.x_opt.clone();
    if !project(&mut x, bound) {
        return Ok(res);
    }
    let first_iters = res.iterations;
    let first_evals = res.evaluations;
    let mut steps = std::mem::take(&mut res.steps);
    let mut polished = bfgs(obj, &x, opts, None)?;
    let mut xp = polished.x_opt.clone();
    if project(&mut xp, bound) {
        let mut g = vec![0.0; obj.dim()];
        polished.f_opt = obj.eval(&xp, &mut g);
        polished.grad_norm = norm(&g);
        polished.evaluations += 1;
        polished.x_opt = xp;
        if polished.status == OptimStatus::Converged && polished.grad_norm > opts.gtol {
            polished.status = OptimStatus::Stalled;
        }
    }
    steps.append(&mut polished.steps);
    polished.steps = steps;
    polished.iterations += first_iters;
    polished.evaluations += first_evals;
    Ok(polished)
}
