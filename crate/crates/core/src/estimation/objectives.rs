//! Mean-normalized objectives with analytic gradients.
//!
//! Sums over observations are split into fixed-size chunks and reduced in
//! chunk order, so results do not depend on the number of worker threads.

use super::{FitData, Layout};
use crate::model::{self, ExpertFamily, ModelParams};
use crate::optim::Objective;

const CHUNK: usize = 2048;

/// Sums `(value, gradient)` contributions over observations in a
/// thread-count independent order.
fn chunked_sum<F>(n: usize, dim: usize, grad: &mut [f64], per_chunk: F) -> f64
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) -> f64 + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<(f64, Vec<f64>)> = starts
        .iter()
        .map(|&lo| {
            let mut g = vec![0.0; dim];
            let v = per_chunk(lo..(lo + CHUNK).min(n), &mut g);
            (v, g)
        })
        .collect();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for (v, g) in parts {
        total += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    total * scale
}

/// Expert log-probability of `label0` and its gradient weights
/// `(1{y = s} − f_s)·act′(z_s)` for each class.
#[inline]
fn expert_terms(family: ExpertFamily, eta: &[f64], q: usize, x: &[f64], label0: usize, logits: &mut [f64], slopes: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for s in 0..logits.len() {
        let (a, da) = family.act_d1(model::dot(&eta[s * q..(s + 1) * q], x));
        logits[s] = a;
        slopes[s] = da;
        max = max.max(a);
    }
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let ln_f = logits[label0] - lse;
    for s in 0..logits.len() {
        let f_s = (logits[s] - lse).exp();
        let ind = if s == label0 { 1.0 } else { 0.0 };
        slopes[s] *= ind - f_s;
    }
    ln_f
}

/// `−(1/n)·Σ rᵢ ln π(xᵢ) + (1 − rᵢ) ln(1 − π(xᵢ))` over `(β, τ)`.
pub struct GateObjective<'a> {
    fd: &'a FitData<'a>,
    resp: &'a [f64],
}

impl<'a> GateObjective<'a> {
    pub(crate) fn new(fd: &'a FitData<'a>, resp: &'a [f64]) -> Self {
        GateObjective { fd, resp }
    }
}

impl Objective for GateObjective<'_> {
    fn dim(&self) -> usize {
        self.fd.data.d() + 1
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let data = self.fd.data;
        let d = data.d();
        let (beta, tau) = (&theta[..d], theta[d]);
        chunked_sum(data.n(), d + 1, grad, |range, g| {
            let mut v = 0.0;
            for i in range {
                let x = data.row(i);
                let a = model::dot(beta, x) + tau;
                let (ln_pi, ln_1m_pi) = model::log_gate(a);
                let r = self.resp[i];
                v -= r * ln_pi + (1.0 - r) * ln_1m_pi;
                let w = model::logistic(a) - r;
                g[..d].iter_mut().zip(x).for_each(|(gj, xj)| *gj += w * xj);
                g[d] += w;
            }
            v
        })
    }
}

/// `−(1/n)·Σ rᵢ ln f(Yᵢ | Xᵢ, η)` over the free expert columns.
pub struct ExpertObjective<'a> {
    fd: &'a FitData<'a>,
    resp: &'a [f64],
    family: ExpertFamily,
    layout: Layout,
    /// Full column-major `η`; anchored columns are read from here.
    base_eta: Vec<f64>,
}

impl<'a> ExpertObjective<'a> {
    pub(crate) fn new(fd: &'a FitData<'a>, resp: &'a [f64], params: &ModelParams, layout: Layout) -> Self {
        ExpertObjective {
            fd,
            resp,
            family: params.family_adapter,
            layout,
            base_eta: params.eta.as_slice().to_vec(),
        }
    }
}

impl Objective for ExpertObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.expert_len()
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let data = self.fd.data;
        let Layout { q, k, .. } = self.layout;
        let mut eta = self.base_eta.clone();
        eta[..theta.len()].copy_from_slice(theta);
        let dim = theta.len();
        chunked_sum(data.n(), dim, grad, |range, g| {
            let mut logits = vec![0.0; k];
            let mut slopes = vec![0.0; k];
            let mut v = 0.0;
            for i in range {
                let x = data.row(i);
                let label0 = data.labels()[i] as usize - 1;
                let r = self.resp[i];
                v -= r * expert_terms(self.family, &eta, q, x, label0, &mut logits, &mut slopes);
                for s in 0..dim / q {
                    let w = r * slopes[s];
                    g[s * q..(s + 1) * q].iter_mut().zip(x).for_each(|(gj, xj)| *gj -= w * xj);
                }
            }
            v
        })
    }
}

/// Mean negative observed log-likelihood over the packed `(β, τ, η_free)`.
pub struct DirectObjective<'a> {
    fd: &'a FitData<'a>,
    family: ExpertFamily,
    layout: Layout,
    base_eta: Vec<f64>,
}

impl<'a> DirectObjective<'a> {
    pub(crate) fn new(fd: &'a FitData<'a>, params: &ModelParams, layout: Layout) -> Self {
        DirectObjective {
            fd,
            family: params.family_adapter,
            layout,
            base_eta: params.eta.as_slice().to_vec(),
        }
    }
}

impl Objective for DirectObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let data = self.fd.data;
        let Layout { d, q, k, .. } = self.layout;
        let (beta, tau) = (&theta[..d], theta[d]);
        let free = &theta[d + 1..];
        let mut eta = self.base_eta.clone();
        eta[..free.len()].copy_from_slice(free);
        let k_free = free.len() / q;
        chunked_sum(data.n(), theta.len(), grad, |range, g| {
            let mut logits = vec![0.0; k];
            let mut slopes = vec![0.0; k];
            let mut v = 0.0;
            for i in range {
                let x = data.row(i);
                let label0 = data.labels()[i] as usize - 1;
                let a = model::dot(beta, x) + tau;
                let (ln_pi, ln_1m_pi) = model::log_gate(a);
                let ln_f = expert_terms(self.family, &eta, q, x, label0, &mut logits, &mut slopes);
                let adapter = ln_pi + ln_f;
                let ln_p = model::log_add_exp(adapter, ln_1m_pi + self.fd.ln_f0[i]);
                v -= ln_p;
                let r = (adapter - ln_p).exp();
                let w = model::logistic(a) - r;
                g[..d].iter_mut().zip(x).for_each(|(gj, xj)| *gj += w * xj);
                g[d] += w;
                let ge = &mut g[d + 1..];
                for s in 0..k_free {
                    let w = r * slopes[s];
                    ge[s * q..(s + 1) * q].iter_mut().zip(x).for_each(|(gj, xj)| *gj -= w * xj);
                }
            }
            v
        })
    }
}
