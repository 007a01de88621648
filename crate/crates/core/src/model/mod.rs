//! The softmax-gated contaminated mixture of multinomial logistic experts.
//!
//! For covariate `x` and class `s`,
//!
//! ```text
//! p_G(s | x) = (1 − π(x))·f₀(s | x, η₀) + π(x)·f(s | x, η)
//! π(x)       = exp(βᵀx + τ) / (1 + exp(βᵀx + τ))
//! f(s | x, η) = softmax_s( act(η₁ᵀx), …, act(η_Kᵀx) )
//! ```
//!
//! where `f₀` is the frozen pretrained expert and `f` the learnable adapter.
//! Every probability is evaluated through a log-domain path.

mod family;
mod params;

pub use family::{logistic, softplus, ExpertFamily};
pub use params::{ModelParams, DEFAULT_BOX_BOUND};
pub(crate) use params::row_major;

use nalgebra::DMatrix;

use crate::datagen::Dataset;
use crate::error::{Error, Result};

/// A probability vector over the `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPmf {
    probs: Vec<f64>,
}

impl ConditionalPmf {
    /// Validates non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 * probs.len().max(1) as f64 {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ConditionalPmf { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// `(ln π, ln(1 − π))` for gate activation `a = βᵀx + τ`.
#[inline]
pub(crate) fn log_gate(a: f64) -> (f64, f64) {
    (-softplus(-a), -softplus(a))
}

/// `ln(e^a + e^b)`.
#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Writes the expert logits `act(η_sᵀx)` into `out` and returns their log-sum-exp.
/// `eta` is column-major `q × K`.
#[inline]
pub(crate) fn logits_lse(family: ExpertFamily, eta: &[f64], q: usize, x: &[f64], out: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (s, o) in out.iter_mut().enumerate() {
        let z = dot(&eta[s * q..(s + 1) * q], x);
        *o = family.act(z);
        max = max.max(*o);
    }
    let sum: f64 = out.iter().map(|l| (l - max).exp()).sum();
    max + sum.ln()
}

fn check_x(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Shape(format!(
            "covariate has length {}, expected {expected}",
            x.len()
        )));
    }
    Ok(())
}

/// Adapter selection probability `π(x)`.
pub fn gate_weight(params: &ModelParams, x: &[f64]) -> Result<f64> {
    check_x(params.d(), x)?;
    Ok(logistic(dot(&params.beta, x) + params.tau))
}

/// Softmax over the logits `act(η_sᵀx)`.
pub fn expert_pmf(family: ExpertFamily, eta: &DMatrix<f64>, x: &[f64]) -> Result<ConditionalPmf> {
    let q = eta.nrows();
    check_x(q, x)?;
    let mut logits = vec![0.0; eta.ncols()];
    for (s, l) in logits.iter_mut().enumerate() {
        *l = family.act(dot(&eta.as_slice()[s * q..(s + 1) * q], x));
        if !l.is_finite() {
            return Err(Error::NonFiniteLogit { column: s });
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ConditionalPmf { probs })
}

/// The mixture `p_G(· | x)`.
pub fn conditional_pmf(params: &ModelParams, x: &[f64]) -> Result<ConditionalPmf> {
    let pi = gate_weight(params, x)?;
    let f0 = expert_pmf(params.family_pretrained, &params.eta0, x)?;
    let f = expert_pmf(params.family_adapter, &params.eta, x)?;
    let probs = f0
        .probs
        .iter()
        .zip(&f.probs)
        .map(|(a, b)| (1.0 - pi) * a + pi * b)
        .collect();
    Ok(ConditionalPmf { probs })
}

/// `ln p_G(y | x)` for a zero-based label, evaluated in the log domain.
pub(crate) fn log_prob_point(params: &ModelParams, x: &[f64], label0: usize, scratch: &mut [f64]) -> f64 {
    let q = params.q();
    let (ln_pi, ln_1m_pi) = log_gate(dot(&params.beta, x) + params.tau);
    let lse0 = logits_lse(params.family_pretrained, params.eta0.as_slice(), q, x, scratch);
    let ln_f0 = scratch[label0] - lse0;
    let lse = logits_lse(params.family_adapter, params.eta.as_slice(), q, x, scratch);
    let ln_f = scratch[label0] - lse;
    log_add_exp(ln_1m_pi + ln_f0, ln_pi + ln_f)
}

fn check_data(params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.d() != params.d() {
        return Err(Error::Shape(format!(
            "dataset has d = {}, parameters have d = {}",
            data.d(),
            params.d()
        )));
    }
    let k = params.k() as u32;
    if let Some(bad) = data.labels().iter().find(|&&y| y == 0 || y > k) {
        return Err(Error::Data(format!("label {bad} outside 1..={k}")));
    }
    Ok(())
}

/// Observed-data log-likelihood `Σᵢ ln p_G(Yᵢ | Xᵢ)`.
pub fn log_likelihood(params: &ModelParams, data: &Dataset) -> Result<f64> {
    check_data(params, data)?;
    let mut scratch = vec![0.0; params.k()];
    let total: f64 = (0..data.n())
        .map(|i| log_prob_point(params, data.row(i), data.labels()[i] as usize - 1, &mut scratch))
        .sum();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("log-likelihood evaluated to {total}")));
    }
    Ok(total)
}

/// Membership in the restricted space where
/// `exp(τ) ≥ l_n / (min{|η_{i,u}|², |β_v|²} · √n)`.
pub fn in_restricted_space(params: &ModelParams, l_n: f64, n: usize) -> bool {
    let min_sq = params
        .eta
        .iter()
        .chain(params.beta.iter())
        .map(|v| v * v)
        .fold(f64::INFINITY, f64::min);
    if min_sq <= 0.0 || n == 0 {
        return false;
    }
    params.tau.exp() >= l_n / (min_sq * (n as f64).sqrt())
}

#[cfg(test)]
mod tests;
