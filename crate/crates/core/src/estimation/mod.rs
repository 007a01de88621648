//! Maximum-likelihood fitting.
//!
//! Two routes share one parameter packing `θ = (β, τ, η_free)`:
//!
//! * EM: the E-step computes the posterior probability that each observation
//!   came from the adapter; the M-step maximizes the expected complete-data
//!   log-likelihood, which separates into a weighted logistic regression for
//!   the gate `(β, τ)` and a weighted multinomial regression for `η`. Each block
//!   is solved by BFGS.
//! * Direct: BFGS on the observed log-likelihood with the full chain-rule
//!   gradient.
//!
//! All objectives are averaged over observations so optimizer tolerances do
//! not depend on `n`.

mod objectives;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, DEFAULT_BOX_BOUND};
use crate::optim::{minimize, MinimizeOptions, Objective, OptimStatus};

pub use objectives::{DirectObjective, ExpertObjective, GateObjective};

/// Responsibilities are clamped to `[RESP_FLOOR, 1 − RESP_FLOOR]` inside the surrogate.
pub const RESP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Em,
    DirectMle,
}

/// Optimizer settings for the M-step and the direct route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub gtol: f64,
    pub m_step_max_iter: usize,
    pub direct_max_iter: usize,
    pub box_bound: f64,
    /// Carry each block's inverse-Hessian approximation into the next M-step.
    pub warm_start: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            gtol: 1e-6,
            m_step_max_iter: 200,
            direct_max_iter: 500,
            box_bound: DEFAULT_BOX_BOUND,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Absolute change in observed log-likelihood that stops EM.
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub init: ModelParams,
    /// Freeze expert column `K` at its initial value.
    pub anchor_last_class: bool,
    pub seed: u64,
    pub optim: OptimSettings,
}

impl FitConfig {
    /// Default EM configuration for a dataset of size `n`: tolerance `1e-8·n`,
    /// at most 300 outer iterations.
    pub fn new(init: ModelParams, n: usize) -> Self {
        FitConfig {
            method: FitMethod::Em,
            em_tol: 1e-8 * n.max(1) as f64,
            em_max_iter: 300,
            init,
            anchor_last_class: false,
            seed: 0,
            optim: OptimSettings::default(),
        }
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.em_tol > 0.0) {
            return Err(Error::Config(format!("em_tol must be positive, got {}", self.em_tol)));
        }
        self.init.validate()?;
        if self.init.d() != data.d() || self.init.k() != data.k() {
            return Err(Error::Shape(format!(
                "initial parameters have d = {}, K = {}; data have d = {}, K = {}",
                self.init.d(),
                self.init.k(),
                data.d(),
                data.k()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(rename = "params")]
    pub params_hat: ModelParams,
    pub loglik_trace: Vec<f64>,
    #[serde(rename = "iters")]
    pub n_em_iters: usize,
    pub status: FitStatus,
    /// Euclidean norm of the gradient of the mean negative log-likelihood at exit.
    #[serde(rename = "grad_norm")]
    pub grad_norm_final: f64,
    /// Number of BFGS solves that ended in a line-search failure.
    #[serde(default)]
    pub line_search_failures: usize,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// Layout of the packed parameter vector `(β, τ, η_free)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub d: usize,
    pub q: usize,
    pub k: usize,
    /// Number of learnable expert columns.
    pub k_free: usize,
}

impl Layout {
    pub fn new(params: &ModelParams, anchor_last_class: bool) -> Self {
        let k = params.k();
        Layout {
            d: params.d(),
            q: params.q(),
            k,
            k_free: if anchor_last_class { k - 1 } else { k },
        }
    }

    pub fn gate_len(&self) -> usize {
        self.d + 1
    }

    pub fn expert_len(&self) -> usize {
        self.q * self.k_free
    }

    pub fn len(&self) -> usize {
        self.gate_len() + self.expert_len()
    }

    pub fn pack_gate(&self, p: &ModelParams) -> Vec<f64> {
        let mut v = p.beta.clone();
        v.push(p.tau);
        v
    }

    pub fn pack_expert(&self, p: &ModelParams) -> Vec<f64> {
        p.eta.as_slice()[..self.expert_len()].to_vec()
    }

    pub fn pack(&self, p: &ModelParams) -> Vec<f64> {
        let mut v = self.pack_gate(p);
        v.extend(self.pack_expert(p));
        v
    }

    pub fn unpack_gate(&self, theta: &[f64], p: &mut ModelParams) {
        p.beta.copy_from_slice(&theta[..self.d]);
        p.tau = theta[self.d];
    }

    pub fn unpack_expert(&self, theta: &[f64], p: &mut ModelParams) {
        p.eta.as_mut_slice()[..self.expert_len()].copy_from_slice(theta);
    }

    pub fn unpack(&self, theta: &[f64], p: &mut ModelParams) {
        self.unpack_gate(&theta[..self.gate_len()], p);
        self.unpack_expert(&theta[self.gate_len()..], p);
    }
}

/// Per-dataset quantities that stay fixed during a fit.
pub(crate) struct FitData<'a> {
    pub data: &'a Dataset,
    /// `ln f₀(Yᵢ | Xᵢ, η₀)`.
    pub ln_f0: Vec<f64>,
}

impl<'a> FitData<'a> {
    pub fn new(data: &'a Dataset, params: &ModelParams) -> Self {
        let mut scratch = vec![0.0; params.k()];
        let ln_f0 = (0..data.n())
            .map(|i| {
                let lse = model::logits_lse(params.family_pretrained, params.eta0.as_slice(), params.q(), data.row(i), &mut scratch);
                scratch[data.labels()[i] as usize - 1] - lse
            })
            .collect();
        FitData { data, ln_f0 }
    }
}

fn check_fit_input(params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if params.d() != data.d() || params.k() != data.k() {
        return Err(Error::Shape(format!(
            "parameters have d = {}, K = {}; data have d = {}, K = {}",
            params.d(),
            params.k(),
            data.d(),
            data.k()
        )));
    }
    Ok(())
}

fn responsibilities_with(fd: &FitData<'_>, params: &ModelParams) -> Vec<f64> {
    let data = fd.data;
    let q = params.q();
    let mut scratch = vec![0.0; params.k()];
    (0..data.n())
        .map(|i| {
            let x = data.row(i);
            let (ln_pi, ln_1m_pi) = model::log_gate(model::dot(&params.beta, x) + params.tau);
            let lse = model::logits_lse(params.family_adapter, params.eta.as_slice(), q, x, &mut scratch);
            let adapter = ln_pi + scratch[data.labels()[i] as usize - 1] - lse;
            let pretrained = ln_1m_pi + fd.ln_f0[i];
            (adapter - model::log_add_exp(adapter, pretrained)).exp()
        })
        .collect()
}

/// Posterior probability that each observation was produced by the adapter.
pub fn responsibilities(params: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    check_fit_input(params, data)?;
    let fd = FitData::new(data, params);
    Ok(responsibilities_with(&fd, params))
}

/// Expected complete-data log-likelihood `Q` (unnormalized) for fixed responsibilities.
pub fn surrogate_q(resp: &[f64], data: &Dataset, params: &ModelParams) -> Result<f64> {
    check_fit_input(params, data)?;
    check_resp(resp, data)?;
    let fd = FitData::new(data, params);
    let resp = clamp_resp(resp);
    let layout = Layout::new(params, false);
    let gate = GateObjective::new(&fd, &resp);
    let expert = ExpertObjective::new(&fd, &resp, params, layout);
    let mut g = vec![0.0; layout.gate_len()];
    let mut ge = vec![0.0; layout.expert_len()];
    let n = data.n() as f64;
    Ok(-n * (gate.eval(&layout.pack_gate(params), &mut g) + expert.eval(&layout.pack_expert(params), &mut ge)))
}

/// Value and gradient of `−Q/n` with the pretrained term dropped, taken over
/// `(β, τ)` followed by the free columns of `η` in column-major order.
pub fn surrogate_gradient(resp: &[f64], data: &Dataset, params: &ModelParams, anchor_last_class: bool) -> Result<(f64, Vec<f64>)> {
    check_fit_input(params, data)?;
    check_resp(resp, data)?;
    let fd = FitData::new(data, params);
    let resp = clamp_resp(resp);
    let layout = Layout::new(params, anchor_last_class);
    let gate = GateObjective::new(&fd, &resp);
    let expert = ExpertObjective::new(&fd, &resp, params, layout);
    let mut g = vec![0.0; layout.gate_len()];
    let mut ge = vec![0.0; layout.expert_len()];
    let value = gate.eval(&layout.pack_gate(params), &mut g) + expert.eval(&layout.pack_expert(params), &mut ge);
    g.extend(ge);
    Ok((value, g))
}

/// Value and gradient of `−ℓ/n` over the same coordinates as [`surrogate_gradient`].
pub fn neg_loglik_gradient(data: &Dataset, params: &ModelParams, anchor_last_class: bool) -> Result<(f64, Vec<f64>)> {
    check_fit_input(params, data)?;
    let fd = FitData::new(data, params);
    let layout = Layout::new(params, anchor_last_class);
    let obj = DirectObjective::new(&fd, params, layout);
    let mut g = vec![0.0; layout.len()];
    let value = obj.eval(&layout.pack(params), &mut g);
    Ok((value, g))
}

fn check_resp(resp: &[f64], data: &Dataset) -> Result<()> {
    if resp.len() != data.n() {
        return Err(Error::Shape(format!("{} responsibilities for {} observations", resp.len(), data.n())));
    }
    Ok(())
}

fn clamp_resp(resp: &[f64]) -> Vec<f64> {
    resp.iter().map(|r| r.clamp(RESP_FLOOR, 1.0 - RESP_FLOOR)).collect()
}

/// Outcome of one M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub params: ModelParams,
    pub line_search_failures: usize,
    pub gate_iterations: usize,
    pub expert_iterations: usize,
}

#[derive(Default)]
struct WarmStart {
    gate: Option<Vec<f64>>,
    expert: Option<Vec<f64>>,
}

fn block_options(cfg: &FitConfig, max_iter: usize, warm: Option<&Vec<f64>>) -> MinimizeOptions {
    MinimizeOptions {
        gtol: cfg.optim.gtol,
        max_iter,
        box_bound: Some(cfg.optim.box_bound),
        initial_inv_hessian: if cfg.optim.warm_start { warm.cloned() } else { None },
        ..MinimizeOptions::default()
    }
}

fn m_step_inner(fd: &FitData<'_>, resp: &[f64], current: &ModelParams, cfg: &FitConfig, warm: &mut WarmStart) -> Result<MStep> {
    let layout = Layout::new(current, cfg.anchor_last_class);
    let resp = clamp_resp(resp);
    let mut next = current.clone();
    let mut failures = 0;

    let gate = GateObjective::new(fd, &resp);
    let x0 = layout.pack_gate(current);
    let res = minimize(&gate, &x0, &block_options(cfg, cfg.optim.m_step_max_iter, warm.gate.as_ref()))?;
    failures += usize::from(res.status == OptimStatus::LineSearchFail);
    let mut g0 = vec![0.0; x0.len()];
    if res.f_opt <= gate.eval(&x0, &mut g0) {
        layout.unpack_gate(&res.x_opt, &mut next);
    }
    let gate_iterations = res.iterations;
    warm.gate = Some(res.inv_hessian);

    let expert = ExpertObjective::new(fd, &resp, current, layout);
    let x0 = layout.pack_expert(current);
    let res = minimize(&expert, &x0, &block_options(cfg, cfg.optim.m_step_max_iter, warm.expert.as_ref()))?;
    failures += usize::from(res.status == OptimStatus::LineSearchFail);
    let mut g0 = vec![0.0; x0.len()];
    if res.f_opt <= expert.eval(&x0, &mut g0) {
        layout.unpack_expert(&res.x_opt, &mut next);
    }
    let expert_iterations = res.iterations;
    warm.expert = Some(res.inv_hessian);

    Ok(MStep {
        params: next,
        line_search_failures: failures,
        gate_iterations,
        expert_iterations,
    })
}

/// One M-step: BFGS on the gate block, then on the expert block, each
/// maximizing its part of `Q` for the given responsibilities.
pub fn m_step(resp: &[f64], data: &Dataset, current: &ModelParams, cfg: &FitConfig) -> Result<MStep> {
    check_fit_input(current, data)?;
    if resp.len() != data.n() {
        return Err(Error::Shape(format!("{} responsibilities for {} observations", resp.len(), data.n())));
    }
    let fd = FitData::new(data, current);
    m_step_inner(&fd, resp, current, cfg, &mut WarmStart::default())
}

fn observed_grad_norm(fd: &FitData<'_>, params: &ModelParams, layout: Layout) -> f64 {
    let obj = DirectObjective::new(fd, params, layout);
    let mut g = vec![0.0; layout.len()];
    obj.eval(&layout.pack(params), &mut g);
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn fit_em(fd: &FitData<'_>, cfg: &FitConfig) -> Result<FitResult> {
    let layout = Layout::new(&cfg.init, cfg.anchor_last_class);
    let mut params = cfg.init.clone();
    let mut ll = model::log_likelihood(&params, fd.data)?;
    let mut trace = vec![ll];
    let mut warm = WarmStart::default();
    let mut failures = 0;
    let mut status = FitStatus::MaxIter;
    let mut iters = 0;
    while iters < cfg.em_max_iter {
        iters += 1;
        let resp = responsibilities_with(fd, &params);
        let step = m_step_inner(fd, &resp, &params, cfg, &mut warm)?;
        failures += step.line_search_failures;
        let next_ll = match model::log_likelihood(&step.params, fd.data) {
            Ok(v) => v,
            Err(_) => {
                return Err(Error::Divergent {
                    iteration: iters,
                    last_finite: Box::new(params),
                })
            }
        };
        params = step.params;
        trace.push(next_ll);
        let delta = next_ll - ll;
        ll = next_ll;
        if delta.abs() < cfg.em_tol {
            status = FitStatus::Converged;
            break;
        }
    }
    Ok(FitResult {
        grad_norm_final: observed_grad_norm(fd, &params, layout),
        params_hat: params,
        loglik_trace: trace,
        n_em_iters: iters,
        status,
        line_search_failures: failures,
    })
}

fn fit_direct(fd: &FitData<'_>, cfg: &FitConfig) -> Result<FitResult> {
    let layout = Layout::new(&cfg.init, cfg.anchor_last_class);
    let ll0 = model::log_likelihood(&cfg.init, fd.data)?;
    let obj = DirectObjective::new(fd, &cfg.init, layout);
    let opts = MinimizeOptions {
        gtol: cfg.optim.gtol,
        max_iter: cfg.optim.direct_max_iter,
        box_bound: Some(cfg.optim.box_bound),
        ..MinimizeOptions::default()
    };
    let res = minimize(&obj, &layout.pack(&cfg.init), &opts)?;
    let mut params = cfg.init.clone();
    layout.unpack(&res.x_opt, &mut params);
    let ll = model::log_likelihood(&params, fd.data).map_err(|_| Error::Divergent {
        iteration: res.iterations,
        last_finite: Box::new(cfg.init.clone()),
    })?;
    Ok(FitResult {
        params_hat: params,
        loglik_trace: vec![ll0, ll],
        n_em_iters: res.iterations,
        status: if res.status == OptimStatus::Converged {
            FitStatus::Converged
        } else {
            FitStatus::MaxIter
        },
        grad_norm_final: res.grad_norm,
        line_search_failures: usize::from(res.status == OptimStatus::LineSearchFail),
    })
}

/// Maximum-likelihood fit of the adapter and gate parameters.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    check_fit_input(&cfg.init, data)?;
    cfg.validate(data)?;
    let fd = FitData::new(data, &cfg.init);
    match cfg.method {
        FitMethod::Em => fit_em(&fd, cfg),
        FitMethod::DirectMle => fit_direct(&fd, cfg),
    }
}
