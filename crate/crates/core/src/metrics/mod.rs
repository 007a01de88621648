//! Distances between conditional distributions and parameter discrepancies.
//!
//! `d1_loss` and `d2_loss` are the parameter losses that lower-bound the
//! expected Hellinger distance in the homogeneous and heterogeneous regimes.
//! `hellinger_bound_scan` probes that lower bound empirically.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ConditionalPmf, ModelParams};
use crate::rng::{Purpose, Stream};

/// Which lower-bound loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Homogeneous,
    Heterogeneous,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Homogeneous => "homogeneous",
            Regime::Heterogeneous => "heterogeneous",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_pair(p: &ConditionalPmf, q: &ConditionalPmf) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("pmfs have lengths {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// `sqrt(½ Σ (√pᵢ − √qᵢ)²)`.
pub fn hellinger(p: &ConditionalPmf, q: &ConditionalPmf) -> Result<f64> {
    check_pair(p, q)?;
    Ok(hellinger_raw(p.probs(), q.probs()))
}

fn hellinger_raw(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    (0.5 * s).sqrt().min(1.0)
}

/// `½ Σ |pᵢ − qᵢ|`.
pub fn total_variation(p: &ConditionalPmf, q: &ConditionalPmf) -> Result<f64> {
    check_pair(p, q)?;
    let s: f64 = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * s).min(1.0))
}

fn check_params(g: &ModelParams, g_star: &ModelParams) -> Result<()> {
    g.same_shape(g_star)?;
    if g.eta0 != g_star.eta0 {
        return Err(Error::Shape("parameter sets use different pretrained experts".into()));
    }
    Ok(())
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn col_dist(a: &ModelParams, b: &nalgebra::DMatrix<f64>, i: usize) -> f64 {
    norm(a.eta.column(i).iter().zip(b.column(i).iter()).map(|(x, y)| x - y))
}

/// Homogeneous-regime loss, summed over every expert column.
pub fn d1_loss(g: &ModelParams, g_star: &ModelParams) -> Result<f64> {
    d1_loss_capped(g, g_star, g.k())
}

/// Homogeneous-regime loss summed over the first `cap` expert columns.
pub fn d1_loss_capped(g: &ModelParams, g_star: &ModelParams, cap: usize) -> Result<f64> {
    check_params(g, g_star)?;
    if cap == 0 || cap > g.k() {
        return Err(Error::Input(format!("column cap {cap} outside 1..={}", g.k())));
    }
    let (w, w_star) = (g.tau.exp(), g_star.tau.exp());
    let beta_dist = norm(g.beta.iter().zip(&g_star.beta).map(|(a, b)| a - b));
    let mut sq = 0.0;
    let mut sq_star = 0.0;
    let mut cross = 0.0;
    for i in 0..cap {
        let off = col_dist(g, &g.eta0, i);
        let off_star = col_dist(g_star, &g.eta0, i);
        sq += off * off;
        sq_star += off_star * off_star;
        cross += (w * off + w_star * off_star) * (beta_dist + col_dist(g, &g_star.eta, i));
    }
    let value = w * sq + w_star * sq_star - w.min(w_star) * (sq + sq_star) + cross;
    Ok(value.max(0.0))
}

/// Heterogeneous-regime loss; the expert sum skips the anchored last column.
pub fn d2_loss(g: &ModelParams, g_star: &ModelParams) -> Result<f64> {
    check_params(g, g_star)?;
    let (w, w_star) = (g.tau.exp(), g_star.tau.exp());
    let beta_dist = norm(g.beta.iter().zip(&g_star.beta).map(|(a, b)| a - b));
    let eta_dist: f64 = (0..g.k() - 1).map(|i| col_dist(g, &g_star.eta, i)).sum();
    Ok((w - w_star).abs() + (w + w_star) * (beta_dist + eta_dist))
}

/// Per-block estimation errors reported by the rate study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    /// `|exp τ̂ − exp τ*|`.
    pub err_exp_tau: f64,
    /// `‖β̂ − β*‖`.
    pub err_beta: f64,
    /// `Σᵢ ‖η̂ᵢ − η*ᵢ‖` over every column.
    pub err_eta: f64,
}

impl ParamErrors {
    pub const NAMES: [&'static str; 3] = ["err_exp_tau", "err_beta", "err_eta"];

    pub fn between(est: &ModelParams, truth: &ModelParams) -> Result<Self> {
        est.same_shape(truth)?;
        Ok(ParamErrors {
            err_exp_tau: (est.tau.exp() - truth.tau.exp()).abs(),
            err_beta: norm(est.beta.iter().zip(&truth.beta).map(|(a, b)| a - b)),
            err_eta: (0..est.k()).map(|i| col_dist(est, &truth.eta, i)).sum(),
        })
    }

    pub fn values(&self) -> [f64; 3] {
        [self.err_exp_tau, self.err_beta, self.err_eta]
    }
}

/// Monte Carlo settings for covariate averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub m: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo { m: 20_000, seed: 0 }
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

const MC_CHUNK: usize = 1024;

/// The `i`-th standard-Gaussian covariate of the stream keyed by `seed`.
pub(crate) fn mc_covariate(seed: u64, i: usize, out: &mut [f64]) {
    Stream::new(seed, Purpose::MonteCarlo, i as u64).normals(out);
}

/// `E_X[d_H(p_A(·|X), p_B(·|X))]` over standard-Gaussian `X`. Point `i` always
/// uses the same covariate for a given seed, so estimates at different `m`
/// share their leading draws.
pub fn expected_hellinger(ga: &ModelParams, gb: &ModelParams, mc: MonteCarlo) -> Result<McEstimate> {
    ga.same_shape(gb)?;
    if mc.m == 0 {
        return Err(Error::Input("Monte Carlo size must be positive".into()));
    }
    let d = ga.d();
    let starts: Vec<usize> = (0..mc.m).step_by(MC_CHUNK).collect();
    let parts: Vec<(f64, f64)> = starts
        .par_iter()
        .map(|&lo| {
            let mut x = vec![0.0; d];
            let (mut s1, mut s2) = (0.0, 0.0);
            for i in lo..(lo + MC_CHUNK).min(mc.m) {
                mc_covariate(mc.seed, i, &mut x);
                let pa = model::conditional_pmf(ga, &x).expect("shape checked");
                let pb = model::conditional_pmf(gb, &x).expect("shape checked");
                let h = hellinger_raw(pa.probs(), pb.probs());
                s1 += h;
                s2 += h * h;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = parts.iter().fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e));
    let m = mc.m as f64;
    let mean = s1 / m;
    let se = if mc.m > 1 {
        ((s2 - m * mean * mean).max(0.0) / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, se })
}

/// Settings for `hellinger_bound_scan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub n_pairs: usize,
    /// Perturbation radii, positive and strictly decreasing.
    pub radii: Vec<f64>,
    pub mc: MonteCarlo,
    pub seed: u64,
    /// Sample size defining the restricted space in the homogeneous regime.
    #[serde(default = "default_restrict_n")]
    pub restrict_n: usize,
    /// Column cap for the homogeneous loss; `None` sums over all columns.
    #[serde(default)]
    pub d1_cap: Option<usize>,
}

fn default_restrict_n() -> usize {
    1_000_000
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            n_pairs: 200,
            radii: vec![0.2, 0.1, 0.05, 0.025],
            mc: MonteCarlo::default(),
            seed: 0,
            restrict_n: default_restrict_n(),
            d1_cap: None,
        }
    }
}

/// `l_n = ln n · ln ln n`, the slowly growing factor in the restricted space.
pub fn restriction_factor(n: usize) -> f64 {
    let ln = (n as f64).ln();
    ln * ln.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub epsilon: f64,
    pub pair_id: usize,
    pub ratio: f64,
    pub d_loss: f64,
    pub e_hellinger: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    pub epsilon: f64,
    /// `None` when no pair at this radius had a positive loss.
    pub min_ratio: Option<f64>,
    pub skipped_zero_loss: usize,
    pub rejected_restricted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub regime: Regime,
    pub rows: Vec<ScanRow>,
    pub summary: Vec<RadiusSummary>,
}

impl ScanReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epsilon", "pair_id", "ratio", "d_loss", "e_hellinger", "se"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.epsilon.to_string(),
                r.pair_id.to_string(),
                r.ratio.to_string(),
                r.d_loss.to_string(),
                r.e_hellinger.to_string(),
                r.se.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

enum PairOutcome {
    Row(ScanRow),
    ZeroLoss,
    Rejected,
}

/// Uniform draw from the ∞-ball of radius `eps` around `g_star`. The last
/// expert column stays anchored. In the homogeneous regime `τ` is raised to
/// the restricted-space floor when needed, and the pair is rejected if the
/// floor is infinite.
fn perturb(regime: Regime, g_star: &ModelParams, eps: f64, cfg: &ScanConfig, stream: &mut Stream) -> Option<ModelParams> {
    let mut g = g_star.clone();
    let k = g.k();
    g.beta.iter_mut().for_each(|b| *b += stream.uniform_in(-eps, eps));
    g.tau += stream.uniform_in(-eps, eps);
    for i in 0..k - 1 {
        for v in g.eta.column_mut(i).iter_mut() {
            *v += stream.uniform_in(-eps, eps);
        }
    }
    if regime == Regime::Homogeneous {
        let l_n = restriction_factor(cfg.restrict_n);
        if !model::in_restricted_space(&g, l_n, cfg.restrict_n) {
            let min_sq = g.eta.iter().chain(&g.beta).map(|v| v * v).fold(f64::INFINITY, f64::min);
            if min_sq <= 0.0 {
                return None;
            }
            // Nudge just past the boundary so the membership test holds after rounding.
            g.tau = (l_n / (min_sq * (cfg.restrict_n as f64).sqrt())).ln() + 1e-12;
            if !model::in_restricted_space(&g, l_n, cfg.restrict_n) {
                return None;
            }
        }
    }
    Some(g)
}

/// Minimum of `E_X[d_H] / loss` over random neighbours of `g_star` at each radius.
pub fn hellinger_bound_scan(regime: Regime, g_star: &ModelParams, cfg: &ScanConfig) -> Result<ScanReport> {
    g_star.validate()?;
    if cfg.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) || cfg.radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("radii must be positive and strictly decreasing".into()));
    }
    if cfg.mc.m == 0 {
        return Err(Error::Config("Monte Carlo size must be positive".into()));
    }
    if let Some(cap) = cfg.d1_cap {
        if cap == 0 || cap > g_star.k() {
            return Err(Error::Config(format!("d1_cap {cap} outside 1..={}", g_star.k())));
        }
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (r_idx, &eps) in cfg.radii.iter().enumerate() {
        let outcomes: Vec<Result<PairOutcome>> = (0..cfg.n_pairs)
            .into_par_iter()
            .map(|pair| {
                let mut stream = Stream::new(cfg.seed, Purpose::Scan, ((r_idx as u64) << 32) | pair as u64);
                let Some(g) = perturb(regime, g_star, eps, cfg, &mut stream) else {
                    return Ok(PairOutcome::Rejected);
                };
                let loss = match regime {
                    Regime::Homogeneous => d1_loss_capped(&g, g_star, cfg.d1_cap.unwrap_or(g.k()))?,
                    Regime::Heterogeneous => d2_loss(&g, g_star)?,
                };
                if loss <= 0.0 {
                    return Ok(PairOutcome::ZeroLoss);
                }
                let eh = expected_hellinger(&g, g_star, cfg.mc)?;
                Ok(PairOutcome::Row(ScanRow {
                    epsilon: eps,
                    pair_id: pair,
                    ratio: eh.mean / loss,
                    d_loss: loss,
                    e_hellinger: eh.mean,
                    se: eh.se,
                }))
            })
            .collect();
        let mut s = RadiusSummary {
            epsilon: eps,
            min_ratio: None,
            skipped_zero_loss: 0,
            rejected_restricted: 0,
        };
        for o in outcomes {
            match o? {
                PairOutcome::Row(row) => {
                    s.min_ratio = Some(s.min_ratio.map_or(row.ratio, |m: f64| m.min(row.ratio)));
                    rows.push(row);
                }
                PairOutcome::ZeroLoss => s.skipped_zero_loss += 1,
                PairOutcome::Rejected => s.rejected_restricted += 1,
            }
        }
        if cfg.n_pairs > 0 {
            summary.push(s);
        }
    }
    Ok(ScanReport { regime, rows, summary })
}
