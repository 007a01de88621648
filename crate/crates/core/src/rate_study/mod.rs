//! Sample-size sweeps: generate, fit, score, and fit log–log slopes.
//!
//! A study is a grid of `(n, seed)` cells. Every cell is independent and
//! cells run in parallel; results are collected in grid order so the output
//! never depends on scheduling.

mod plot;
mod records;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, ground_truth, Dataset, GenConfig};
use crate::error::{Error, Result};
use crate::estimation::{self, FitConfig, FitMethod, FitResult, FitStatus, OptimSettings};
use crate::metrics::{d1_loss, d2_loss, expected_hellinger, McEstimate, MonteCarlo, ParamErrors, Regime};
use crate::model::{ModelParams, DEFAULT_BOX_BOUND};
use crate::rng::{derive_seed, Purpose, Stream};

pub use plot::emit_plots;
pub use records::{read_records_csv, write_records_csv, CellRecord};

/// Largest tolerated share of failed fits in one cell.
pub const MAX_FAILED_SHARE: f64 = 0.3;

/// Name of the density-distance series in slope tables.
pub const DENSITY_SERIES: &str = "density_hellinger";

/// Fit settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitTemplate {
    pub method: FitMethod,
    /// EM stopping tolerance per observation; the absolute tolerance is this times `n`.
    pub em_tol_per_obs: f64,
    pub em_max_iter: usize,
    /// Standard deviation of the Gaussian noise added to the truth to form the initial point.
    pub init_noise: f64,
    pub anchor_last_class: bool,
    pub gtol: f64,
    pub m_step_max_iter: usize,
    pub direct_max_iter: usize,
    pub box_bound: f64,
    pub warm_start: bool,
}

impl Default for FitTemplate {
    fn default() -> Self {
        let o = OptimSettings::default();
        FitTemplate {
            method: FitMethod::Em,
            em_tol_per_obs: 1e-8,
            em_max_iter: 300,
            init_noise: 0.1,
            anchor_last_class: true,
            gtol: o.gtol,
            m_step_max_iter: o.m_step_max_iter,
            direct_max_iter: o.direct_max_iter,
            box_bound: DEFAULT_BOX_BOUND,
            warm_start: o.warm_start,
        }
    }
}

impl FitTemplate {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("fit.{what} out of range")));
        if !(self.em_tol_per_obs > 0.0) {
            return bad("em_tol_per_obs");
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad("init_noise");
        }
        if !(self.gtol > 0.0) {
            return bad("gtol");
        }
        if !(self.box_bound > 0.0) {
            return bad("box_bound");
        }
        if self.em_max_iter == 0 || self.m_step_max_iter == 0 || self.direct_max_iter == 0 {
            return bad("max_iter");
        }
        Ok(())
    }

    /// Initial point: the truth plus Gaussian noise on every free coordinate.
    pub fn initial_point(&self, truth: &ModelParams, seed: u64) -> ModelParams {
        let mut init = truth.clone();
        let mut s = Stream::new(seed, Purpose::Init, 0);
        let free_cols = if self.anchor_last_class { truth.k() - 1 } else { truth.k() };
        init.beta.iter_mut().for_each(|b| *b += self.init_noise * s.normal());
        init.tau += self.init_noise * s.normal();
        for i in 0..free_cols {
            for v in init.eta.column_mut(i).iter_mut() {
                *v += self.init_noise * s.normal();
            }
        }
        init
    }

    pub fn fit_config(&self, init: ModelParams, n: usize, seed: u64) -> FitConfig {
        FitConfig {
            method: self.method,
            em_tol: self.em_tol_per_obs * n.max(1) as f64,
            em_max_iter: self.em_max_iter,
            init,
            anchor_last_class: self.anchor_last_class,
            seed,
            optim: OptimSettings {
                gtol: self.gtol,
                m_step_max_iter: self.m_step_max_iter,
                direct_max_iter: self.direct_max_iter,
                box_bound: self.box_bound,
                warm_start: self.warm_start,
            },
        }
    }
}

/// `count` log-spaced sample sizes from `lo` to `hi`, rounded to integers.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![lo.round() as usize];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect()
}

fn default_grid() -> Vec<usize> {
    log_grid(1e3, 1e5, 10)
}

fn default_seeds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub regime: Regime,
    /// Data design; its `n` is replaced per cell and its `seed` is the base seed.
    pub gen: GenConfig,
    #[serde(default = "default_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub fit: FitTemplate,
    /// Monte Carlo settings for the density-distance check.
    #[serde(default)]
    pub density_mc: Option<MonteCarlo>,
    /// Output path prefix.
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl StudyConfig {
    pub fn new(regime: Regime, gen: GenConfig) -> Self {
        StudyConfig {
            regime,
            gen,
            n_grid: default_grid(),
            n_seeds: default_seeds(),
            fit: FitTemplate::default(),
            density_mc: None,
            outputs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.len() < 4 {
            return Err(Error::Config(format!("n_grid needs at least 4 sizes, got {}", self.n_grid.len())));
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("n_grid must be positive and strictly increasing".into()));
        }
        if self.n_seeds < 3 {
            return Err(Error::Config(format!("n_seeds must be at least 3, got {}", self.n_seeds)));
        }
        let same = self.gen.family_pretrained == self.gen.family_adapter;
        match (self.regime, same) {
            (Regime::Homogeneous, false) => {
                return Err(Error::Config("homogeneous regime needs one family for both experts".into()))
            }
            (Regime::Heterogeneous, true) => {
                return Err(Error::Config("heterogeneous regime needs two different expert families".into()))
            }
            _ => {}
        }
        if self.density_mc.is_some_and(|mc| mc.m == 0) {
            return Err(Error::Config("density_mc.m must be positive".into()));
        }
        self.fit.validate()?;
        self.gen.validate()
    }

    /// Data seed of cell `(n, run)`.
    pub fn cell_seed(&self, n: usize, run: usize) -> u64 {
        derive_seed(self.gen.seed, &[Purpose::Cell as u64, n as u64, run as u64])
    }
}

/// Fits one cell. The default uses maximum likelihood; tests substitute stubs.
pub trait CellFitter: Sync {
    fn fit_cell(&self, data: &Dataset, truth: &ModelParams, cfg: &FitConfig) -> Result<FitResult>;
}

/// Maximum-likelihood fitting through `estimation::fit`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MleFitter;

impl CellFitter for MleFitter {
    fn fit_cell(&self, data: &Dataset, _truth: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
        estimation::fit(data, cfg)
    }
}

/// Least-squares line through `(ln n, ln mean)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope; `None` with only two points.
    pub stderr: Option<f64>,
}

impl SlopeFit {
    /// Fitted power law at `n`.
    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.ln()).exp()
    }
}

/// Ordinary least squares of `ln means` on `ln ns`.
pub fn fit_loglog_slope(ns: &[f64], means: &[f64]) -> Result<SlopeFit> {
    if ns.len() != means.len() || ns.len() < 2 {
        return Err(Error::Input(format!("need two or more paired points, got {} and {}", ns.len(), means.len())));
    }
    if let Some(bad) = means.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::Input(format!("means must be positive and finite, got {bad}")));
    }
    if let Some(bad) = ns.iter().find(|n| !(**n > 0.0 && n.is_finite())) {
        return Err(Error::Input(format!("sample sizes must be positive, got {bad}")));
    }
    let x: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = means.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Input("sample sizes must not all be equal".into()));
    }
    let constant = y.iter().all(|v| *v == y[0]);
    let sxy: f64 = if constant { 0.0 } else { x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum() };
    let slope = sxy / sxx;
    let intercept = if constant { y[0] } else { my - slope * mx };
    let ssr: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r2 = if constant || sst <= 0.0 {
        0.0
    } else if x.len() == 2 {
        1.0
    } else {
        (1.0 - ssr / sst).clamp(0.0, 1.0)
    };
    let stderr = (x.len() > 2).then(|| if constant { 0.0 } else { (ssr / (k - 2.0) / sxx).sqrt() });
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        stderr,
    })
}

/// Mean and spread of one series at one sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean: f64,
    /// Sample standard deviation; zero with a single run.
    pub std: f64,
}

fn cell_stat(values: &[f64]) -> CellStat {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    CellStat { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n: usize,
    /// Converged runs entering the statistics.
    pub used: usize,
    pub total: usize,
    pub series: BTreeMap<String, CellStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyReport {
    pub regime: Regime,
    pub records: Vec<CellRecord>,
    pub cells: Vec<CellSummary>,
    /// Slope per series; a series whose means are all zero has no entry and
    /// is listed in `degenerate_zero` instead.
    pub slopes: BTreeMap<String, SlopeFit>,
    pub degenerate_zero: Vec<String>,
}

impl RateStudyReport {
    pub fn density_slope(&self) -> Option<&SlopeFit> {
        self.slopes.get(DENSITY_SERIES)
    }

    pub fn write_slopes_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.slopes)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Per-cell means of one series in grid order, skipping empty cells.
    pub fn series(&self, name: &str) -> Vec<(usize, CellStat)> {
        self.cells.iter().filter_map(|c| c.series.get(name).map(|s| (c.n, *s))).collect()
    }
}

/// Aggregates converged records by sample size and fits a slope per series.
pub fn summarize(regime: Regime, records: Vec<CellRecord>) -> Result<RateStudyReport> {
    if records.is_empty() {
        return Err(Error::Input("no records to summarize".into()));
    }
    let mut by_n: BTreeMap<usize, Vec<&CellRecord>> = BTreeMap::new();
    for r in &records {
        by_n.entry(r.n).or_default().push(r);
    }
    let has_density = records.iter().any(|r| r.e_hellinger.is_some());
    let mut names: Vec<&str> = ParamErrors::NAMES.to_vec();
    if has_density {
        names.push(DENSITY_SERIES);
    }
    let mut cells = Vec::new();
    for (&n, rs) in &by_n {
        let ok: Vec<&&CellRecord> = rs.iter().filter(|r| r.status == FitOutcome::Converged).collect();
        let mut series = BTreeMap::new();
        if !ok.is_empty() {
            for name in &names {
                let values: Vec<f64> = ok.iter().filter_map(|r| r.value(name)).collect();
                if values.len() == ok.len() {
                    series.insert(name.to_string(), cell_stat(&values));
                }
            }
        }
        cells.push(CellSummary {
            n,
            used: ok.len(),
            total: rs.len(),
            series,
        });
    }
    let mut slopes = BTreeMap::new();
    let mut degenerate_zero = Vec::new();
    for name in &names {
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter_map(|c| c.series.get(*name).map(|s| (c.n as f64, s.mean)))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        if pts.iter().all(|(_, m)| *m == 0.0) {
            degenerate_zero.push(name.to_string());
            continue;
        }
        let (ns, means): (Vec<f64>, Vec<f64>) = pts.into_iter().filter(|(_, m)| *m > 0.0).unzip();
        if ns.len() >= 2 {
            slopes.insert(name.to_string(), fit_loglog_slope(&ns, &means)?);
        }
    }
    Ok(RateStudyReport {
        regime,
        records,
        cells,
        slopes,
        degenerate_zero,
    })
}

/// Outcome of one cell's fit as recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOutcome {
    Converged,
    MaxIter,
    /// The fit raised a numeric error.
    Failed,
}

impl FitOutcome {
    pub fn name(self) -> &'static str {
        match self {
            FitOutcome::Converged => "converged",
            FitOutcome::MaxIter => "max_iter",
            FitOutcome::Failed => "failed",
        }
    }
}

impl std::str::FromStr for FitOutcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(FitOutcome::Converged),
            "max_iter" => Ok(FitOutcome::MaxIter),
            "failed" => Ok(FitOutcome::Failed),
            other => Err(Error::Data(format!("unknown fit status {other:?}"))),
        }
    }
}

fn run_cell(cfg: &StudyConfig, fitter: &dyn CellFitter, n: usize, run: usize, density: Option<MonteCarlo>) -> Result<CellRecord> {
    let seed = cfg.cell_seed(n, run);
    let gen = cfg.gen.clone().with_n(n).with_seed(seed);
    let truth = ground_truth(&gen)?;
    let data = generate(&gen)?;
    let init = cfg.fit.initial_point(&truth, seed);
    let fit_cfg = cfg.fit.fit_config(init, n, seed);
    let mut record = CellRecord {
        regime: cfg.regime,
        fam0: gen.family_pretrained,
        fam1: gen.family_adapter,
        n,
        seed,
        errors: None,
        d1: f64::NAN,
        d2: f64::NAN,
        loglik: f64::NAN,
        iters: 0,
        status: FitOutcome::Failed,
        e_hellinger: None,
    };
    let res = match fitter.fit_cell(&data, &truth, &fit_cfg) {
        Ok(r) => r,
        Err(e) if e.is_numeric() => {
            log::warn!("fit failed at n = {n}, seed = {seed}: {e}");
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    let est = &res.params_hat;
    record.errors = Some(ParamErrors::between(est, &truth)?);
    record.d1 = d1_loss(est, &truth)?;
    record.d2 = d2_loss(est, &truth)?;
    record.loglik = res.final_loglik();
    record.iters = res.n_em_iters;
    record.status = match res.status {
        FitStatus::Converged => FitOutcome::Converged,
        FitStatus::MaxIter => FitOutcome::MaxIter,
    };
    if let Some(mc) = density {
        let McEstimate { mean, .. } = expected_hellinger(est, &truth, mc)?;
        record.e_hellinger = Some(mean);
    }
    log::info!(
        "cell n = {n} run = {run}: {} after {} iterations, loglik {:.4}",
        record.status.name(),
        record.iters,
        record.loglik
    );
    Ok(record)
}

/// Runs every cell, persists the records (when `cfg.outputs` is set), checks
/// the failure budget, then aggregates.
pub fn run_study_with(cfg: &StudyConfig, fitter: &dyn CellFitter) -> Result<RateStudyReport> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = cfg.n_grid.iter().flat_map(|&n| (0..cfg.n_seeds).map(move |s| (n, s))).collect();
    let records: Vec<CellRecord> = cells
        .par_iter()
        .map(|&(n, s)| run_cell(cfg, fitter, n, s, cfg.density_mc))
        .collect::<Result<_>>()?;
    if let Some(prefix) = &cfg.outputs {
        write_records_csv(&records_path(prefix), &records)?;
    }
    for &n in &cfg.n_grid {
        let failed = records.iter().filter(|r| r.n == n && r.status != FitOutcome::Converged).count();
        if failed as f64 > MAX_FAILED_SHARE * cfg.n_seeds as f64 {
            return Err(Error::StudyAborted {
                n,
                failed,
                total: cfg.n_seeds,
            });
        }
    }
    summarize(cfg.regime, records)
}

/// `run_study_with` using maximum likelihood.
pub fn run_study(cfg: &StudyConfig) -> Result<RateStudyReport> {
    run_study_with(cfg, &MleFitter)
}

/// Result of the density-distance rate check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCheck {
    pub slope: Option<SlopeFit>,
    /// Every mean distance was exactly zero, so no slope exists.
    pub degenerate_zero: bool,
    pub report: RateStudyReport,
}

/// Runs the study with Monte Carlo density distances and regresses their
/// per-size means on `n`.
pub fn density_rate_check_with(cfg: &StudyConfig, mc: MonteCarlo, fitter: &dyn CellFitter) -> Result<DensityCheck> {
    let mut cfg = cfg.clone();
    cfg.density_mc = Some(mc);
    let report = run_study_with(&cfg, fitter)?;
    Ok(DensityCheck {
        slope: report.density_slope().copied(),
        degenerate_zero: report.degenerate_zero.iter().any(|s| s == DENSITY_SERIES),
        report,
    })
}

pub fn density_rate_check(cfg: &StudyConfig, mc: MonteCarlo) -> Result<DensityCheck> {
    density_rate_check_with(cfg, mc, &MleFitter)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn records_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "_records.csv")
}

pub fn slopes_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "_slopes.json")
}

/// Default study presets keyed by name.
pub fn preset(name: &str) -> Option<StudyConfig> {
    use crate::model::ExpertFamily::*;
    let (regime, gen) = match name {
        "hetero_case1" => (Regime::Heterogeneous, GenConfig::scaled_design(Linear, Tanh)),
        "hetero_case2" => (Regime::Heterogeneous, GenConfig::scaled_design(Tanh, Linear)),
        "homo_tanh" => (Regime::Homogeneous, GenConfig::scaled_design(Tanh, Tanh)),
        "homo_gelu" => (Regime::Homogeneous, GenConfig::scaled_design(Gelu, Gelu)),
        "appendix_e" => (Regime::Heterogeneous, GenConfig::fixed_design(Linear, Tanh)),
        "appendix_e_case2" => (Regime::Heterogeneous, GenConfig::fixed_design(Tanh, Linear)),
        _ => return None,
    };
    let mut cfg = StudyConfig::new(regime, gen);
    cfg.fit.method = FitMethod::DirectMle;
    Some(cfg)
}

pub const PRESETS: [&str; 6] = ["hetero_case1", "hetero_case2", "homo_tanh", "homo_gelu", "appendix_e", "appendix_e_case2"];
