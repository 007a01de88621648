//! Numerical check of strong identifiability for an expert family.
//!
//! The logit map is `h(x, ηᵢ) = act(ηᵢᵀx̃)`. Two function sets are built
//! from its derivatives and evaluated at Gaussian covariates:
//!
//! * the second-order set: `∂h/∂ηᵢᵘ·∂h/∂ηⱼᵛ` and the same times `exp(βᵀx)`;
//! * the first-order set: `∂h/∂ηᵢᵘ`, `xʷ·∂h/∂ηᵢᵘ`, `exp(βᵀx)·∂h/∂ηᵢᵘ`,
//!   `∂²h/∂ηᵢᵘ∂ηᵢᵛ` and `exp(βᵀx)·∂²h/∂ηᵢᵘ∂ηᵢᵛ`.
//!
//! Linear independence is judged by the smallest singular value of the
//! column-normalized evaluation matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, ExpertFamily};
use crate::rng::{Purpose, Stream};

/// Families the checker accepts. `AffineSigmoid` is `σ(aᵀx + b)`, i.e. the
/// sigmoid family acting on the augmented covariate `(x, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PullbackFamily {
    Expert(ExpertFamily),
    AffineSigmoid,
}

impl PullbackFamily {
    pub const ALL: [PullbackFamily; 6] = [
        PullbackFamily::Expert(ExpertFamily::Linear),
        PullbackFamily::Expert(ExpertFamily::Tanh),
        PullbackFamily::Expert(ExpertFamily::Gelu),
        PullbackFamily::Expert(ExpertFamily::Sigmoid),
        PullbackFamily::Expert(ExpertFamily::Relu),
        PullbackFamily::AffineSigmoid,
    ];

    fn activation(self) -> ExpertFamily {
        match self {
            PullbackFamily::Expert(f) => f,
            PullbackFamily::AffineSigmoid => ExpertFamily::Sigmoid,
        }
    }

    fn with_bias(self) -> bool {
        matches!(self, PullbackFamily::AffineSigmoid)
    }

    pub fn non_smooth(self) -> bool {
        self.activation().non_smooth()
    }

    pub fn name(self) -> &'static str {
        match self {
            PullbackFamily::Expert(f) => f.name(),
            PullbackFamily::AffineSigmoid => "affine-sigmoid",
        }
    }

    /// Parameter length per expert for covariate dimension `d`.
    pub fn param_dim(self, d: usize) -> usize {
        d + usize::from(self.with_bias())
    }
}

impl fmt::Display for PullbackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PullbackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("affine-sigmoid") {
            return Ok(PullbackFamily::AffineSigmoid);
        }
        s.parse().map(PullbackFamily::Expert)
    }
}

impl From<ExpertFamily> for PullbackFamily {
    fn from(f: ExpertFamily) -> Self {
        PullbackFamily::Expert(f)
    }
}

/// Covariate sample used to evaluate the function sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub m: usize,
    pub seed: u64,
    /// Multiplier applied to every covariate draw.
    pub x_scale: f64,
}

impl Sample {
    pub fn new(m: usize, seed: u64) -> Self {
        Sample { m, seed, x_scale: 1.0 }
    }
}

/// Column-normalized evaluation matrices.
#[derive(Debug, Clone)]
pub struct PullbackMatrices {
    /// `None` for non-smooth families, where the second-order set is undefined.
    pub set1: Option<DMatrix<f64>>,
    pub set2: DMatrix<f64>,
    /// Indices of columns that evaluated to zero everywhere.
    pub zero_columns1: Vec<usize>,
    pub zero_columns2: Vec<usize>,
}

/// Number of distinct second-order functions. The product for `(i,u),(j,v)`
/// equals the one for `(i,v),(j,u)`, so the class pair and the coordinate
/// pair are each unordered.
pub fn set1_len(k: usize, q: usize) -> usize {
    2 * (k * (k + 1) / 2) * (q * (q + 1) / 2)
}

/// Number of distinct first-order functions. The `xʷ·∂h/∂ηᵢᵘ` block is
/// deduplicated over unordered index pairs `(w, u)`.
pub fn set2_len(k: usize, d: usize, q: usize) -> usize {
    let products = (0..d).flat_map(|w| (0..q).map(move |u| (w.min(u), w.max(u)))).collect::<std::collections::BTreeSet<_>>().len();
    k * (2 * q + products + q * (q + 1))
}

fn pairs_upper(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| (a..n).map(move |b| (a, b)))
}

/// Scales columns to unit norm and returns the indices of all-zero columns.
fn normalize_columns(m: &mut DMatrix<f64>) -> Vec<usize> {
    let mut zero = Vec::new();
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let n = col.norm();
        if n > 0.0 && n.is_finite() {
            col /= n;
        } else {
            zero.push(j);
        }
    }
    zero
}

/// Evaluates both function sets at `sample.m` Gaussian covariates.
pub fn build_pullback_matrices(family: PullbackFamily, beta: &[f64], eta: &DMatrix<f64>, sample: Sample) -> Result<PullbackMatrices> {
    let d = beta.len();
    let q = family.param_dim(d);
    let k = eta.ncols();
    if d == 0 || k == 0 || eta.nrows() != q {
        return Err(Error::Shape(format!("{} needs a {q} × K parameter matrix, got {} × {k}", family, eta.nrows())));
    }
    let smooth = !family.non_smooth();
    let n1 = if smooth { set1_len(k, q) } else { 0 };
    let n2 = set2_len(k, d, q);
    if sample.m < 4 * n1.max(n2) {
        return Err(Error::Input(format!("{} samples is below 4 × {} columns", sample.m, n1.max(n2))));
    }
    let act = family.activation();
    let mut m1 = DMatrix::zeros(sample.m, n1);
    let mut m2 = DMatrix::zeros(sample.m, n2);
    let mut stream = Stream::new(sample.seed, Purpose::Identifiability, u64::MAX);
    let mut x = vec![0.0; d];
    let mut xt = vec![1.0; q];
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    for r in 0..sample.m {
        stream.normals(&mut x);
        x.iter_mut().for_each(|v| *v *= sample.x_scale);
        xt[..d].copy_from_slice(&x);
        let a = beta.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>();
        // Each row is scaled by 1/(1 + exp(βᵀx)), which leaves the column
        // span unchanged but keeps the exponential factor from concentrating
        // all mass on a few rows.
        let (row, w) = (logistic(-a), logistic(a));
        for i in 0..k {
            let z: f64 = eta.column(i).iter().zip(&xt).map(|(e, v)| e * v).sum();
            g1[i] = act.d1(z);
            g2[i] = act.d2(z);
        }
        if smooth {
            let mut c = 0;
            for (i, j) in pairs_upper(k) {
                for (u, v) in pairs_upper(q) {
                    let f = g1[i] * g1[j] * xt[u] * xt[v];
                    m1[(r, c)] = row * f;
                    m1[(r, c + 1)] = w * f;
                    c += 2;
                }
            }
        }
        let mut c = 0;
        let mut put = |c: &mut usize, v: f64| {
            m2[(r, *c)] = v;
            *c += 1;
        };
        for i in 0..k {
            for u in 0..q {
                put(&mut c, row * g1[i] * xt[u]);
                put(&mut c, w * g1[i] * xt[u]);
            }
            for wi in 0..d {
                for u in 0..q {
                    // (w, u) and (u, w) give the same product when both index covariates.
                    if u < d && u < wi {
                        continue;
                    }
                    put(&mut c, row * x[wi] * g1[i] * xt[u]);
                }
            }
            for (u, v) in pairs_upper(q) {
                let f = g2[i] * xt[u] * xt[v];
                put(&mut c, row * f);
                put(&mut c, w * f);
            }
        }
        debug_assert_eq!(c, n2);
    }
    let zero_columns1 = normalize_columns(&mut m1);
    let zero_columns2 = normalize_columns(&mut m2);
    Ok(PullbackMatrices {
        set1: smooth.then_some(m1),
        set2: m2,
        zero_columns1,
        zero_columns2,
    })
}

/// Smallest singular value; zero for an empty or non-finite matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return 0.0;
    }
    // Reducing to the square triangular factor first keeps the SVD small.
    let r = m.clone().qr().r();
    r.singular_values().min().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    FailFirstOrder,
    FailSecondOrder,
    NonSmooth,
}

impl Verdict {
    pub fn describe(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::FailFirstOrder => "FAIL (first-order)",
            Verdict::FailSecondOrder => "FAIL (second-order)",
            Verdict::NonSmooth => "FAIL (non-smooth)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullbackReport {
    pub family: PullbackFamily,
    /// `None` when the second-order set was skipped.
    pub set1_min_sv: Option<f64>,
    pub set2_min_sv: f64,
    pub n_funcs1: usize,
    pub n_funcs2: usize,
    pub verdict: Verdict,
}

impl PullbackReport {
    pub fn line(&self) -> String {
        format!("{}: {}", self.family, self.verdict.describe())
    }
}

/// Settings for `check_strong_identifiability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentConfig {
    pub trials: usize,
    pub threshold: f64,
    /// Rows per column of the larger matrix.
    pub sample_factor: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub x_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            trials: 5,
            threshold: 1e-6,
            sample_factor: 8,
            d: 8,
            k: 3,
            seed: 0,
            x_scale: 1.0,
        }
    }
}

/// Minimum over random trials of each set's smallest normalized singular
/// value, with the verdict they imply. The second-order set is judged first.
pub fn check_strong_identifiability(family: PullbackFamily, cfg: &IdentConfig) -> Result<PullbackReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    if cfg.d == 0 || cfg.k == 0 || cfg.sample_factor < 4 || !(cfg.threshold > 0.0) || !(cfg.x_scale > 0.0) {
        return Err(Error::Config("identifiability settings out of range".into()));
    }
    let q = family.param_dim(cfg.d);
    let smooth = !family.non_smooth();
    let n_funcs1 = if smooth { set1_len(cfg.k, q) } else { 0 };
    let n_funcs2 = set2_len(cfg.k, cfg.d, q);
    let m = cfg.sample_factor * n_funcs1.max(n_funcs2);
    let trials: Vec<Result<(Option<f64>, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut s = Stream::new(cfg.seed, Purpose::Identifiability, t as u64);
            let beta: Vec<f64> = (0..cfg.d).map(|_| s.normal()).collect();
            let eta = DMatrix::from_fn(q, cfg.k, |_, _| s.normal());
            let sample = Sample {
                m,
                seed: crate::rng::derive_seed(cfg.seed, &[t as u64]),
                x_scale: cfg.x_scale,
            };
            let mats = build_pullback_matrices(family, &beta, &eta, sample)?;
            let sv1 = mats.set1.as_ref().map(|m1| if mats.zero_columns1.is_empty() { min_singular_value(m1) } else { 0.0 });
            let sv2 = if mats.zero_columns2.is_empty() { min_singular_value(&mats.set2) } else { 0.0 };
            Ok((sv1, sv2))
        })
        .collect();
    let mut set1_min_sv: Option<f64> = None;
    let mut set2_min_sv = f64::INFINITY;
    for t in trials {
        let (a, b) = t?;
        if let Some(a) = a {
            set1_min_sv = Some(set1_min_sv.map_or(a, |m| m.min(a)));
        }
        set2_min_sv = set2_min_sv.min(b);
    }
    let verdict = if !smooth {
        Verdict::NonSmooth
    } else if set1_min_sv.is_some_and(|v| v <= cfg.threshold) {
        Verdict::FailSecondOrder
    } else if set2_min_sv <= cfg.threshold {
        Verdict::FailFirstOrder
    } else {
        Verdict::Pass
    };
    Ok(PullbackReport {
        family,
        set1_min_sv,
        set2_min_sv,
        n_funcs1,
        n_funcs2,
        verdict,
    })
}
