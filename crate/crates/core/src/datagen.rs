//! Synthetic datasets drawn from the contaminated mixture.
//!
//! Each observation `i` uses its own random stream, so a dataset is a pure
//! function of its configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{self, dot, logistic, row_major, ExpertFamily, ModelParams};
use crate::rng::{Purpose, Stream};

/// How the adapter's ground-truth coefficients are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRule {
    /// A fixed `η*`, independent of the sample size.
    Fixed {
        #[serde(with = "row_major")]
        eta_star: DMatrix<f64>,
    },
    /// `η*ₙ = (1 + c·n^exponent)·η₀`, recomputed for every `n`.
    ScaledPretrained { c: f64, exponent: f64 },
}

/// Data-generating configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Sample size. Rate studies replace it with each grid value.
    #[serde(default)]
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub q: usize,
    pub beta_star: Vec<f64>,
    pub tau_star: f64,
    #[serde(with = "row_major")]
    pub eta0: DMatrix<f64>,
    pub adapter_rule: AdapterRule,
    pub family_pretrained: ExpertFamily,
    pub family_adapter: ExpertFamily,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    /// Experimental design with `K = 3`, `d = 8`, `β* = 1_d/√d`, `τ* = 0`,
    /// `η₀ = e₂(0.3, −1.5, 0)ᵀ` and `η*ₙ = (1 + 10·n^{−3/8})·η₀`.
    pub fn scaled_design(family_pretrained: ExpertFamily, family_adapter: ExpertFamily) -> Self {
        let d = 8;
        let mut eta0 = DMatrix::zeros(d, 3);
        eta0[(1, 0)] = 0.3;
        eta0[(1, 1)] = -1.5;
        GenConfig {
            n: 1000,
            d,
            k: 3,
            q: d,
            beta_star: vec![1.0 / (d as f64).sqrt(); d],
            tau_star: 0.0,
            eta0,
            adapter_rule: AdapterRule::ScaledPretrained {
                c: 10.0,
                exponent: -0.375,
            },
            family_pretrained,
            family_adapter,
            seed: 0,
        }
    }

    /// Fixed-parameter design: `τ* = 0.2`, `η* = e₂(−1, 0.7, 0)ᵀ`, `η₀ = e₂(1, −0.5, 0)ᵀ`.
    pub fn fixed_design(family_pretrained: ExpertFamily, family_adapter: ExpertFamily) -> Self {
        let d = 8;
        let mut eta0 = DMatrix::zeros(d, 3);
        eta0[(1, 0)] = 1.0;
        eta0[(1, 1)] = -0.5;
        let mut eta_star = DMatrix::zeros(d, 3);
        eta_star[(1, 0)] = -1.0;
        eta_star[(1, 1)] = 0.7;
        GenConfig {
            tau_star: 0.2,
            eta0,
            adapter_rule: AdapterRule::Fixed { eta_star },
            ..Self::scaled_design(family_pretrained, family_adapter)
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k < 2 {
            return Err(Error::Config(format!("need d >= 1 and K >= 2, got d = {}, K = {}", self.d, self.k)));
        }
        if self.q != self.d {
            return Err(Error::Config(format!("q = {} must equal d = {}", self.q, self.d)));
        }
        if self.beta_star.len() != self.d {
            return Err(Error::Config(format!("beta_star has {} entries, d = {}", self.beta_star.len(), self.d)));
        }
        if self.eta0.shape() != (self.q, self.k) {
            return Err(Error::Config(format!("eta0 is {:?}, expected ({}, {})", self.eta0.shape(), self.q, self.k)));
        }
        if let AdapterRule::Fixed { eta_star } = &self.adapter_rule {
            if eta_star.shape() != (self.q, self.k) {
                return Err(Error::Config(format!("eta_star is {:?}, expected ({}, {})", eta_star.shape(), self.q, self.k)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Ground-truth parameters for the configured sample size.
pub fn ground_truth(cfg: &GenConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let eta = match &cfg.adapter_rule {
        AdapterRule::Fixed { eta_star } => eta_star.clone(),
        AdapterRule::ScaledPretrained { c, exponent } => {
            let scale = 1.0 + c * libm::pow(cfg.n as f64, *exponent);
            cfg.eta0.map(|v| scale * v)
        }
    };
    ModelParams::new(
        cfg.beta_star.clone(),
        cfg.tau_star,
        eta,
        cfg.eta0.clone(),
        cfg.family_adapter,
        cfg.family_pretrained,
    )
}

/// Covariates and labels. Labels are stored 1-based as in `{1, …, K}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    k: usize,
    x: Vec<f64>,
    y: Vec<u32>,
    gate_draws: Option<Vec<bool>>,
    config: Option<GenConfig>,
    fingerprint: Option<String>,
    seed: u64,
}

impl Dataset {
    /// Builds a dataset from a row-major `n × d` covariate buffer.
    pub fn new(x: Vec<f64>, d: usize, y: Vec<u32>, k: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Data("covariate dimension must be positive".into()));
        }
        if x.len() != y.len() * d {
            return Err(Error::Data(format!(
                "{} covariate values do not form {} rows of width {d}",
                x.len(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v == 0 || v as usize > k) {
            return Err(Error::Data(format!("label {bad} outside 1..={k}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("covariates must be finite".into()));
        }
        Ok(Dataset {
            n: y.len(),
            d,
            k,
            x,
            y,
            gate_draws: None,
            config: None,
            fingerprint: None,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn labels(&self) -> &[u32] {
        &self.y
    }

    /// Hidden adapter-selection indicators, when the data were simulated here.
    pub fn gate_draws(&self) -> Option<&[bool]> {
        self.gate_draws.as_deref()
    }

    pub fn config(&self) -> Option<&GenConfig> {
        self.config.as_ref()
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.fingerprint.as_deref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Writes `path` as CSV (`x1..xd,y`) plus a sidecar JSON next to it.
    pub fn write_csv(&self, path: &Path) -> Result<Vec<PathBuf>> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<String> = (1..=self.d).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let mut rec = Vec::with_capacity(self.d + 1);
        for i in 0..self.n {
            rec.clear();
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let side = sidecar_path(path);
        let meta = Sidecar {
            n: self.n,
            d: self.d,
            k: self.k,
            seed: self.seed,
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
        };
        fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
        Ok(vec![path.to_path_buf(), side])
    }

    /// Reads a CSV written by [`Dataset::write_csv`], validating the sidecar.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        if let (Some(cfg), Some(fp)) = (&meta.config, &meta.fingerprint) {
            if &cfg.fingerprint() != fp {
                return Err(Error::Data(format!(
                    "fingerprint mismatch in {}: configuration was modified",
                    side.display()
                )));
            }
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let expected: Vec<String> = (1..=meta.d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Data(format!("unexpected CSV header in {}", path.display())));
        }
        let mut x = Vec::with_capacity(meta.n * meta.d);
        let mut y = Vec::with_capacity(meta.n);
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            for j in 0..meta.d {
                x.push(parse_field::<f64>(&rec, j, path)?);
            }
            y.push(parse_field::<u32>(&rec, meta.d, path)?);
        }
        if y.len() != meta.n {
            return Err(Error::Data(format!("sidecar says n = {}, CSV has {} rows", meta.n, y.len())));
        }
        let mut ds = Dataset::new(x, meta.d, y, meta.k)?;
        ds.config = meta.config;
        ds.fingerprint = meta.fingerprint;
        ds.seed = meta.seed;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    fingerprint: Option<String>,
    config: Option<GenConfig>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, j: usize, path: &Path) -> Result<T> {
    rec.get(j)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Data(format!("bad field {} on a row of {}", j + 1, path.display())))
}

/// Samples a dataset: `X ~ N(0, I_d)`, a Bernoulli(π(X)) gate picks the
/// adapter or the pretrained expert, and the label is drawn from that expert.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let truth = ground_truth(cfg)?;
    let (d, k, q) = (cfg.d, cfg.k, cfg.q);
    let rows: Vec<(Vec<f64>, u32, bool)> = (0..cfg.n)
        .into_par_iter()
        .map_init(
            || vec![0.0; k],
            |logits, i| {
                let mut s = Stream::new(cfg.seed, Purpose::Data, i as u64);
                let mut x = vec![0.0; d];
                s.normals(&mut x);
                let pi = logistic(dot(&truth.beta, &x) + truth.tau);
                let adapter = s.uniform() < pi;
                let (family, eta) = if adapter {
                    (truth.family_adapter, truth.eta.as_slice())
                } else {
                    (truth.family_pretrained, truth.eta0.as_slice())
                };
                let lse = model::logits_lse(family, eta, q, &x, logits);
                let u = s.uniform();
                let mut cum = 0.0;
                let mut label = k as u32;
                for (c, l) in logits.iter().enumerate() {
                    cum += (l - lse).exp();
                    if u < cum {
                        label = c as u32 + 1;
                        break;
                    }
                }
                (x, label, adapter)
            },
        )
        .collect();

    let mut x = Vec::with_capacity(cfg.n * d);
    let mut y = Vec::with_capacity(cfg.n);
    let mut gates = Vec::with_capacity(cfg.n);
    for (row, label, gate) in rows {
        x.extend(row);
        y.push(label);
        gates.push(gate);
    }
    let mut ds = Dataset::new(x, d, y, k)?;
    ds.gate_draws = Some(gates);
    ds.fingerprint = Some(cfg.fingerprint());
    ds.config = Some(cfg.clone());
    ds.seed = cfg.seed;
    Ok(ds)
}

#[cfg(test)]
mod tests;
