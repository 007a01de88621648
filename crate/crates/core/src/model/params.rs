use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ExpertFamily;
use crate::error::{Error, Result};

/// Default per-coordinate bound of the compact parameter box.
pub const DEFAULT_BOX_BOUND: f64 = 50.0;

/// Gating and expert parameters of the two-component model.
///
/// `eta` and `eta0` are `q × K`; column `i` holds the coefficients of class `i`.
/// Storage is column-major so each class vector is a contiguous slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub tau: f64,
    #[serde(with = "row_major")]
    pub eta: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub eta0: DMatrix<f64>,
    pub family_adapter: ExpertFamily,
    pub family_pretrained: ExpertFamily,
}

impl ModelParams {
    pub fn new(
        beta: Vec<f64>,
        tau: f64,
        eta: DMatrix<f64>,
        eta0: DMatrix<f64>,
        family_adapter: ExpertFamily,
        family_pretrained: ExpertFamily,
    ) -> Result<Self> {
        let p = ModelParams {
            beta,
            tau,
            eta,
            eta0,
            family_adapter,
            family_pretrained,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.eta.nrows()
    }

    pub fn k(&self) -> usize {
        self.eta.ncols()
    }

    /// Coefficients of adapter class `i`.
    #[inline]
    pub fn eta_col(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.eta.as_slice()[i * q..(i + 1) * q]
    }

    #[inline]
    pub fn eta0_col(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.eta0.as_slice()[i * q..(i + 1) * q]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() == 0 {
            return Err(Error::Shape("beta must have at least one entry".into()));
        }
        if self.eta.shape() != self.eta0.shape() {
            return Err(Error::Shape(format!(
                "eta is {:?} but eta0 is {:?}",
                self.eta.shape(),
                self.eta0.shape()
            )));
        }
        if self.k() < 2 {
            return Err(Error::Shape(format!("need K >= 2 classes, got {}", self.k())));
        }
        if self.q() != self.d() {
            return Err(Error::Shape(format!(
                "expert dimension q = {} must equal covariate dimension d = {}",
                self.q(),
                self.d()
            )));
        }
        let finite = self.beta.iter().all(|v| v.is_finite())
            && self.tau.is_finite()
            && self.eta.iter().all(|v| v.is_finite())
            && self.eta0.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Input("parameters must be finite".into()));
        }
        Ok(())
    }

    /// Whether every learnable coordinate lies in `[-bound, bound]`.
    pub fn in_box(&self, bound: f64) -> bool {
        self.beta.iter().all(|v| v.abs() <= bound)
            && self.tau.abs() <= bound
            && self.eta.iter().all(|v| v.abs() <= bound)
    }

    pub fn same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.d() != other.d() || self.eta.shape() != other.eta.shape() {
            return Err(Error::Shape(format!(
                "parameter shapes differ: d {} vs {}, eta {:?} vs {:?}",
                self.d(),
                other.d(),
                self.eta.shape(),
                other.eta.shape()
            )));
        }
        Ok(())
    }
}

/// Serializes a matrix as a list of rows.
pub(crate) mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows have unequal lengths".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
    }
}
