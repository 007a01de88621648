//! Per-cell records and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FitOutcome;
use crate::error::{Error, Result};
use crate::metrics::{ParamErrors, Regime};
use crate::model::ExpertFamily;

/// One fitted `(n, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub regime: Regime,
    /// Pretrained expert family.
    pub fam0: ExpertFamily,
    /// Adapter expert family.
    pub fam1: ExpertFamily,
    pub n: usize,
    /// Data seed of the cell.
    pub seed: u64,
    /// `None` when the fit raised an error.
    pub errors: Option<ParamErrors>,
    pub d1: f64,
    pub d2: f64,
    pub loglik: f64,
    pub iters: usize,
    pub status: FitOutcome,
    /// Monte Carlo `E_X[d_H]` against the truth, when requested.
    pub e_hellinger: Option<f64>,
}

impl CellRecord {
    pub(crate) fn value(&self, name: &str) -> Option<f64> {
        match name {
            super::DENSITY_SERIES => self.e_hellinger,
            _ => {
                let e = self.errors?;
                ParamErrors::NAMES.iter().position(|n| *n == name).map(|i| e.values()[i])
            }
        }
    }
}

const HEADER: [&str; 13] = [
    "regime", "fam0", "fam1", "n", "seed", "err_exp_tau", "err_beta", "err_eta", "d1", "d2", "loglik", "iters", "status",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Writes records with the fixed header; a trailing `e_hellinger` column is
/// added when any record carries a density distance.
pub fn write_records_csv(path: &Path, records: &[CellRecord]) -> Result<()> {
    let density = records.iter().any(|r| r.e_hellinger.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<&str> = HEADER.to_vec();
    if density {
        header.push("e_hellinger");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        let errs = r.errors.map(|e| e.values().map(fmt)).unwrap_or_default();
        let mut row = vec![
            r.regime.name().to_string(),
            r.fam0.name().to_string(),
            r.fam1.name().to_string(),
            r.n.to_string(),
            r.seed.to_string(),
        ];
        row.extend(errs);
        row.extend([fmt(r.d1), fmt(r.d2), fmt(r.loglik), r.iters.to_string(), r.status.name().to_string()]);
        if density {
            row.push(r.e_hellinger.map(fmt).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Data(format!("bad {what} value {s:?}")))
}

/// Reads a records CSV written by `write_records_csv`.
pub fn read_records_csv(path: &Path) -> Result<Vec<CellRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let density = match header.len() {
        13 => false,
        14 if &header[13] == "e_hellinger" => true,
        _ => return Err(Error::Data(format!("{} does not have the records header", path.display()))),
    };
    if header.iter().take(13).ne(HEADER.iter().copied()) {
        return Err(Error::Data(format!("{} does not have the records header", path.display())));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let regime = match &row[0] {
            "homogeneous" => Regime::Homogeneous,
            "heterogeneous" => Regime::Heterogeneous,
            other => return Err(Error::Data(format!("unknown regime {other:?}"))),
        };
        let int = |i: usize| -> Result<u64> { row[i].parse().map_err(|_| Error::Data(format!("bad integer {:?} in column {}", &row[i], HEADER[i]))) };
        let errs = [parse_f64(&row[5], "err_exp_tau")?, parse_f64(&row[6], "err_beta")?, parse_f64(&row[7], "err_eta")?];
        let errors = (!errs.iter().any(|v| v.is_nan())).then_some(ParamErrors {
            err_exp_tau: errs[0],
            err_beta: errs[1],
            err_eta: errs[2],
        });
        out.push(CellRecord {
            regime,
            fam0: row[1].parse()?,
            fam1: row[2].parse()?,
            n: int(3)? as usize,
            seed: int(4)?,
            errors,
            d1: parse_f64(&row[8], "d1")?,
            d2: parse_f64(&row[9], "d2")?,
            loglik: parse_f64(&row[10], "loglik")?,
            iters: int(11)? as usize,
            status: row[12].parse()?,
            e_hellinger: if density { Some(parse_f64(&row[13], "e_hellinger")?).filter(|v| !v.is_nan()) } else { None },
        });
    }
    Ok(out)
}
