//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use contam_moe::identifiability::PullbackFamily;

#[derive(Debug, Parser)]
#[command(name = "contam-moe", version, about = "Fit and stress-test contaminated mixture-of-experts models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output path prefix; every artifact name starts with it.
    #[arg(long, global = true, value_name = "PREFIX")]
    pub out: Option<PathBuf>,

    /// Replaces the base seed of the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "CONTAM_MOE_JOBS", value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,

    /// Dotted-path override applied to the configuration, e.g. `fit.gtol=1e-7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<Override>,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a dataset.
    Generate,
    /// Fit the model to a dataset.
    Fit,
    /// Run a parameter-error convergence-rate study.
    RateStudy,
    /// Run a study that also tracks the expected Hellinger distance.
    DensityRate,
    /// Check strong identifiability numerically, one verdict per family.
    CheckIdentifiability {
        /// Family to check; repeat for several (default: all).
        #[arg(long = "family")]
        families: Vec<PullbackFamily>,
    },
    /// Scan the Hellinger-to-loss ratio around a parameter.
    HellingerScan,
    /// Redraw the curves and slopes of an existing records CSV.
    Plot {
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Fit => "fit",
            Command::RateStudy => "rate-study",
            Command::DensityRate => "density-rate",
            Command::CheckIdentifiability { .. } => "check-identifiability",
            Command::HellingerScan => "hellinger-scan",
            Command::Plot { .. } => "plot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: serde_json::Value,
}

/// Splits `a.b.c=value`. The value is read as JSON when it parses, else as a string.
fn parse_override(s: &str) -> Result<Override, String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("empty segment in key {key:?}"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_owned()));
    Ok(Override { path, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_values_parse_as_json_first() {
        let o = parse_override("fit.gtol=1e-7").unwrap();
        assert_eq!(o.path, ["fit", "gtol"]);
        assert_eq!(o.value, json!(1e-7));
        assert_eq!(parse_override("regime=homogeneous").unwrap().value, json!("homogeneous"));
        assert_eq!(parse_override("n_grid=[1,2]").unwrap().value, json!([1, 2]));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }
}
