//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use contam_moe::config;
use contam_moe::datagen::{generate, ground_truth, Dataset, GenConfig};
use contam_moe::estimation::{self, FitResult};
use contam_moe::identifiability::{check_strong_identifiability, IdentConfig, PullbackFamily};
use contam_moe::metrics::{hellinger_bound_scan, MonteCarlo, ParamErrors, RadiusSummary, Regime, ScanConfig};
use contam_moe::model::ModelParams;
use contam_moe::rate_study::{
    self, emit_plots, read_records_csv, records_path, slopes_path, summarize, FitTemplate, RateStudyReport,
    SlopeFit, StudyConfig,
};
use contam_moe::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::{Cli, Command, Override};
use crate::manifest::{with_suffix, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Run(e) if e.is_numeric() => 3,
            Failure::Run(_) => 2,
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.into())
    }
}

/// Input of the `fit` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitJob {
    /// CSV written by `generate`.
    pub data: PathBuf,
    #[serde(default)]
    pub fit: FitTemplate,
    /// Seed of the initial-point noise.
    #[serde(default)]
    pub seed: u64,
    /// Starting point; defaults to the dataset's truth plus noise.
    #[serde(default)]
    pub init: Option<ModelParams>,
}

/// Input of the `hellinger-scan` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanJob {
    pub regime: Regime,
    pub g_star: ModelParams,
    #[serde(default)]
    pub scan: ScanConfig,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    result: &'a FitResult,
    /// Errors against the generating parameters, when the dataset records them.
    errors: Option<ParamErrors>,
}

#[derive(Serialize)]
struct DensityOutput<'a> {
    slope: Option<&'a SlopeFit>,
    degenerate_zero: bool,
}

#[derive(Serialize)]
struct ScanSummary<'a> {
    regime: Regime,
    summary: &'a [RadiusSummary],
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate => run_generate(cli),
        Command::Fit => run_fit(cli),
        Command::RateStudy => run_rate_study(cli, false),
        Command::DensityRate => run_rate_study(cli, true),
        Command::CheckIdentifiability { ref families } => run_identifiability(cli, families),
        Command::HellingerScan => run_scan(cli),
        Command::Plot { ref records } => run_plot(cli, records),
    }
}

/// Reads the configuration (or starts from `fallback`), applies `--set` and
/// `--seed`, and parses strictly.
fn load<T: DeserializeOwned>(cli: &Cli, seed_path: Option<&[&str]>, fallback: Option<Value>) -> Result<T, Failure> {
    let name = cli.command.name();
    let mut value = match (&cli.config, fallback) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            config::from_json_str::<Value>(&text).map_err(|e| in_file(path, e))?
        }
        (None, Some(v)) => v,
        (None, None) => return Err(Failure::Usage(format!("{name} requires --config"))),
    };
    for Override { path, value: v } in &cli.overrides {
        set_path(&mut value, path, v.clone())?;
    }
    match (cli.seed, seed_path) {
        (Some(seed), Some(p)) => {
            let p: Vec<String> = p.iter().map(|s| s.to_string()).collect();
            set_path(&mut value, &p, Value::from(seed))?;
        }
        (Some(_), None) => return Err(Failure::Usage(format!("{name} takes no --seed"))),
        (None, _) => {}
    }
    config::from_json_value(value).map_err(|e| match &cli.config {
        Some(path) => in_file(path, e).into(),
        None => e.into(),
    })
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn set_path(root: &mut Value, path: &[String], v: Value) -> Result<(), Failure> {
    let joined = path.join(".");
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.clone(), v);
                    return Ok(());
                }
                map.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot set {joined}: {key:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("cannot set {joined}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = v;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("cannot set {joined}: {key:?} is inside a scalar")).into()),
        };
    }
    *cur = v;
    Ok(())
}

fn required_prefix(cli: &Cli) -> Result<PathBuf, Failure> {
    let prefix = cli
        .out
        .clone()
        .ok_or_else(|| Failure::Usage(format!("{} requires --out", cli.command.name())))?;
    prepare_dir(&prefix)?;
    Ok(prefix)
}

fn prepare_dir(prefix: &Path) -> Result<(), Error> {
    match prefix.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_vec_pretty(value)?;
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Records the artifacts that exist and the failure, if any, then writes the manifest.
fn finish(mut manifest: Manifest, prefix: &Path, artifacts: &[PathBuf], result: Result<(), Error>) -> Result<(), Failure> {
    for path in artifacts.iter().filter(|p| p.exists()) {
        manifest.add_artifact(path)?;
    }
    if let Err(e) = &result {
        manifest.error = Some(e.to_string());
    }
    manifest.write(prefix)?;
    result.map_err(Failure::from)
}

fn run_generate(cli: &Cli) -> Result<(), Failure> {
    let cfg: GenConfig = load(cli, Some(&["seed"]), None)?;
    let prefix = required_prefix(cli)?;
    let manifest = Manifest::new(cli.command.name(), Some(cfg.seed), serde_json::to_value(&cfg)?);
    let mut artifacts = Vec::new();
    let result = generate(&cfg).and_then(|ds| {
        artifacts = ds.write_csv(&with_suffix(&prefix, ".csv"))?;
        Ok(())
    });
    finish(manifest, &prefix, &artifacts, result)
}

fn run_fit(cli: &Cli) -> Result<(), Failure> {
    let job: FitJob = load(cli, Some(&["seed"]), None)?;
    let prefix = required_prefix(cli)?;
    let manifest = Manifest::new(cli.command.name(), Some(job.seed), serde_json::to_value(&job)?);
    let out = with_suffix(&prefix, "_fit.json");
    let result = (|| {
        let data = Dataset::read_csv(&job.data)?;
        let truth = data.config().map(|g| ground_truth(&g.clone().with_n(data.n()))).transpose()?;
        let init = match (&job.init, &truth) {
            (Some(p), _) => p.clone(),
            (None, Some(t)) => job.fit.initial_point(t, job.seed),
            (None, None) => {
                return Err(Error::Config(
                    "init is required when the dataset does not record its generating configuration".into(),
                ))
            }
        };
        let res = estimation::fit(&data, &job.fit.fit_config(init, data.n(), job.seed))?;
        let errors = truth.as_ref().map(|t| ParamErrors::between(&res.params_hat, t)).transpose()?;
        log::info!("fit: {:?} after {} iterations, loglik {:.6}", res.status, res.n_em_iters, res.final_loglik());
        write_json(&out, &FitOutput { result: &res, errors })
    })();
    finish(manifest, &prefix, &[out], result)
}

fn run_rate_study(cli: &Cli, density: bool) -> Result<(), Failure> {
    let mut cfg: StudyConfig = load(cli, Some(&["gen", "seed"]), None)?;
    if let Some(out) = &cli.out {
        cfg.outputs = Some(out.clone());
    }
    let prefix = cfg
        .outputs
        .clone()
        .ok_or_else(|| Failure::Usage(format!("{} requires --out or an outputs key", cli.command.name())))?;
    prepare_dir(&prefix)?;
    if density && cfg.density_mc.is_none() {
        cfg.density_mc = Some(MonteCarlo::default());
    }
    let manifest = Manifest::new(cli.command.name(), Some(cfg.gen.seed), serde_json::to_value(&cfg)?);
    let mut artifacts = vec![records_path(&prefix)];
    let result = (|| {
        let report = match cfg.density_mc.filter(|_| density) {
            Some(mc) => {
                let check = rate_study::density_rate_check(&cfg, mc)?;
                let path = with_suffix(&prefix, "_density.json");
                write_json(
                    &path,
                    &DensityOutput {
                        slope: check.slope.as_ref(),
                        degenerate_zero: check.degenerate_zero,
                    },
                )?;
                artifacts.push(path);
                check.report
            }
            None => rate_study::run_study(&cfg)?,
        };
        write_report(&report, &prefix, &mut artifacts)
    })();
    finish(manifest, &prefix, &artifacts, result)
}

fn write_report(report: &RateStudyReport, prefix: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(), Error> {
    for (name, fit) in &report.slopes {
        log::info!("slope {name}: {:.4} (r² = {:.3})", fit.slope, fit.r2);
    }
    let slopes = slopes_path(prefix);
    report.write_slopes_json(&slopes)?;
    artifacts.push(slopes);
    artifacts.extend(emit_plots(report, prefix)?);
    Ok(())
}

fn run_identifiability(cli: &Cli, families: &[PullbackFamily]) -> Result<(), Failure> {
    let cfg: IdentConfig = load(cli, Some(&["seed"]), Some(serde_json::to_value(IdentConfig::default())?))?;
    let families = if families.is_empty() { &PullbackFamily::ALL[..] } else { families };
    let prefix = match &cli.out {
        Some(p) => {
            prepare_dir(p)?;
            Some(p.clone())
        }
        None => None,
    };
    let manifest = Manifest::new(cli.command.name(), Some(cfg.seed), serde_json::to_value(cfg)?);
    let out = prefix.as_ref().map(|p| with_suffix(p, "_identifiability.json"));
    let result = (|| {
        let mut reports = Vec::with_capacity(families.len());
        for &family in families {
            let report = check_strong_identifiability(family, &cfg)?;
            println!("{}", report.line());
            reports.push(report);
        }
        match &out {
            Some(path) => write_json(path, &reports),
            None => Ok(()),
        }
    })();
    match prefix {
        Some(p) => finish(manifest, &p, &out.into_iter().collect::<Vec<_>>(), result),
        None => result.map_err(Failure::from),
    }
}

fn run_scan(cli: &Cli) -> Result<(), Failure> {
    let job: ScanJob = load(cli, Some(&["scan", "seed"]), None)?;
    let prefix = required_prefix(cli)?;
    let manifest = Manifest::new(cli.command.name(), Some(job.scan.seed), serde_json::to_value(&job)?);
    let rows = with_suffix(&prefix, "_scan.csv");
    let summary = with_suffix(&prefix, "_scan_summary.json");
    let result = (|| {
        let report = hellinger_bound_scan(job.regime, &job.g_star, &job.scan)?;
        for s in &report.summary {
            log::info!("radius {}: min ratio {:?}", s.epsilon, s.min_ratio);
        }
        report.write_csv(&rows)?;
        write_json(
            &summary,
            &ScanSummary {
                regime: report.regime,
                summary: &report.summary,
            },
        )
    })();
    finish(manifest, &prefix, &[rows, summary], result)
}

fn run_plot(cli: &Cli, records: &Path) -> Result<(), Failure> {
    if cli.config.is_some() || cli.seed.is_some() || !cli.overrides.is_empty() {
        return Err(Failure::Usage("plot takes only --records and --out".into()));
    }
    let prefix = required_prefix(cli)?;
    let manifest = Manifest::new(cli.command.name(), None, serde_json::json!({ "records": records }));
    let mut artifacts = Vec::new();
    let result = (|| {
        let recs = read_records_csv(records)?;
        let regime = recs
            .first()
            .map(|r| r.regime)
            .ok_or_else(|| Error::Data(format!("{} has no records", records.display())))?;
        let report = summarize(regime, recs)?;
        write_report(&report, &prefix, &mut artifacts)
    })();
    finish(manifest, &prefix, &artifacts, result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn path(s: &str) -> Vec<String> {
        s.split('.').map(str::to_owned).collect()
    }

    #[test]
    fn set_path_walks_objects_and_arrays() {
        let mut v = json!({ "a": { "b": 1 }, "xs": [1, 2, 3] });
        set_path(&mut v, &path("a.b"), json!(2)).unwrap();
        set_path(&mut v, &path("xs.1"), json!(9)).unwrap();
        set_path(&mut v, &path("new.key"), json!(true)).unwrap();
        assert_eq!(v, json!({ "a": { "b": 2 }, "xs": [1, 9, 3], "new": { "key": true } }));
        assert!(set_path(&mut v, &path("xs.7"), json!(0)).is_err());
        assert!(set_path(&mut v, &path("a.b.c"), json!(0)).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(Failure::Usage("x".into()).exit_code(), 1);
        assert_eq!(Failure::Run(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(Failure::Run(Error::Numeric("x".into())).exit_code(), 3);
    }
}
