//! Log–log charts and their data tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{with_suffix, CellStat, RateStudyReport, SlopeFit, DENSITY_SERIES};
use crate::error::{Error, Result};
use crate::metrics::ParamErrors;

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn series_names(report: &RateStudyReport) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = ParamErrors::NAMES.to_vec();
    names.push(DENSITY_SERIES);
    names.retain(|n| report.cells.iter().any(|c| c.series.contains_key(*n)));
    names
}

fn table(points: &[(usize, CellStat)], slope: Option<&SlopeFit>) -> String {
    let mut s = String::from("n,mean,std,slope_fit\n");
    for (n, st) in points {
        let fit = slope.map(|f| f.predict(*n as f64).to_string()).unwrap_or_default();
        let _ = writeln!(s, "{n},{},{},{fit}", st.mean, st.std);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, n: f64) -> f64 {
        MARGIN_L + (n.log10() - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B - (v.log10() - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn chart(name: &str, points: &[(usize, CellStat)], slope: Option<&SlopeFit>) -> String {
    let positive: Vec<f64> = points
        .iter()
        .flat_map(|(_, s)| [s.mean, s.mean - s.std, s.mean + s.std])
        .filter(|v| *v > 0.0 && v.is_finite())
        .collect();
    let (lo, hi) = positive.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (1e-3, 1.0) };
    let nmin = points.first().map_or(1.0, |p| p.0 as f64);
    let nmax = points.last().map_or(10.0, |p| p.0 as f64);
    let ax = Axes {
        x0: nmin.log10().floor(),
        x1: nmax.log10().ceil().max(nmin.log10().floor() + 1.0),
        y0: lo.log10().floor(),
        y1: hi.log10().ceil().max(lo.log10().floor() + 1.0),
    };
    let title = match slope {
        Some(f) => format!("{name}: slope {:.3} (r² = {:.3})", f.slope, f.r2),
        None => format!("{name}: no slope"),
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&title));
    let (left, right, top, bottom) = (MARGIN_L, WIDTH - MARGIN_R, MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(s, r#"<g stroke="black" fill="none"><rect x="{left}" y="{top}" width="{}" height="{}"/></g>"#, right - left, bottom - top);
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11" fill="black">"#);
    for e in ax.x0 as i32..=ax.x1 as i32 {
        let x = ax.px(10f64.powi(e));
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{e}</text>"#, bottom + 18.0);
    }
    for e in ax.y0 as i32..=ax.y1 as i32 {
        let y = ax.py(10f64.powi(e));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, left - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">n</text>"#, (left + right) / 2.0, HEIGHT - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#, (top + bottom) / 2.0, (top + bottom) / 2.0, escape(name));
    let _ = writeln!(s, "</g>");
    if let Some(f) = slope {
        let a = (nmin, f.predict(nmin));
        let b = (nmax, f.predict(nmax));
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ff7f0e" stroke-width="2" stroke-dasharray="6 4"/>"##,
            ax.px(a.0),
            ax.py(a.1),
            ax.px(b.0),
            ax.py(b.1)
        );
    }
    let _ = writeln!(s, r##"<g stroke="#1f77b4" fill="#1f77b4">"##);
    for (n, st) in points {
        let x = ax.px(*n as f64);
        let lo = (st.mean - st.std).max(10f64.powf(ax.y0));
        let hi = st.mean + st.std;
        if st.std > 0.0 && st.mean > 0.0 {
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}"/>"#, ax.py(lo), ax.py(hi));
        }
        let y = if st.mean > 0.0 { ax.py(st.mean) } else { bottom };
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4"/>"#);
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

/// Writes `{prefix}_{series}.csv` and `{prefix}_{series}.svg` for every
/// series present in the report. On failure, files written so far are removed.
pub fn emit_plots(report: &RateStudyReport, prefix: &Path) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() || report.cells.is_empty() {
        return Err(Error::Input("the report has no records to plot".into()));
    }
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        for name in series_names(report) {
            let points = report.series(name);
            let slope = report.slopes.get(name);
            for (ext, body) in [("csv", table(&points, slope)), ("svg", chart(name, &points, slope))] {
                let path = with_suffix(prefix, &format!("_{name}.{ext}"));
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(written)
}
