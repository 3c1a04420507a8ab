//! Reports built purely from run directories: a summary CSV, a cost and
//! accuracy table per epoch budget, a view-ablation table and
//! accuracy-vs-epoch plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_err, LabError, Result};
use crate::rundir::{RunDir, RunSummary};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const TABLE_BUDGETS: &str = "table_budgets.txt";
pub const TABLE_VIEWS: &str = "table_views.txt";
pub const PLOT_TOP1: &str = "accuracy_top1.svg";
pub const PLOT_TOP5: &str = "accuracy_top5.svg";

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub views: String,
    pub flops_formula: String,
    pub top1: f64,
    pub top5: f64,
}

impl From<&RunSummary> for SummaryRow {
    fn from(s: &RunSummary) -> Self {
        Self {
            scheme: s.scheme.clone(),
            views: s.views.clone(),
            flops_formula: s.flops_formula.clone(),
            top1: s.top1,
            top5: s.top5,
        }
    }
}

/// Loads every run's summary, failing with the full list of runs that
/// have not been evaluated.
pub fn load_summaries(runs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if runs.is_empty() {
        return Err(LabError::Report("no run directories given".into()));
    }
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for r in runs {
        let dir = RunDir { path: r.clone() };
        if dir.summary_path().exists() {
            out.push(dir.read_summary()?);
        } else {
            missing.push(r.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(LabError::Report(format!(
            "no evaluation summary for: {} (run `simdis evaluate --run <dir>` first)",
            missing.join(", ")
        )));
    }
    Ok(out)
}

pub fn summary_csv(summaries: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in summaries {
        w.serialize(SummaryRow::from(s)).map_err(|e| LabError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| LabError::Report(e.to_string()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn cell(v: Option<&Vec<f64>>) -> String {
    match v {
        None => "-".into(),
        Some(v) if v.len() == 1 => format!("{:.2}", v[0]),
        Some(v) => format!("{:.2} (n={})", median(v.clone()), v.len()),
    }
}

fn method_name(s: &RunSummary) -> String {
    if s.scheme == "custom" {
        let mode = match s.online {
            Some(true) => "on",
            Some(false) => "off",
            None => "byol",
        };
        format!("custom-{mode}[{}]", s.views)
    } else {
        s.scheme.clone()
    }
}

/// Top-1 per method and epoch budget (median over seeds), with each
/// method's cost formula.
pub fn budget_table(summaries: &[RunSummary]) -> String {
    let budgets: BTreeSet<usize> = summaries.iter().map(|s| s.epochs).collect();
    let mut cells: BTreeMap<String, (String, BTreeMap<usize, Vec<f64>>)> = BTreeMap::new();
    for s in summaries {
        let e = cells
            .entry(method_name(s))
            .or_insert_with(|| (s.flops_formula.clone(), BTreeMap::new()));
        e.1.entry(s.epochs).or_default().push(s.top1);
    }
    let mut out = String::new();
    let _ = write!(out, "{:<40} {:<28}", "Method", "FLOPs");
    for n in &budgets {
        let _ = write!(out, " {:>16}", format!("N={n}"));
    }
    out.push('\n');
    for (method, (formula, by_n)) in &cells {
        let _ = write!(out, "{method:<40} {formula:<28}");
        for n in &budgets {
            let _ = write!(out, " {:>16}", cell(by_n.get(n)));
        }
        out.push('\n');
    }
    out
}

/// Top-1 per teaching-view set, with online and offline columns. Only
/// student runs take part; `None` when there are none.
pub fn views_table(summaries: &[RunSummary]) -> Option<String> {
    let mut rows: BTreeMap<(usize, String), [Vec<f64>; 2]> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.probed == "student") {
        let e = rows.entry((s.num_views, s.views.clone())).or_default();
        match s.online {
            Some(false) => e[1].push(s.top1),
            // A student without teacher views is the same run in either mode.
            _ => e[0].push(s.top1),
        }
    }
    if rows.is_empty() {
        return None;
    }
    let mut out = format!("{:<6} {:<70} {:>14} {:>14}\n", "Views", "Teaching views", "Online", "Offline");
    for ((n, views), [on, off]) in &rows {
        let on = if on.is_empty() { None } else { Some(on) };
        let off = if off.is_empty() { None } else { Some(off) };
        let _ = writeln!(out, "{n:<6} {views:<70} {:>14} {:>14}", cell(on), cell(off));
    }
    Some(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Series label: the scheme id, made unique with the view set and seed
/// only where needed.
fn series_labels(summaries: &[RunSummary]) -> Vec<String> {
    let base: Vec<String> = summaries.iter().map(method_name).collect();
    base.iter()
        .zip(summaries)
        .map(|(b, s)| {
            if base.iter().filter(|x| *x == b).count() > 1 {
                format!("{b} seed {} N={}", s.seed, s.epochs)
            } else {
                b.clone()
            }
        })
        .collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of accuracy against epochs, one series per labelled run.
pub fn line_plot_svg(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 200.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = pts.clone().map(|p| p.0).fold(1.0f64, f64::max);
    let y_max = pts.map(|p| p.1).fold(0.0f64, f64::max);
    let y_max = ((y_max / 10.0).ceil() * 10.0).clamp(10.0, 100.0);
    let sx = |x: f64| left + pw * x / x_max;
    let sy = |y: f64| top + ph * (1.0 - y / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let y = y_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{py}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{y:.0}</text>"##,
            left + pw,
            left - 6.0,
            sy(y) + 4.0,
            py = sy(y)
        );
        let x = x_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            sx(x),
            top + ph + 18.0,
            (x * 10.0).round() / 10.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epochs</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        esc(y_label)
    );
    for (i, (label, p)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if path.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn curve(s: &RunSummary, top5: bool) -> Vec<(f64, f64)> {
    let pick = |a: f64, b: f64| if top5 { b } else { a };
    if s.curve.is_empty() {
        vec![(s.epochs as f64, pick(s.top1, s.top5))]
    } else {
        s.curve.iter().map(|p| (p.epoch as f64, pick(p.top1, p.top5))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub budget_table: PathBuf,
    pub views_table: Option<PathBuf>,
    pub plots: Vec<PathBuf>,
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads the runs' summaries and writes every report file into `out`.
pub fn emit_report(runs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let summaries = load_summaries(runs)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let labels = series_labels(&summaries);
    let mut plots = Vec::new();
    for (top5, name, y) in [(false, PLOT_TOP1, "linear probe top-1 (%)"), (true, PLOT_TOP5, "linear probe top-5 (%)")] {
        let series: Vec<(String, Vec<(f64, f64)>)> =
            labels.iter().cloned().zip(summaries.iter().map(|s| curve(s, top5))).collect();
        plots.push(write(out.join(name), &line_plot_svg("accuracy vs epochs", y, &series))?);
    }
    Ok(ReportFiles {
        summary_csv: write(out.join(SUMMARY_CSV), &summary_csv(&summaries)?)?,
        budget_table: write(out.join(TABLE_BUDGETS), &budget_table(&summaries))?,
        views_table: match views_table(&summaries) {
            Some(t) => Some(write(out.join(TABLE_VIEWS), &t)?),
            None => None,
        },
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(vec![3.0, 1.0, 4.0, 2.0]), 2.5);
        assert_eq!(median(vec![5.0]), 5.0);
    }

    #[test]
    fn plot_escapes_labels() {
        let svg = line_plot_svg("t", "y", &[("a<b".into(), vec![(1.0, 50.0)])]);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.starts_with("<svg"));
    }
}
