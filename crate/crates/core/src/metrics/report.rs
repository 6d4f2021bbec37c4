//! Static report rendering: an SVG reward curve and plain-text tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::log::MetricsRecord;

pub const EMPTY_RUN_NOTICE: &str = "empty run: no metrics records were logged";

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub frechet_proxy: f64,
    pub ot_cost: f64,
    pub quality_score: f64,
}

impl ComparisonRow {
    pub fn from_record(label: impl Into<String>, r: &MetricsRecord) -> Self {
        Self {
            label: label.into(),
            psnr: r.psnr,
            ssim: r.ssim,
            frechet_proxy: r.frechet_proxy,
            ot_cost: r.ot_cost,
            quality_score: r.quality_score,
        }
    }
}

pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$} | {:>8} | {:>7} | {:>9} | {:>9} | {:>7}",
        "Method", "PSNR", "SSIM", "Frechet", "OT", "Score"
    );
    let _ = writeln!(out, "{}", "-".repeat(label_w + 59));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<label_w$} | {:>8.3} | {:>7.4} | {:>9.5} | {:>9.4} | {:>7.4}",
            r.label, r.psnr, r.ssim, r.frechet_proxy, r.ot_cost, r.quality_score
        );
    }
    out
}

/// Polyline chart of `(x, y)` series; output depends only on the inputs.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} L{PAD} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="{}" font-size="11">{y0:.4}</text><text x="{PAD}" y="{}" font-size="11">{y1:.4}</text>"#,
        H - PAD + 14.0,
        PAD - 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">iteration {x1:.0}</text>"#,
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * k as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub empty: bool,
    pub files: Vec<PathBuf>,
}

/// Writes `reward_curve.svg` and `metrics.txt` for one run into `out_dir`.
///
/// An empty run produces only `metrics.txt` containing [`EMPTY_RUN_NOTICE`].
pub fn render_report(records: &[MetricsRecord], out_dir: &Path) -> Result<ReportOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table_path = out_dir.join("metrics.txt");
    if records.is_empty() {
        fs::write(&table_path, format!("{EMPTY_RUN_NOTICE}\n")).map_err(|e| Error::io(&table_path, e))?;
        return Ok(ReportOutput {
            empty: true,
            files: vec![table_path],
        });
    }

    let curve: Vec<(f64, f64)> = records.iter().map(|r| (r.iteration as f64, r.mean_reward)).collect();
    let svg = line_chart_svg("mean reward per iteration", "reward", &[("reward".into(), curve)]);
    let svg_path = out_dir.join("reward_curve.svg");
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:>9} | {:>12} | {:>8} | {:>7} | {:>9} | {:>9} | {:>7}",
        "iteration", "mean_reward", "PSNR", "SSIM", "Frechet", "OT", "Score"
    );
    for r in records {
        let _ = writeln!(
            text,
            "{:>9} | {:>12.6} | {:>8.3} | {:>7.4} | {:>9.5} | {:>9.4} | {:>7.4}",
            r.iteration, r.mean_reward, r.psnr, r.ssim, r.frechet_proxy, r.ot_cost, r.quality_score
        );
    }
    let first = &records[0];
    let last = &records[records.len() - 1];
    text.push('\n');
    text.push_str(&format_comparison_table(&[
        ComparisonRow::from_record(format!("iteration {}", first.iteration), first),
        ComparisonRow::from_record(format!("iteration {}", last.iteration), last),
    ]));
    fs::write(&table_path, text).map_err(|e| Error::io(&table_path, e))?;
    Ok(ReportOutput {
        empty: false,
        files: vec![svg_path, table_path],
    })
}
