//! Figure tables and their SVG renderings.

use std::fmt::Write as _;

use posekit::metrics::{error_by_distance_scores, DistanceTable, MetricsReport};

use crate::CliError;

pub const DEFAULT_DISTANCE_EDGES: [f64; 4] = [3.0, 8.0, 12.0, 20.0];
pub const BINS_STUDY_COLUMNS: &str = "head,bins,parameters,orientation_head_parameters,e_q_mean,e_t_mean,esa_score";

pub fn distance_table(report: &MetricsReport, edges: &[f64]) -> Result<DistanceTable, CliError> {
    error_by_distance_scores(&report.per_image, edges).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinsRow {
    pub head: String,
    pub bins: usize,
    pub parameters: usize,
    pub orientation_head_parameters: usize,
    pub e_q_mean: f64,
    pub e_t_mean: f64,
    pub esa_score: f64,
}

fn meta<'a>(r: &'a MetricsReport, key: &str, name: &str) -> Result<&'a str, CliError> {
    r.metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Runtime(format!("{name}: report has no meta.{key}; produce it with `posekit evaluate`")))
}

/// One row per report, ordered by bins per dimension (regression first).
pub fn bins_study(reports: &[(String, MetricsReport)]) -> Result<Vec<BinsRow>, CliError> {
    let mut rows = Vec::with_capacity(reports.len());
    for (name, r) in reports {
        let head = meta(r, "head", name)?.to_string();
        let bins = head
            .strip_prefix("softclass(")
            .and_then(|s| s.strip_suffix(')'))
            .map(|s| s.parse::<usize>())
            .transpose()
            .map_err(|e| CliError::Runtime(format!("{name}: head {head:?}: {e}")))?
            .unwrap_or(0);
        let num = |k: &str| -> Result<usize, CliError> {
            meta(r, k, name)?
                .parse()
                .map_err(|e| CliError::Runtime(format!("{name}: meta.{k}: {e}")))
        };
        rows.push(BinsRow {
            head,
            bins,
            parameters: num("parameters")?,
            orientation_head_parameters: num("orientation_head_parameters")?,
            e_q_mean: r.e_q_mean,
            e_t_mean: r.e_t_mean,
            esa_score: r.esa_score,
        });
    }
    rows.sort_by_key(|r| r.bins);
    Ok(rows)
}

pub fn bins_csv(rows: &[BinsRow]) -> String {
    let mut s = format!("{BINS_STUDY_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.head, r.bins, r.parameters, r.orientation_head_parameters, r.e_q_mean, r.e_t_mean, r.esa_score
        );
    }
    s
}

struct Series<'a> {
    title: &'a str,
    unit: &'a str,
    values: Vec<Option<f64>>,
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Side-by-side bar panels sharing category labels.
fn bar_panels(labels: &[String], panels: &[Series<'_>]) -> String {
    let width = panels.len() as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, series) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let max = series.values.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let top = if max > 0.0 { max * 1.1 } else { 1.0 };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{} ({})</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 16.0,
            esc(series.title),
            esc(series.unit)
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{x0},{y0} {x0},{} {},{}" fill="none" stroke="black"/>"#,
            y0 + PANEL_H,
            x0 + PANEL_W,
            y0 + PANEL_H
        );
        for t in 0..=4 {
            let v = top * t as f64 / 4.0;
            let y = y0 + PANEL_H - PANEL_H * t as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
                x0 - 4.0,
                y + 4.0
            );
        }
        let slot = PANEL_W / labels.len().max(1) as f64;
        for (i, (label, v)) in labels.iter().zip(&series.values).enumerate() {
            let cx = x0 + slot * (i as f64 + 0.5);
            if let Some(v) = v {
                let h = PANEL_H * v / top;
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{}" height="{h}" fill="#4878a8"/>"##,
                    cx - slot * 0.35,
                    y0 + PANEL_H - h,
                    slot * 0.7
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + PANEL_H + 14.0,
                esc(label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn distance_svg(table: &DistanceTable) -> String {
    let labels: Vec<String> = table.bins.iter().map(|b| format!("[{}, {})", b.lo, b.hi)).collect();
    bar_panels(
        &labels,
        &[
            Series {
                title: "position error by distance",
                unit: "m",
                values: table.bins.iter().map(|b| b.e_t.map(|s| s.mean)).collect(),
            },
            Series {
                title: "orientation error by distance",
                unit: "deg",
                values: table.bins.iter().map(|b| b.e_q.map(|s| s.mean)).collect(),
            },
        ],
    )
}

pub fn bins_svg(rows: &[BinsRow]) -> String {
    let labels: Vec<String> = rows.iter().map(|r| r.head.clone()).collect();
    bar_panels(
        &labels,
        &[
            Series {
                title: "orientation error",
                unit: "deg",
                values: rows.iter().map(|r| Some(r.e_q_mean)).collect(),
            },
            Series {
                title: "parameters",
                unit: "M",
                values: rows.iter().map(|r| Some(r.parameters as f64 / 1e6)).collect(),
            },
        ],
    )
}
