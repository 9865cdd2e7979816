//! Static SVG regret curves from sweep results.
//!
//! One panel per results file (a sweep varies a single axis): per-learner
//! mean regret against the axis value, with a translucent band of plus or
//! minus one standard error over replications.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use gfqi::error::{Error, Result};
use gfqi::eval::RegretMetric;

use crate::experiment::ResultRow;
use crate::sweep::read_results;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 180.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [(&str, &str); 4] = [
    ("fqi", "#1f77b4"),
    ("agtd", "#2ca02c"),
    ("gfqi-identity", "#ff7f0e"),
    ("gfqi-exchangeable", "#d62728"),
];

fn color_for(learner: &str, fallback_idx: usize) -> &'static str {
    for (name, color) in PALETTE {
        if name == learner {
            return color;
        }
    }
    ["#9467bd", "#8c564b", "#e377c2", "#7f7f7f"][fallback_idx % 4]
}

struct Series {
    learner: String,
    points: Vec<(f64, f64, f64)>, // (x, mean, se)
}

fn summarize(rows: &[ResultRow], metric: RegretMetric) -> Result<(String, Vec<Series>)> {
    let pick = |r: &ResultRow| match metric {
        RegretMetric::Discounted => r.regret_discounted,
        RegretMetric::AverageReward => r.regret_average,
    };
    let mut axis = None;
    let mut grouped: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        if let Some(v) = pick(row) {
            axis.get_or_insert_with(|| row.axis.clone());
            grouped
                .entry(row.learner.clone())
                .or_default()
                .entry(row.axis_value.to_bits())
                .or_default()
                .push(v);
        }
    }
    let axis = axis.ok_or_else(|| Error::Input("no plottable rows in results".into()))?;
    let mut series = Vec::new();
    for (learner, by_value) in grouped {
        let mut points = Vec::new();
        for (bits, vals) in by_value {
            let x = f64::from_bits(bits);
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let se = if vals.len() > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            points.push((x, mean, se));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        series.push(Series { learner, points });
    }
    Ok((axis, series))
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw_step = span / target as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= target as f64)
        .unwrap_or(mag * 10.0);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render sweep results into a static SVG file. Fails (writing nothing)
/// when the results contain no plottable rows.
pub fn plot_results(csv: &Path, out: &Path, metric: RegretMetric) -> Result<()> {
    let rows = read_results(csv)?;
    let (axis, series) = summarize(&rows, metric)?;

    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in &series {
        for &(x, m, se) in &s.points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(m - 1.5 * se);
            y_hi = y_hi.max(m + 1.5 * se);
        }
    }
    if !x_lo.is_finite() || !y_lo.is_finite() {
        return Err(Error::Input("no plottable rows in results".into()));
    }
    if x_hi == x_lo {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let y_pad = (y_hi - y_lo).max(1e-9) * 0.08;
    y_lo -= y_pad;
    y_hi += y_pad;

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let metric_label = match metric {
        RegretMetric::Discounted => "regret (discounted value)",
        RegretMetric::AverageReward => "regret (average reward)",
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);

    // axes
    let _ = write!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="1"/>"#,
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = write!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="1"/>"#,
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        HEIGHT - MARGIN_B
    );
    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = px(t);
        let _ = write!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0,
            HEIGHT - MARGIN_B + 20.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = py(t);
        let _ = write!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end" font-family="sans-serif">{}</text>"#,
            MARGIN_L - 5.0,
            MARGIN_L,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle" font-family="sans-serif">{axis}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="14" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {:.2})">{metric_label}</text>"#,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = color_for(&s.learner, i);
        if s.points.len() > 1 {
            // +-1 SE band: upper edge left to right, lower edge back
            let mut band = String::new();
            for &(x, m, se) in &s.points {
                let _ = write!(band, "{:.2},{:.2} ", px(x), py(m + se));
            }
            for &(x, m, se) in s.points.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", px(x), py(m - se));
            }
            let _ = write!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.trim_end()
            );
            let line: Vec<String> = s
                .points
                .iter()
                .map(|&(x, m, _)| format!("{:.2},{:.2}", px(x), py(m)))
                .collect();
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        for &(x, m, se) in &s.points {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(x),
                py(m)
            );
            if s.points.len() == 1 {
                let _ = write!(
                    svg,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5"/>"#,
                    px(x),
                    py(m - se),
                    px(x),
                    py(m + se)
                );
            }
        }
    }

    // legend
    let lx = WIDTH - MARGIN_R + 14.0;
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 16.0 + 22.0 * i as f64;
        let color = color_for(&s.learner, i);
        let _ = write!(
            svg,
            r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            y + 4.0,
            s.learner
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::SCHEMA_LINE;

    fn write_csv(dir: &Path, rows: &[&str]) -> std::path::PathBuf {
        let path = dir.join("rows.csv");
        let mut text = format!("{SCHEMA_LINE}\n{}\n", ResultRow::HEADER);
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn single_point_gets_error_bar() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(
            dir.path(),
            &[
                "fqi,n_clusters,5,0,42,0.5,0.1,1.0e0;2.0e0,,10,true,,0",
                "fqi,n_clusters,5,1,42,0.7,0.2,1.0e0;2.0e0,,11,true,,0",
            ],
        );
        let out = dir.path().join("plot.svg");
        plot_results(&csv, &out, RegretMetric::Discounted).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("circle"));
        assert!(svg.contains("fqi"));
    }

    #[test]
    fn empty_results_error_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), &[]);
        let out = dir.path().join("plot.svg");
        assert!(plot_results(&csv, &out, RegretMetric::Discounted).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), &["fqi,n_clusters,banana"]);
        let out = dir.path().join("plot.svg");
        match plot_results(&csv, &out, RegretMetric::Discounted) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn multi_learner_band_curves() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for (learner, base) in [("fqi", 0.5), ("gfqi-exchangeable", 0.2)] {
            for (i, n) in [5, 10, 15].iter().enumerate() {
                for rep in 0..3 {
                    rows.push(format!(
                        "{learner},n_clusters,{n},{rep},42,{},{},1.0e0,,5,true,,0",
                        base / (i + 1) as f64 + 0.01 * rep as f64,
                        base / (i + 1) as f64
                    ));
                }
            }
        }
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let csv = write_csv(dir.path(), &refs);
        let out = dir.path().join("plot.svg");
        plot_results(&csv, &out, RegretMetric::AverageReward).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.contains("polygon"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("gfqi-exchangeable"));
    }
}
