//! Hand-written SVG figures: per-class sample counts with per-class MAE
//! curves, and per-group head usage bars. Output is deterministic text.

use std::fmt::Write as _;

use crate::error::{bail, Result};
use crate::metrics::MetricsReport;
use crate::routing::GroupUsage;

const W: f64 = 820.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 60.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(s: &mut String) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Rounds an axis maximum up to 1, 2 or 5 times a power of ten.
fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * p)
        .find(|&c| c >= v)
        .unwrap_or(10.0 * p)
}

fn axes(s: &mut String, x_label: &str, left_label: &str, left_max: f64, right: Option<(&str, f64)>) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    if right.is_some() {
        let _ = writeln!(s, r#"<line x1="{x1}" y1="{y0}" x2="{x1}" y2="{y1}"/>"#);
    }
    let _ = writeln!(s, "</g>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 4.0,
            fmt_tick(f * left_max)
        );
        if let Some((_, rmax)) = right {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}">{}</text>"#,
                x1 + 4.0,
                y + 4.0,
                fmt_tick(f * rmax)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        escape(left_label)
    );
    if let Some((label, _)) = right {
        let _ = writeln!(
            s,
            r#"<text transform="translate({} {}) rotate(90)" text-anchor="middle">{}</text>"#,
            W - 14.0,
            (y0 + y1) / 2.0,
            escape(label)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Per-class count bars from the first report, one per-class MAE curve per
/// report, and a dashed CMAE line per report.
pub fn class_plot(series: &[(&str, &MetricsReport)]) -> Result<String> {
    let Some((_, first)) = series.first() else {
        bail!(InvalidInput, "nothing to plot");
    };
    let classes = first.per_class_count.len();
    if series.iter().any(|(_, r)| r.per_class_mae.len() != classes) {
        bail!(Shape, "reports cover different age ranges");
    }
    let count_max = nice_max(*first.per_class_count.iter().max().unwrap_or(&0) as f64);
    let mae_max = nice_max(
        series
            .iter()
            .flat_map(|(_, r)| r.per_class_mae.iter().flatten().copied().chain([r.cmae]))
            .fold(0.0, f64::max),
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let slot = (x1 - x0) / classes as f64;
    let cx = |k: usize| x0 + (k as f64 + 0.5) * slot;
    let count_y = |c: f64| y0 - c / count_max * (y0 - y1);
    let mae_y = |m: f64| y0 - m / mae_max * (y0 - y1);

    let mut s = String::new();
    header(&mut s);
    axes(&mut s, "age", "samples per age", count_max, Some(("MAE", mae_max)));
    let _ = writeln!(s, r##"<g fill="#c7c7c7">"##);
    for (k, &n) in first.per_class_count.iter().enumerate() {
        if n > 0 {
            let top = count_y(n as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}"/>"#,
                cx(k) - slot * 0.4,
                slot * 0.8,
                y0 - top
            );
        }
    }
    let _ = writeln!(s, "</g>");
    for (i, (name, r)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = r
            .per_class_mae
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.map(|m| (cx(k), mae_y(m))))
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}"/>"#);
        }
        let y = mae_y(r.cmae);
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{} (MAE {:.3}, CMAE {:.3})</text>"#,
            x0 + 8.0,
            escape(name),
            r.mae,
            r.cmae
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Stacked bars: vanilla share at the bottom, balanced share on top.
pub fn usage_plot(groups: &[GroupUsage]) -> Result<String> {
    if groups.is_empty() {
        bail!(InvalidInput, "nothing to plot");
    }
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let slot = (x1 - x0) / groups.len() as f64;
    let mut s = String::new();
    header(&mut s);
    axes(&mut s, "age group", "usage ratio", 1.0, None);
    for (i, g) in groups.iter().enumerate() {
        let x = x0 + i as f64 * slot + slot * 0.15;
        let w = slot * 0.7;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}-{}</text>"#,
            x + w / 2.0,
            y0 + 14.0,
            g.lo,
            g.hi
        );
        let Some(v) = g.vanilla_ratio else { continue };
        let hv = v * (y0 - y1);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{hv:.2}" fill="#1f77b4"/>"##,
            y0 - hv
        );
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y1:.2}" width="{w:.2}" height="{:.2}" fill="#ff7f0e"/>"##,
            (y0 - y1) - hv
        );
    }
    let _ = writeln!(s, r##"<text x="{}" y="{TOP}" fill="#1f77b4">vanilla</text>"##, x0 + 8.0);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" fill="#ff7f0e">balanced</text>"##,
        x0 + 8.0,
        TOP + 14.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}
