//! Minimal SVG charts for PR curves and mAP bars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use chain_core::retrieval::{read_metrics_csv, read_pr_csv};

use crate::commands::usage;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn x_of(v: f64) -> f64 {
    MARGIN + v * (W - 2.0 * MARGIN)
}

fn y_of(v: f64) -> f64 {
    H - MARGIN - v * (H - 2.0 * MARGIN)
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            x_of(v),
            H - MARGIN + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            MARGIN - 6.0,
            y_of(v) + 4.0
        );
    }
}

/// Precision against recall, one polyline per CSV.
pub fn pr_chart(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut svg = String::new();
    frame(
        &mut svg,
        "Precision-recall over Hamming radius",
        "recall",
        "precision",
    );
    for (i, path) in inputs.iter().enumerate() {
        let curve = read_pr_csv(path)?;
        if curve.is_empty() {
            return Err(usage(format!("{} holds no curve points", path.display())));
        }
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.recall), y_of(p.precision)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            escape(&label_of(path))
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))
}

/// One bar per mAP row across all metric CSVs.
pub fn map_chart(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut bars = Vec::new();
    for path in inputs {
        let rows = read_metrics_csv(path)?;
        if rows.is_empty() {
            return Err(usage(format!("{} holds no metric rows", path.display())));
        }
        for r in rows.into_iter().filter(|r| r.metric == "map") {
            bars.push((format!("{} @{}", label_of(path), r.k), r.value));
        }
    }
    if bars.is_empty() {
        return Err(usage("no map rows in the metric files"));
    }
    let mut svg = String::new();
    frame(&mut svg, "mAP@K", "", "mAP");
    let slot = (W - 2.0 * MARGIN) / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let top = y_of(value.clamp(0.0, 1.0));
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            slot * 0.7,
            H - MARGIN - top,
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{value:.3}</text>"#,
            x + slot * 0.35,
            top - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.35,
            H - MARGIN + 30.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))
}
