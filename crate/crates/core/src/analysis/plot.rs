//! Minimal SVG bar charts.

use std::fmt::Write;

const BAR_WIDTH: f64 = 28.0;
const GAP: f64 = 6.0;
const HEIGHT: f64 = 160.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Vertical bars, one per label, scaled to the largest absolute value.
/// Labels are rotated under the axis. Output is deterministic.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let n = labels.len().min(values.len());
    let width = 2.0 * MARGIN + n as f64 * (BAR_WIDTH + GAP);
    let total_height = HEIGHT + 3.0 * MARGIN;
    let max = values[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { HEIGHT / max } else { 0.0 };
    let base = MARGIN + HEIGHT;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{total_height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.0}" font-size="13">{}</text>"#,
        MARGIN / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{base}" x2="{:.1}" y2="{base}" stroke="#333"/>"##,
        width - MARGIN
    );
    for (i, (label, &v)) in labels.iter().zip(values).take(n).enumerate() {
        let x = MARGIN + i as f64 * (BAR_WIDTH + GAP) + GAP / 2.0;
        let h = v.abs() * scale;
        let y = if v >= 0.0 { base - h } else { base };
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{BAR_WIDTH}" height="{h:.1}" fill="#4c72b0"><title>{}: {v:.4}</title></rect>"##,
            escape(label)
        );
        let lx = x + BAR_WIDTH / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{lx:.1}" y="{:.1}" transform="rotate(45 {lx:.1} {:.1})">{}</text>"#,
            base + 12.0,
            base + 12.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
