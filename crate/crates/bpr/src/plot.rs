//! Minimal self-contained SVG output: line/scatter overlays and bar
//! charts. Output bytes are a pure function of the input.

use std::path::Path;

use crate::error::{BprError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Overlaid line plot with one polyline (and point markers) per series.
pub fn emit_line_plot(series: &[Series], title: &str, path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(BprError::Domain("cannot plot an empty series".into()));
    }
    let (x_lo, x_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));
    frame(&mut svg, x_lo, x_hi, y_lo, y_hi);

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                fmt(sx(x)),
                fmt(sy(y))
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN - 150.0,
            40.0 + 16.0 * k as f64,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Labeled vertical bars.
pub fn emit_bar_plot(bars: &[(String, f64)], title: &str, path: &Path) -> Result<()> {
    if bars.is_empty() {
        return Err(BprError::Domain("cannot plot an empty bar set".into()));
    }
    let (y_lo_raw, y_hi) = axis_range(bars.iter().map(|b| b.1));
    let y_lo = y_lo_raw.min(0.0);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len() as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));
    frame(&mut svg, 0.0, bars.len() as f64, y_lo, y_hi);

    for (k, (label, value)) in bars.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let x = MARGIN + slot * k as f64 + 0.15 * slot;
        let w = 0.7 * slot;
        let y_top = sy(value.max(0.0));
        let y_bottom = sy(value.min(0.0));
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>\n",
            fmt(x),
            fmt(y_top),
            fmt(w),
            fmt((y_bottom - y_top).max(0.5))
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            fmt(x + w / 2.0),
            HEIGHT - MARGIN + 16.0,
            xml_escape(label)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt(x + w / 2.0),
            fmt(y_top - 5.0),
            fmt(*value)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn frame(svg: &mut String, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) {
    svg.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#444\"/>\n",
        m = MARGIN,
        w = WIDTH - 2.0 * MARGIN,
        h = HEIGHT - 2.0 * MARGIN
    ));
    for (t, anchor_x) in [(x_lo, MARGIN), (x_hi, WIDTH - MARGIN)] {
        svg.push_str(&format!(
            "<text x=\"{anchor_x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN + 30.0,
            fmt(t)
        ));
    }
    for (t, anchor_y) in [(y_lo, HEIGHT - MARGIN), (y_hi, MARGIN)] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{anchor_y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            fmt(t)
        ));
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
