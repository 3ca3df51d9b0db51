//! Static SVG line plots of CSV columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn read_series(csv_text: &str, metrics: &[&str]) -> Result<(String, Vec<Series>)> {
    let mut reader = csv::ReaderBuilder::new().from_reader(csv_text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::MalformedFile(e.to_string()))?
        .clone();
    let x_col = header.iter().position(|h| h == "step");
    let mut cols = Vec::with_capacity(metrics.len());
    for m in metrics {
        let idx = header
            .iter()
            .position(|h| h == *m)
            .ok_or_else(|| Error::MissingColumn(m.to_string()))?;
        cols.push(idx);
    }
    let mut series: Vec<Series> = metrics
        .iter()
        .map(|m| Series {
            name: m.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::MalformedFile(e.to_string()))?;
        let x = match x_col {
            Some(c) => row
                .get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .unwrap_or(row_no as f64),
            None => row_no as f64,
        };
        for (s, &c) in series.iter_mut().zip(&cols) {
            if let Some(y) = row
                .get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|y| y.is_finite())
            {
                s.points.push((x, y));
            }
        }
    }
    let x_label = x_col.map_or("row", |c| &header[c]).to_string();
    Ok((x_label, series))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 {
            lo.abs() * 0.05
        } else {
            0.5
        };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one polyline per metric, with the `step` column (or the row
/// number) on the x axis. Two or more metrics get a legend.
pub fn render_svg(csv_text: &str, metrics: &[&str]) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::InvalidParameter("no metrics to plot".into()));
    }
    let (x_label, series) = read_series(csv_text, metrics)?;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let y_label = if series.len() == 1 {
        series[0].name.as_str()
    } else {
        "value"
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        if series.len() > 1 {
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="2"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{ly:.2}" font-size="12">{}</text>"#,
                lx + 24.0,
                escape(&s.name)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e5).contains(&v.abs()) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Reads `csv_path`, writes the plot next to it with an `.svg` extension and
/// returns the new path.
pub fn plot_csv(csv_path: &Path, metrics: &[&str]) -> Result<PathBuf> {
    let text = std::fs::read_to_string(csv_path)?;
    let svg = render_svg(&text, metrics)?;
    let out = csv_path.with_extension("svg");
    std::fs::write(&out, svg)?;
    Ok(out)
}
