//! Line charts of metric streams, written as plain SVG text.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use serde_json::Value;

const WIDTH: f64 = 820.0;
const PANEL_HEIGHT: f64 = 260.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 34.0;
const BOTTOM: f64 = 40.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One metric stream: a label for the legend and its records.
pub struct Series {
    pub label: String,
    pub records: Vec<Value>,
}

/// Resolves a dotted path such as `mean_entropy.0` or `bound.sigma_bar.1`.
/// `None` when the path does not exist; `Some(Value::Null)` when it exists but is empty.
pub fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = record;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get(part)?,
            Value::Array(items) => items.get(part.parse::<usize>().ok()?)?,
            Value::Null => return Some(&Value::Null),
            _ => return None,
        };
    }
    Some(cur)
}

fn points(series: &Series, field: &str, logy: bool) -> Result<Vec<(f64, f64)>> {
    let mut found = false;
    let mut out = Vec::new();
    for (i, r) in series.records.iter().enumerate() {
        let Some(v) = lookup(r, field) else { continue };
        found = true;
        let y = match v {
            Value::Null => continue,
            Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
            Value::Array(_) => bail!(
                "field {field} is a list in {}; pick an element, e.g. {field}.0",
                series.label
            ),
            _ => bail!("field {field} is not numeric in {}", series.label),
        };
        if !y.is_finite() || (logy && y <= 0.0) {
            continue;
        }
        let x = r.get("step").and_then(Value::as_f64).unwrap_or(i as f64);
        out.push((x, if logy { y.log10() } else { y }));
    }
    if !found {
        bail!(
            "field {field} is missing from the records of {}",
            series.label
        );
    }
    Ok(out)
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 * hi.abs().max(1.0) {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.04;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".into()
    } else if !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one panel per field, stacked vertically, with one line per series.
pub fn render_svg(series: &[Series], fields: &[String], logy: &[String]) -> Result<String> {
    if series.is_empty() {
        bail!("no metric streams to plot");
    }
    if fields.is_empty() {
        bail!("no fields to plot");
    }
    for f in logy {
        if !fields.contains(f) {
            bail!("--logy field {f} is not among the plotted fields");
        }
    }
    let height = PANEL_HEIGHT * fields.len() as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;

    for (p, field) in fields.iter().enumerate() {
        let log = logy.contains(field);
        let data: Vec<Vec<(f64, f64)>> = series
            .iter()
            .map(|s| points(s, field, log))
            .collect::<Result<_>>()?;
        let all = data.iter().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (x0, x1) = nice_range(x0, x1);
        let (y0, y1) = nice_range(y0, y1);

        let top = p as f64 * PANEL_HEIGHT + TOP;
        let plot_h = PANEL_HEIGHT - TOP - BOTTOM;
        let plot_w = WIDTH - LEFT - RIGHT;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + plot_h - (y - y0) / (y1 - y0) * plot_h;

        let title = if log {
            format!("{field} (log10)")
        } else {
            field.clone()
        };
        writeln!(
            svg,
            r#"<text x="{LEFT}" y="{:.1}" font-size="13" font-weight="bold">{}</text>"#,
            top - 10.0,
            escape(&title)
        )?;
        writeln!(
            svg,
            r##"<rect x="{LEFT}" y="{top:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#444"/>"##
        )?;
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let yv = y0 + f * (y1 - y0);
            let yy = sy(yv);
            writeln!(
                svg,
                r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                LEFT + plot_w,
                LEFT - 6.0,
                yy + 4.0,
                fmt_tick(yv)
            )?;
            let xv = x0 + f * (x1 - x0);
            let xx = sx(xv);
            writeln!(
                svg,
                r#"<text x="{xx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                top + plot_h + 16.0,
                fmt_tick(xv)
            )?;
        }
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
            LEFT + plot_w / 2.0,
            top + plot_h + 32.0
        )?;

        for (k, (s, pts)) in series.iter().zip(&data).enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            if !pts.is_empty() {
                let coords: Vec<String> = pts
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    coords.join(" ")
                )?;
            }
            let ly = top + 12.0 + 16.0 * k as f64;
            let lx = LEFT + plot_w + 12.0;
            writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&s.label)
            )?;
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
