//! SVG learning curve: mean evaluation return against step with a shaded
//! band of one standard deviation.

use std::fmt::Write as _;

use crate::error::{QvpoError, Result};
use crate::metrics::{parse_metrics, MetricsRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PAD: f64 = 0.05;

/// Data-space rectangle shown by the chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - PAD * span, hi + PAD * span)
    } else {
        let half = if lo == 0.0 { 1.0 } else { lo.abs() * PAD };
        (lo - half, hi + half)
    }
}

/// Steps on x; mean minus std to mean plus std on y; each padded 5% of its span.
pub fn axis_range(rows: &[MetricsRow]) -> Result<AxisRange> {
    if rows.is_empty() {
        return Err(QvpoError::Parse {
            line: 2,
            message: "metrics file has no data rows".into(),
        });
    }
    let xs = rows.iter().map(|r| r.step as f64);
    let x_lo = xs.clone().fold(f64::INFINITY, f64::min);
    let x_hi = xs.fold(f64::NEG_INFINITY, f64::max);
    let y_lo = rows
        .iter()
        .map(|r| r.eval_return_mean - r.eval_return_std)
        .fold(f64::INFINITY, f64::min);
    let y_hi = rows
        .iter()
        .map(|r| r.eval_return_mean + r.eval_return_std)
        .fold(f64::NEG_INFINITY, f64::max);
    let (x_min, x_max) = padded(x_lo, x_hi);
    let (y_min, y_max) = padded(y_lo, y_hi);
    Ok(AxisRange {
        x_min,
        x_max,
        y_min,
        y_max,
    })
}

struct Frame {
    range: AxisRange,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let r = &self.range;
        MARGIN_LEFT + (v - r.x_min) / (r.x_max - r.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let r = &self.range;
        HEIGHT - MARGIN_BOTTOM
            - (v - r.y_min) / (r.y_max - r.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn points(coords: impl Iterator<Item = (f64, f64)>) -> String {
    coords
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders parsed rows to an SVG document.
pub fn render_svg(rows: &[MetricsRow]) -> Result<String> {
    let range = axis_range(rows)?;
    let f = Frame { range };
    let line = points(rows.iter().map(|r| (f.x(r.step as f64), f.y(r.eval_return_mean))));
    let upper = rows
        .iter()
        .map(|r| (f.x(r.step as f64), f.y(r.eval_return_mean + r.eval_return_std)));
    let lower = rows
        .iter()
        .rev()
        .map(|r| (f.x(r.step as f64), f.y(r.eval_return_mean - r.eval_return_std)));
    let band = points(upper.chain(lower));

    let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
        range.x_min, range.x_max, range.y_min, range.y_max
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline class="axes" points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r##"<polygon class="band" points="{band}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##
    );
    let _ = writeln!(
        svg,
        r##"<polyline class="mean" points="{line}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##
    );
    for (value, anchor, x, y) in [
        (range.x_min, "start", left, bottom + 18.0),
        (range.x_max, "end", right, bottom + 18.0),
    ] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="12" text-anchor="{anchor}">{value:.0}</text>"#
        );
    }
    for (value, y) in [(range.y_min, bottom), (range.y_max, top + 10.0)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y}" font-size="12" text-anchor="end">{value:.3}</text>"#,
            left - 6.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">environment step</text>"#,
        (left + right) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">evaluation return</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Parses a metrics CSV and renders it.
pub fn plot_metrics(text: &str) -> Result<String> {
    render_svg(&parse_metrics(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::HEADER;

    fn extract<'a>(svg: &'a str, class: &str) -> &'a str {
        let tag = format!(r#"class="{class}" points=""#);
        let start = svg.find(&tag).unwrap() + tag.len();
        let len = svg[start..].find('"').unwrap();
        &svg[start..start + len]
    }

    #[test]
    fn two_rows_give_two_vertices() {
        let text = format!("{HEADER}\n100,1,-5,1,0,0,0,0,,,\n200,2,-3,0.5,0,0,0,0,,,\n");
        let svg = plot_metrics(&text).unwrap();
        assert_eq!(extract(&svg, "mean").split(' ').count(), 2);
        assert_eq!(extract(&svg, "band").split(' ').count(), 4);
    }

    #[test]
    fn axis_range_pads_five_percent() {
        let text = format!("{HEADER}\n0,0,1,1,0,0,0,0,,,\n1000,5,4,2,0,0,0,0,,,\n");
        let rows = parse_metrics(&text).unwrap();
        let r = axis_range(&rows).unwrap();
        // x: [0, 1000]; y: [1 - 1, 4 + 2] = [0, 6]
        assert!((r.x_min + 50.0).abs() < 1e-12 && (r.x_max - 1050.0).abs() < 1e-12);
        assert!((r.y_min + 0.3).abs() < 1e-12 && (r.y_max - 6.3).abs() < 1e-12);
    }

    #[test]
    fn malformed_or_empty_input_is_a_parse_error() {
        let text = format!("{HEADER}\n100,1,-5,1,0,0,0,0,,,\n200,2,oops,0.5,0,0,0,0,,,\n");
        let err = plot_metrics(&text).unwrap_err();
        assert!(matches!(err, QvpoError::Parse { line: 3, .. }), "{err}");
        let err = plot_metrics(&format!("{HEADER}\n")).unwrap_err();
        assert!(matches!(err, QvpoError::Parse { .. }));
    }

    #[test]
    fn single_row_still_has_a_nonempty_range() {
        let text = format!("{HEADER}\n0,0,0,0,0,0,0,0,,,\n");
        let svg = plot_metrics(&text).unwrap();
        assert!(!svg.contains("NaN"));
    }
}
