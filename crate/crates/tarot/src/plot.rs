//! Minimal static line plots as SVG, each written next to a CSV holding
//! exactly the plotted numbers, so every figure is recoverable from plain
//! text.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One plotted line: a label for the legend and its (x, y) points.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 54.0;
const PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn validate(series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidConfig("nothing to plot".into()));
    }
    for s in series {
        if s.points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite("plot point"));
        }
    }
    Ok(())
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t.is_empty() || t == "-" {
        "0".into()
    } else {
        t.to_string()
    }
}

/// Renders the SVG document for a titled line plot.
pub fn render_line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    validate(series)?;
    let (x_lo, x_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes.
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    for t in ticks(x_lo, x_hi) {
        let x = px(t);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 20.0,
            fmt(t)
        ));
    }
    for t in ticks(y_lo, y_hi) {
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            x0 - 9.0,
            y + 4.0,
            fmt(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    ));

    // Series lines, markers, legend.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.len() > 1 {
            let path: Vec<String> =
                sorted.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &sorted {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MARGIN_T + 14.0 + 16.0 * k as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n",
            x1 - 150.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\">{}</text>\n",
            x1 - 133.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// The plotted numbers as CSV (`series,x,y`), one row per point.
pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for &(x, y) in &s.points {
            out.push_str(&format!("{},{},{}\n", s.label.replace(',', ";"), x, y));
        }
    }
    out
}

/// Writes the SVG to `path` and the underlying data to the sibling `.csv`.
pub fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let svg = render_line_plot(title, x_label, y_label, series)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    let csv_path = path.with_extension("csv");
    let mut c = fs::File::create(csv_path)?;
    c.write_all(series_csv(series).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<Series> {
        vec![
            Series {
                label: "adapted".into(),
                points: vec![(0.0, 0.5), (0.05, 0.62), (0.1, 0.7)],
            },
            Series { label: "baseline".into(), points: vec![(0.0, 0.5), (0.1, 0.55)] },
        ]
    }

    #[test]
    fn svg_contains_every_point_and_the_labels() {
        let svg = render_line_plot("robust accuracy", "alpha", "accuracy", &demo()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("robust accuracy"));
        assert!(svg.contains("adapted"));
        assert_eq!(svg.matches("<circle").count(), 5);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn csv_recovers_the_plotted_numbers() {
        let csv = series_csv(&demo());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("series,x,y"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 5);
        assert!(rows.contains(&"adapted,0.05,0.62"));
        assert!(rows.contains(&"baseline,0.1,0.55"));
        for row in rows {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 3);
            fields[1].parse::<f64>().unwrap();
            fields[2].parse::<f64>().unwrap();
        }
    }

    #[test]
    fn single_point_series_still_renders() {
        let one = vec![Series { label: "solo".into(), points: vec![(0.5, 0.5)] }];
        let svg = render_line_plot("t", "x", "y", &one).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(render_line_plot("t", "x", "y", &[]).is_err());
        let empty = vec![Series { label: "e".into(), points: vec![] }];
        assert!(render_line_plot("t", "x", "y", &empty).is_err());
    }

    #[test]
    fn markup_in_labels_is_escaped() {
        let s = vec![Series { label: "a<b&c".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] }];
        let svg = render_line_plot("x<y", "in & out", "y", &s).unwrap();
        assert!(svg.contains("a&lt;b&amp;c"));
        assert!(svg.contains("x&lt;y"));
        assert!(!svg.contains("a<b"));
    }
}
