//! Static SVG line charts of mean MSE against the sweep axis.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{summarize, ResultRow, RowSource};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn mu_label(mu: f64) -> String {
    if mu.is_finite() {
        format!("mu={mu}")
    } else {
        "non-private".into()
    }
}

/// One chart per call: mean MSE (log scale) against the axis value, one line per
/// (algorithm, budget, source). Theory lines are dashed and hold values up to
/// constants.
pub fn render_svg(rows: &[ResultRow], title: &str, axis_label: &str) -> String {
    let summary = summarize(rows);
    let mut series: BTreeMap<(String, u8, String), Vec<(f64, f64)>> = BTreeMap::new();
    for s in summary.iter().filter(|s| s.mean_mse.is_finite() && s.mean_mse > 0.0) {
        let source = match s.source {
            RowSource::Empirical => 0,
            RowSource::Theory => 1,
        };
        let key = (s.algorithm.name().to_string(), source, mu_label(s.mu));
        series.entry(key).or_default().push((s.axis_value, s.mean_mse.log10()));
    }
    let points: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + (WIDTH - LEFT - RIGHT) / 2.0, escape(title));
    if points.is_empty() {
        let _ = writeln!(svg, r#"<text x="{LEFT}" y="{}">no successful runs</text>"#, HEIGHT / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let (y0, y1) = (y0.floor(), y1.ceil());
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let _ = writeln!(svg, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let mut decade = y0 as i32;
    while decade as f64 <= y1 {
        let y = py(decade as f64);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{decade}</text>"#, LEFT - 6.0, y + 4.0);
        decade += 1;
    }
    let mut ticks: Vec<f64> = points.iter().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let x = px(t);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, TOP + ph + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(axis_label));
    let _ = writeln!(svg, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">mean MSE</text>"#, TOP + ph / 2.0, TOP + ph / 2.0);

    for (i, ((alg, source, mu), pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if *source == 1 { r#" stroke-dasharray="6 4""# } else { "" };
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 22.0);
        let suffix = if *source == 1 { " (theory, up to constants)" } else { "" };
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{} {}{}</text>"#, lx + 28.0, ly + 4.0, escape(alg), escape(mu), suffix);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::Algorithm;
    use crate::harness::STATUS_OK;

    fn row(alg: Algorithm, axis: f64, mse: f64, source: RowSource) -> ResultRow {
        ResultRow {
            experiment: "p".into(),
            algorithm: alg,
            mu: 2.0,
            m: 1,
            n_total: 1,
            axis_value: axis,
            rep: 0,
            mse,
            uplink_scalars: 0,
            runtime_ms: 0,
            seed: 0,
            status: STATUS_OK.into(),
            source,
        }
    }

    #[test]
    fn renders_one_line_per_series() {
        let rows = vec![
            row(Algorithm::FedSgd, 20.0, 0.1, RowSource::Empirical),
            row(Algorithm::FedSgd, 40.0, 0.01, RowSource::Empirical),
            row(Algorithm::FedAvg, 20.0, 0.2, RowSource::Empirical),
            row(Algorithm::FedAvg, 40.0, 0.05, RowSource::Theory),
        ];
        let svg = render_svg(&rows, "a < b", "m");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("up to constants"));
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = render_svg(&[], "empty", "m");
        assert!(svg.contains("no successful runs"));
    }
}
