//! Minimal static SVG charts for ablation and sweep tables.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 300.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

/// Y axis from 0 to `top` with five ticks.
fn y_axis(s: &mut String, top: f64) {
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=5 {
        let v = top * i as f64 / 5.0;
        let y = H - BOTTOM - plot_h * i as f64 / 5.0;
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            W - RIGHT,
            LEFT - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - BOTTOM
    );
}

fn y_top(max: f64) -> f64 {
    if max.is_finite() && max > 0.0 {
        (max * 1.15).min(1.0).max(max)
    } else {
        1.0
    }
}

fn y_pos(v: f64, top: f64) -> f64 {
    H - BOTTOM - (H - TOP - BOTTOM) * (v / top).clamp(0.0, 1.0)
}

/// Vertical bars, one per label, with an optional dashed reference line.
pub fn bar_chart(title: &str, bars: &[(String, f64)], reference: Option<f64>) -> String {
    let max = bars.iter().map(|b| b.1).chain(reference).fold(0.0, f64::max);
    let top = y_top(max);
    let mut s = header(title);
    y_axis(&mut s, top);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let y = y_pos(*v, top);
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            slot * 0.6,
            H - BOTTOM - y,
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text><text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            y - 4.0,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    if let Some(r) = reference {
        let y = y_pos(r, top);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"gray\">random {r:.3}</text>",
            W - RIGHT,
            W - RIGHT,
            y - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polylines over a shared x axis; x ticks at the union of point positions.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let top = y_top(ys.fold(0.0, f64::max));
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let (lo, hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_pos = |x: f64| LEFT + 10.0 + (W - LEFT - RIGHT - 20.0) * (x - lo) / span;
    let mut s = header(title);
    y_axis(&mut s, top);
    for &x in &xs {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x}</text>",
            x_pos(x),
            H - BOTTOM + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (LEFT + W - RIGHT) / 2.0,
        H - 8.0,
        escape(x_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", x_pos(x), y_pos(y, top)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            W - RIGHT - 90.0,
            ly - 9.0,
            W - RIGHT - 76.0,
            ly,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_has_one_rect_per_bar_plus_background() {
        let bars = vec![("a".to_string(), 0.2), ("b".to_string(), 0.4)];
        let s = bar_chart("t", &bars, Some(0.1));
        assert_eq!(s.matches("<rect").count(), 3);
        assert!(s.contains("random 0.100"));
        assert!(s.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn line_chart_places_points_inside_plot() {
        let ser = Series {
            name: "mAP".into(),
            points: vec![(1.0, 0.3), (5.0, 0.5), (10.0, 0.4)],
        };
        let s = line_chart("t", "x", &[ser]);
        assert_eq!(s.matches("<circle").count(), 3);
        for c in s.lines().filter(|l| l.starts_with("<circle")) {
            let cx: f64 = c.split("cx=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap();
            assert!((LEFT..=W - RIGHT).contains(&cx));
        }
    }

    #[test]
    fn labels_are_escaped() {
        let s = bar_chart("a<b", &[("x&y".into(), 0.5)], None);
        assert!(s.contains("a&lt;b") && s.contains("x&amp;y"));
    }
}
