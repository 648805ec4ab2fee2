//! Box plots rendered from precomputed quartiles.

use std::fmt::Write;

use crate::eval_stats::BoxStats;

const WIDTH_PER_BOX: f64 = 90.0;
const HEIGHT: f64 = 360.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;
const LEFT: f64 = 60.0;

/// One box per `(label, stats)` entry on a shared vertical axis.
pub fn boxplot_svg(title: &str, y_label: &str, boxes: &[(String, BoxStats)]) -> String {
    let width = LEFT + 20.0 + WIDTH_PER_BOX * boxes.len().max(1) as f64;
    let (mut lo, mut hi) = boxes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, b)| (lo.min(b.min), hi.max(b.max)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{HEIGHT:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let axis_bottom = TOP + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{axis_bottom}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{yy:.1}" x2="{LEFT}" y2="{yy:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            yy + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (i, (label, b)) in boxes.iter().enumerate() {
        let cx = LEFT + 10.0 + WIDTH_PER_BOX * (i as f64 + 0.5);
        let half = WIDTH_PER_BOX * 0.3;
        let _ = writeln!(s, r#"<g class="box" data-label="{}">"#, escape(label));
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.whisker_high),
            y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.q1),
            y(b.whisker_low)
        );
        for w in [b.whisker_low, b.whisker_high] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                cx - half / 2.0,
                y(w),
                cx + half / 2.0,
                y(w)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(b.median),
            cx + half,
            y(b.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="black"/>"#,
                y(o)
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({cx:.1},{:.1}) rotate(30)">{}</text>"#,
            axis_bottom + 14.0,
            escape(label)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_stats::box_stats;

    #[test]
    fn one_group_per_box_and_one_circle_per_outlier() {
        let a = box_stats(&[0.1, 0.5, 0.52, 0.55, 0.6, 0.58]).unwrap();
        let b = box_stats(&[0.7, 0.8, 0.9]).unwrap();
        let svg = boxplot_svg("t<1>", "dice", &[("a".into(), a.clone()), ("b".into(), b)]);
        assert_eq!(svg.matches(r#"class="box""#).count(), 2);
        assert_eq!(svg.matches("<circle").count(), a.outliers.len());
        assert!(svg.contains("t&lt;1&gt;"));
    }
}
