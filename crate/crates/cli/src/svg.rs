//! Minimal line chart of mean accuracy against training blocks.

use std::fmt::Write;

use s2i_core::harness::LearningCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per curve, x = training blocks `m`, y = mean accuracy on a
/// fixed 0..1 scale.
pub fn render(title: &str, curves: &[LearningCurve]) -> String {
    let max_m = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.m))
        .max()
        .unwrap_or(1)
        .max(2);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |m: usize| LEFT + plot_w * (m as f64 - 1.0) / (max_m as f64 - 1.0);
    let y = |acc: f64| TOP + plot_h * (1.0 - acc);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, LEFT + plot_w / 2.0, escape(title));

    // axes and ticks
    let (x0, x1, y0, y1) = (LEFT, LEFT + plot_w, TOP + plot_h, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let acc = k as f64 / 5.0;
        let ty = y(acc);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{ty}" x2="{x1}" y2="{ty}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{acc:.1}</text>"#, x0 - 6.0, ty + 4.0);
    }
    let step = max_m.div_ceil(10).max(1);
    for m in (1..=max_m).step_by(step) {
        let tx = x(m);
        let _ = writeln!(s, r#"<line x1="{tx}" y1="{y0}" x2="{tx}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{tx}" y="{}" text-anchor="middle">{m}</text>"#, y0 + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">training blocks (m)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">mean accuracy</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    // curves and legend
    for (k, curve) in curves.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let points: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.m), y(p.mean_accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = x1 + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&curve.label()));
    }
    s.push_str("</svg>\n");
    s
}
