//! Minimal SVG scatter plots for 2D point sets.

use std::fmt::Write;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;

/// Scatter of the first two coordinates of each layer, drawn in order.
/// Each layer is `(points, fill colour)`.
pub fn scatter(layers: &[(&[Vec<f64>], &str)], title: &str) -> String {
    let all = layers.iter().flat_map(|(pts, _)| pts.iter()).filter(|p| p.len() >= 2);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            if p[k].is_finite() {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pts, colour) in layers {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="0.5">"#, escape(colour));
        for p in pts.iter().filter(|p| p.len() >= 2 && p[0].is_finite() && p[1].is_finite()) {
            let cx = MARGIN + (p[0] - lo[0]) * scale;
            let cy = SIZE - MARGIN - (p[1] - lo[1]) * scale;
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5"/>"#);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
