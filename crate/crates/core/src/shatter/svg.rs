//! Minimal SVG figures: a correlation heatmap and a rate histogram.

use std::fmt::Write;

/// Largest number of cells drawn per heatmap side; bigger matrices are
/// block-averaged.
const MAX_CELLS: usize = 128;

/// Diverging blue-white-red color for a value in [-1, 1].
fn diverging(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 * (1.0 - v.abs()) + c * v.abs()).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of a row-major `n × n` matrix with values in [-1, 1].
pub fn heatmap(matrix: &[f64], n: usize, title: &str) -> String {
    let block = n.div_ceil(MAX_CELLS).max(1);
    let cells = n.div_ceil(block);
    let cell = 4.0;
    let side = cells as f64 * cell;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = side + 20.0,
        h = side + 40.0
    );
    let _ = writeln!(s, r#"<text x="10" y="18" font-family="sans-serif" font-size="12">{}</text>"#, escape(title));
    for bi in 0..cells {
        for bj in 0..cells {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in bi * block..((bi + 1) * block).min(n) {
                for j in bj * block..((bj + 1) * block).min(n) {
                    sum += matrix[i * n + j];
                    count += 1;
                }
            }
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="{}"/>"#,
                10.0 + bj as f64 * cell,
                30.0 + bi as f64 * cell,
                diverging(sum / count as f64)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Histogram of values in [0, 1] with `bins` equal-width bins.
pub fn histogram(values: &[f64], bins: usize, title: &str) -> String {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        counts[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (bar, height) = (12.0, 160.0);
    let width = bins as f64 * bar;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = width + 20.0,
        h = height + 60.0
    );
    let _ = writeln!(s, r#"<text x="10" y="18" font-family="sans-serif" font-size="12">{}</text>"#, escape(title));
    for (k, &c) in counts.iter().enumerate() {
        let h = height * c as f64 / peak;
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4a6fa5"><title>{c}</title></rect>"##,
            10.0 + k as f64 * bar,
            30.0 + height - h,
            bar - 1.0
        );
    }
    let base = 30.0 + height;
    let _ = writeln!(s, r##"<line x1="10" y1="{base}" x2="{:.1}" y2="{base}" stroke="#000"/>"##, 10.0 + width);
    let _ = writeln!(s, r#"<text x="10" y="{:.1}" font-family="sans-serif" font-size="10">0</text>"#, base + 14.0);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">1</text>"#,
        10.0 + width,
        base + 14.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
