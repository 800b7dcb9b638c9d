//! Minimal static SVG emitters: a signed heatmap and a multi-series line plot.

use std::fmt::Write;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Blue for negative, red for positive, white at zero; `t` in [-1, 1].
fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// One `<rect>` per entry of `values[row][col]`; colour saturation scales
/// with |value| relative to the largest magnitude.
pub fn heatmap(title: &str, values: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let cell = 28.0;
    let (left, top) = (90.0, 40.0);
    let width = left + cell * cols as f64 + 20.0;
    let height = top + cell * rows as f64 + 40.0;
    let scale = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    for (i, row) in values.iter().enumerate() {
        let y = top + cell * i as f64;
        let label = row_labels.get(i).map_or(String::new(), |l| escape(l));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{label}</text>"#,
            left - 4.0,
            y + cell * 0.65
        );
        for (j, v) in row.iter().enumerate() {
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="#999" stroke-width="0.5"><title>{v:.6}</title></rect>"##,
                left + cell * j as f64,
                diverging(t)
            );
        }
    }
    for (j, l) in col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            left + cell * (j as f64 + 0.5),
            top + cell * rows as f64 + 14.0,
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot of named `(x, y)` series on shared linear axes.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 130.0, 36.0, 44.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="#333"/>"##,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for (v, anchor_y) in [(y0, h - bottom), (y1, top)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            anchor_y + 4.0
        );
    }
    for (v, anchor_x) in [(x0, left), (x1, w - right)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.3}</text>"#,
            h - bottom + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.6"/>"#, d.join(" "));
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{colour}">{}</text>"#,
            w - right + 8.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
