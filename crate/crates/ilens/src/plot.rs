//! Static SVG figures: line plots and a diverging heatmap.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick label with up to 3 significant decimals.
fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        num(W / 2.0),
        esc(title)
    );
}

/// Lines with markers, one colour per series, legend on the right.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    header(&mut out, title);
    let _ = write!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        num(pw),
        num(ph)
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = write!(
            out,
            r##"<line x1="{LEFT}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            num(LEFT + pw),
            num(LEFT - 6.0),
            num(sy(fy) + 4.0),
            tick(fy),
            y = num(sy(fy)),
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(sx(fx)),
            num(TOP + ph + 16.0),
            tick(fx)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        num(LEFT + pw / 2.0),
        num(H - 12.0),
        esc(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        num(TOP + ph / 2.0),
        num(TOP + ph / 2.0),
        esc(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y))))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("pair");
            let _ = write!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let ly = TOP + 14.0 * k as f64 + 6.0;
        let _ = write!(
            out,
            r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            num(W - RIGHT + 10.0),
            num(W - RIGHT + 28.0),
            num(W - RIGHT + 32.0),
            num(ly + 4.0),
            esc(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Blue for negative, white at 0, red for positive, scaled by the largest magnitude.
pub fn diverging_color(v: f64, scale: f64) -> String {
    let t = if scale > 0.0 && v.is_finite() { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (fade(178.0), fade(24.0), fade(43.0))
    } else {
        (fade(33.0), fade(102.0), fade(172.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Square grid, rows and columns labelled, with the value printed in each cell.
pub fn heatmap(title: &str, row_label: &str, col_label: &str, labels: &[String], values: &[Vec<f64>]) -> String {
    let n = labels.len().max(1);
    let side = (H - TOP - BOTTOM).min(W - LEFT - RIGHT);
    let cell = side / n as f64;
    let scale = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = String::new();
    header(&mut out, title);
    for (a, row) in values.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            let x = LEFT + b as f64 * cell;
            let y = TOP + a as f64 * cell;
            let _ = write!(
                out,
                r##"<rect x="{}" y="{}" width="{c}" height="{c}" fill="{}" stroke="#fff"/>"##,
                num(x),
                num(y),
                diverging_color(v, scale),
                c = num(cell),
            );
            if n <= 16 {
                let _ = write!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
                    num(x + cell / 2.0),
                    num(y + cell / 2.0 + 3.0),
                    tick(v)
                );
            }
        }
    }
    for (k, l) in labels.iter().enumerate() {
        let c = k as f64 * cell + cell / 2.0;
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT - 6.0),
            num(TOP + c + 4.0),
            esc(l),
            num(LEFT + c),
            num(TOP + side + 16.0),
            esc(l)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        num(LEFT + side / 2.0),
        num(H - 12.0),
        esc(col_label)
    );
    let _ = write!(
        out,
        r#"<text x="16" y="{m}" text-anchor="middle" transform="rotate(-90 16 {m})">{}</text>"#,
        esc(row_label),
        m = num(TOP + side / 2.0)
    );
    let lx = LEFT + side + 30.0;
    for i in 0..=10 {
        let v = scale * (1.0 - i as f64 / 5.0);
        let _ = write!(
            out,
            r#"<rect x="{}" y="{}" width="16" height="{}" fill="{}"/>"#,
            num(lx),
            num(TOP + i as f64 * side / 11.0),
            num(side / 11.0),
            diverging_color(v, scale)
        );
        if i % 5 == 0 {
            let _ = write!(
                out,
                r#"<text x="{}" y="{}">{}</text>"#,
                num(lx + 20.0),
                num(TOP + i as f64 * side / 11.0 + side / 22.0 + 4.0),
                tick(v)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_centred_at_zero() {
        assert_eq!(diverging_color(0.0, 1.0), "#ffffff");
        assert_eq!(diverging_color(1.0, 1.0), "#b2182b");
        assert_eq!(diverging_color(-2.0, 1.0), "#2166ac");
        assert_eq!(diverging_color(0.3, 0.0), "#ffffff");
    }

    #[test]
    fn figures_are_well_formed_and_deterministic() {
        let s = vec![Series {
            name: "a<b".into(),
            points: vec![(1.0, 0.5), (2.0, f64::NAN), (3.0, 0.7)],
        }];
        let a = line_plot("t", "x", "y", &s);
        assert_eq!(a, line_plot("t", "x", "y", &s));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("a&lt;b"));
        assert_eq!(a.matches("<circle").count(), 2);
        let h = heatmap("f", "pt", "ft", &["1".into(), "2".into()], &[vec![0.0, 0.2], vec![-0.1, 0.0]]);
        assert_eq!(h.matches("#ffffff").count(), 2 + 1);
    }
}
