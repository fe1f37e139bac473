//! Minimal deterministic SVG charts.

use std::fmt::Write;

use crate::diagnostics::SnapshotRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub color: &'static str,
    /// Points joined by the line, sorted by x.
    pub line: Vec<(f64, f64)>,
    /// Individual observations drawn as faint dots.
    pub scatter: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct LineChart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_ticks: &'a [f64],
    pub y_range: (f64, f64),
    pub series: &'a [Series],
}

impl LineChart<'_> {
    pub fn render(&self) -> String {
        let (x0, x1) = match (self.x_ticks.first(), self.x_ticks.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            (Some(&a), _) => (a - 1.0, a + 1.0),
            _ => (0.0, 1.0),
        };
        let (y0, y1) = if self.y_range.1 > self.y_range.0 { self.y_range } else { (self.y_range.0, self.y_range.0 + 1.0) };
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y.clamp(y0, y1) - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(self.title));
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i as f64 / 4.0;
            let py = sy(y);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                py + 4.0
            );
        }
        for &x in self.x_ticks {
            let px = sx(x);
            let _ = writeln!(
                s,
                r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
                TOP + ph + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 14.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            for &(x, y) in &series.scatter {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="0.35"/>"#,
                    sx(x),
                    sy(y),
                    series.color
                );
            }
            let points: Vec<String> = series.line.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                points.join(" "),
                series.color
            );
            if !series.dashed {
                for &(x, y) in &series.line {
                    let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"/>"#, sx(x), sy(y), series.color);
                }
            }
            let ly = TOP + 12.0 + 20.0 * k as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 20.0,
                series.color,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// `#rrggbb` on the white → dark blue ramp; 0 is white, 1 is full fill.
pub fn intensity_color(a: f64) -> String {
    let a = if a.is_finite() { a.clamp(0.0, 1.0) } else { 0.0 };
    let ramp = |full: f64| (255.0 + (full - 255.0) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ramp(8.0), ramp(48.0), ramp(107.0))
}

const CELL: f64 = 22.0;
const RADIUS: f64 = 9.0;
const LABEL: f64 = 110.0;

/// One circle per capsule, one row per layer, fill intensity = average activation.
pub fn capsule_grid(title: &str, snapshot: &SnapshotRecord, threshold: f64) -> String {
    let layers: Vec<Vec<f64>> = (0..snapshot.n_layers()).map(|l| snapshot.layer(l)).collect();
    let kinds: Vec<&str> = (0..layers.len())
        .map(|l| snapshot.rows.iter().find(|r| r.layer == l).map_or("", |r| r.kind.name()))
        .collect();
    let widest = layers.iter().map(Vec::len).max().unwrap_or(0) as f64;
    let width = LABEL + widest * CELL + 20.0;
    let height = 50.0 + layers.len() as f64 * CELL + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="13">{}</text>"#, escape(title));
    for (l, (means, kind)) in layers.iter().zip(&kinds).enumerate() {
        let cy = 50.0 + l as f64 * CELL;
        let _ = writeln!(s, r#"<text x="10" y="{:.1}">L{l} {kind}</text>"#, cy + 4.0);
        for (i, &a) in means.iter().enumerate() {
            let cx = LABEL + i as f64 * CELL + CELL / 2.0;
            let stroke = if a <= threshold { "#d62728" } else { "#555555" };
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="{RADIUS}" fill="{}" stroke="{stroke}"><title>L{l} c{i} A={a:.6}</title></circle>"#,
                intensity_color(a)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="{:.1}">fill = mean activation (white 0, blue 1); red outline = dead (A &lt;= {threshold})</text>"#,
        height - 10.0
    );
    s.push_str("</svg>\n");
    s
}
