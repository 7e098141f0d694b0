//! Minimal SVG charts. Every chart written by the CLI has a CSV next to it
//! holding the plotted numbers.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Blue-to-yellow ramp for `u` in `[0, 1]`.
fn ramp(u: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let u = u.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (u.floor() as usize).min(STOPS.len() - 2);
    let f = u - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let _ = writeln!(
            out,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                out,
                r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                y0 + 15.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                py + 4.0,
                fmt_tick(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

pub enum Mark {
    Line,
    Dots,
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT, title);
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (Some(x), Some(y)) = (finite_range(all().map(|p| p.0)), finite_range(all().map(|p| p.1))) else {
        out.push_str("</svg>\n");
        return out;
    };
    let frame = Frame { x, y };
    frame.axes(&mut out, x_label, y_label);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(a, b)| (frame.px(a), frame.py(b)))
            .collect();
        match s.mark {
            Mark::Line => {
                let d: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    d.join(" ")
                );
            }
            Mark::Dots => {
                for (a, b) in pts {
                    let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{b:.2}" r="2.5" fill="{color}"/>"#);
                }
            }
        }
        let ly = TOP + 14.0 * k as f64 + 6.0;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - RIGHT - 130.0,
            ly,
            WIDTH - RIGHT - 115.0,
            ly + 9.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of colored cells; `None` cells are drawn grey.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<Option<f64>>]) -> String {
    let cell_w = (520.0 / col_labels.len().max(1) as f64).clamp(8.0, 60.0);
    let cell_h = (360.0 / row_labels.len().max(1) as f64).clamp(4.0, 24.0);
    let left = 110.0;
    let top = 40.0;
    let width = left + cell_w * col_labels.len() as f64 + 120.0;
    let height = top + cell_h * row_labels.len() as f64 + 90.0;
    let mut out = String::new();
    header(&mut out, width, height, title);
    let range = finite_range(values.iter().flatten().flatten().copied());
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let fill = match (v, range) {
                (Some(v), Some((lo, hi))) if v.is_finite() => ramp((v - lo) / (hi - lo)),
                _ => "#cccccc".to_string(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="{fill}"><title>{}</title></rect>"#,
                left + cell_w * j as f64,
                top + cell_h * i as f64,
                v.map_or("none".to_string(), |v| v.to_string())
            );
        }
    }
    let label_every = (row_labels.len() / 24).max(1);
    for (i, l) in row_labels.iter().enumerate().filter(|(i, _)| i % label_every == 0) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 4.0,
            top + cell_h * (i as f64 + 0.5) + 4.0,
            escape(l)
        );
    }
    let col_every = (col_labels.len() / 20).max(1);
    let base = top + cell_h * row_labels.len() as f64 + 8.0;
    for (j, l) in col_labels.iter().enumerate().filter(|(j, _)| j % col_every == 0) {
        let x = left + cell_w * (j as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{base:.1}" text-anchor="end" transform="rotate(-45 {x:.1} {base:.1})">{}</text>"#,
            escape(l)
        );
    }
    if let Some((lo, hi)) = range {
        let lx = width - 100.0;
        for k in 0..20 {
            let u = k as f64 / 19.0;
            let _ = writeln!(
                out,
                r#"<rect x="{lx:.1}" y="{:.1}" width="14" height="8" fill="{}"/>"#,
                top + 160.0 - 8.0 * k as f64,
                ramp(u)
            );
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 18.0, top + 8.0, fmt_tick(hi));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 18.0, top + 168.0, fmt_tick(lo));
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal bars in the given order; negative values extend left of zero.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let row_h = 22.0;
    let left = 150.0;
    let plot_w = 420.0;
    let height = TOP + row_h * labels.len() as f64 + 30.0;
    let width = left + plot_w + 80.0;
    let mut out = String::new();
    header(&mut out, width, height, title);
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| left + (v - lo) / span * plot_w;
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let y = TOP + row_h * i as f64;
        let (a, b) = (px(0.0).min(px(v)), px(0.0).max(px(v)));
        let fill = if v >= 0.0 { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            out,
            r#"<rect x="{a:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{fill}"/>"#,
            y + 3.0,
            (b - a).max(0.5),
            row_h - 6.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text><text x="{:.1}" y="{:.1}">{}</text>"#,
            left - 6.0,
            y + 15.0,
            escape(l),
            b + 4.0,
            y + 15.0,
            fmt_tick(v)
        );
    }
    let z = px(0.0);
    let _ = writeln!(
        out,
        r#"<line x1="{z:.1}" y1="{TOP}" x2="{z:.1}" y2="{:.1}" stroke="black"/>"#,
        TOP + row_h * labels.len() as f64
    );
    out.push_str("</svg>\n");
    out
}

/// One row of dots per feature: horizontal position is the attribution,
/// color is the feature value scaled within that feature.
pub fn dot_rows(title: &str, labels: &[String], rows: &[Vec<(f64, f64)>]) -> String {
    let row_h = 22.0;
    let left = 150.0;
    let plot_w = 420.0;
    let height = TOP + row_h * labels.len() as f64 + 40.0;
    let width = left + plot_w + 40.0;
    let mut out = String::new();
    header(&mut out, width, height, title);
    let (lo, hi) = finite_range(rows.iter().flatten().map(|p| p.0)).unwrap_or((-1.0, 1.0));
    let px = |v: f64| left + (v - lo) / (hi - lo) * plot_w;
    for (i, (l, pts)) in labels.iter().zip(rows).enumerate() {
        let y = TOP + row_h * i as f64 + row_h / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + 4.0,
            escape(l)
        );
        let (vlo, vhi) = finite_range(pts.iter().map(|p| p.1)).unwrap_or((0.0, 1.0));
        for (k, &(phi, value)) in pts.iter().enumerate() {
            // spread overlapping dots a little so the density shows
            let jitter = ((k * 7919) % 11) as f64 - 5.0;
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                px(phi),
                y + jitter,
                ramp((value - vlo) / (vhi - vlo))
            );
        }
    }
    let z = px(0.0);
    let bottom = TOP + row_h * labels.len() as f64;
    let _ = writeln!(out, r##"<line x1="{z:.1}" y1="{TOP}" x2="{z:.1}" y2="{bottom:.1}" stroke="#888"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">attribution ({} to {})</text>"#,
        left + plot_w / 2.0,
        bottom + 25.0,
        fmt_tick(lo),
        fmt_tick(hi)
    );
    out.push_str("</svg>\n");
    out
}
