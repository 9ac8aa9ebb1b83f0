//! Minimal standalone SVG charts: scatter, line and bar series on linear axes.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Points,
    Line,
    Bars,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub style: Style,
    pub color: &'static str,
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: vec![] }
    }

    pub fn with(mut self, label: &str, x: &[f64], y: &[f64], style: Style, color: &'static str) -> Self {
        self.series.push(Series { label: label.into(), x: x.to_vec(), y: y.to_vec(), style, color });
        self
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts = self.series.iter().flat_map(|s| s.x.iter().zip(&s.y)).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (&x, &y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return None;
        }
        if self.series.iter().any(|s| s.style == Style::Bars) {
            y0 = y0.min(0.0);
        }
        let pad = |a: f64, b: f64| if b > a { (b - a) * 0.05 } else { a.abs().max(1.0) * 0.5 };
        let (px, py) = (pad(x0, x1), pad(y0, y1));
        Some((x0 - px, x1 + px, y0 - py, y1 + py))
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let Some((x0, x1, y0, y1)) = self.bounds() else {
            s.push_str("</svg>\n");
            return s;
        };
        let (pw, ph) = (W - ML - MR, H - MT - MB);
        let sx = |x: f64| ML + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MT + ph - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(s, r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for t in ticks(x0, x1) {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"#,
                sx(t),
                MT + ph,
                MT + ph + 5.0,
                MT + ph + 18.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1) {
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}" stroke="black"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"#,
                ML - 5.0,
                sy(t),
                ML,
                ML - 8.0,
                sy(t) + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ML + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            MT + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, ser) in self.series.iter().enumerate() {
            let pts: Vec<(f64, f64)> = ser
                .x
                .iter()
                .zip(&ser.y)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| (x, y))
                .collect();
            match ser.style {
                Style::Points => {
                    for (x, y) in &pts {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
                            sx(*x),
                            sy(*y),
                            ser.color
                        );
                    }
                }
                Style::Line => {
                    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                        path.join(" "),
                        ser.color
                    );
                }
                Style::Bars => {
                    let width = pts.windows(2).map(|w| (w[1].0 - w[0].0).abs()).fold(f64::INFINITY, f64::min);
                    let bw = if width.is_finite() { width / (x1 - x0) * pw * 0.9 } else { 8.0 };
                    for (x, y) in &pts {
                        let top = sy(y.max(0.0));
                        let h = (sy(0.0) - sy(y.abs())).abs();
                        let _ = writeln!(
                            s,
                            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                            sx(*x) - bw / 2.0,
                            top,
                            bw,
                            h,
                            ser.color
                        );
                    }
                }
            }
            let ly = MT + 14.0 + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                W - MR - 150.0,
                ly - 9.0,
                ser.color,
                W - MR - 135.0,
                ly,
                escape(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_svg())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_all_styles() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let svg = Chart::new("t <1>", "x", "y")
            .with("a", &x, &y, Style::Points, "black")
            .with("b", &x, &y, Style::Line, "red")
            .with("c", &x, &y, Style::Bars, "gray")
            .to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline") && svg.contains("<circle") && svg.contains("t &lt;1&gt;"));
    }

    #[test]
    fn empty_chart_is_valid() {
        let svg = Chart::new("empty", "x", "y").to_svg();
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn tick_values_round() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }
}
