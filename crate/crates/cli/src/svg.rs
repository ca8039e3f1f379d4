//! Dependency-free SVG charts: grouped bars with error whiskers and
//! multi-series lines over a shared categorical axis.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    /// Half-length of the whisker per value; empty for none.
    pub errors: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    y_max: f64,
}

impl Frame {
    fn new(series: &[Series]) -> Self {
        let top = series
            .iter()
            .flat_map(|s| {
                s.values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + s.errors.get(i).copied().unwrap_or(0.0))
            })
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let y_max = if top <= 1.0 { 1.0 } else { top * 1.1 };
        Self { y_max }
    }

    fn y(&self, v: f64) -> f64 {
        let h = H - TOP - BOTTOM;
        TOP + h * (1.0 - (v / self.y_max).clamp(0.0, 1.0))
    }
}

fn open(out: &mut String, title: &str, frame: &Frame, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for k in 0..=4 {
        let v = frame.y_max * k as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#dddddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn x_labels(out: &mut String, labels: &[String], centre: impl Fn(usize) -> f64) {
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            centre(i),
            H - BOTTOM + 16.0,
            escape(l)
        );
    }
}

fn legend(out: &mut String, series: &[Series]) {
    for (k, s) in series.iter().enumerate() {
        let x = LEFT + 140.0 * k as f64;
        let y = H - 22.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 10.0,
            PALETTE[k % PALETTE.len()],
            x + 16.0,
            escape(&s.name)
        );
    }
}

/// Bars grouped by category, one colour per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let frame = Frame::new(series);
    let mut out = String::new();
    open(&mut out, title, &frame, y_label);
    let slot = (W - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (k, s) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x = LEFT + slot * i as f64 + slot * 0.1 + bar * k as f64;
            let y = frame.y(v);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{bar:.1}" height="{:.1}" fill="{colour}"><title>{} {v:.4}</title></rect>"#,
                frame.y(0.0) - y,
                escape(&s.name)
            );
            if let Some(&e) = s.errors.get(i) {
                if e.is_finite() && e > 0.0 {
                    let cx = x + bar / 2.0;
                    let _ = writeln!(
                        out,
                        r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                        frame.y(v - e),
                        frame.y(v + e)
                    );
                }
            }
        }
    }
    x_labels(&mut out, categories, |i| LEFT + slot * (i as f64 + 0.5));
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over evenly spaced categories. Non-finite
/// values break the line.
pub fn line_chart(title: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let frame = Frame::new(series);
    let mut out = String::new();
    open(&mut out, title, &frame, y_label);
    let n = categories.len().max(2) - 1;
    let x = |i: usize| LEFT + (W - LEFT - RIGHT) * i as f64 / n as f64;
    for (k, s) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut segment = Vec::new();
        let flush = |seg: &mut Vec<String>, out: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            seg.clear();
        };
        for (i, &v) in s.values.iter().enumerate() {
            if v.is_finite() {
                segment.push(format!("{:.1},{:.1}", x(i), frame.y(v)));
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"><title>{} {v:.4}</title></circle>"#,
                    x(i),
                    frame.y(v),
                    escape(&s.name)
                );
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
    }
    x_labels(&mut out, categories, x);
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<Series> {
        vec![
            Series {
                name: "mAP".into(),
                values: vec![0.5, f64::NAN, 0.7],
                errors: vec![0.1, 0.0, 0.05],
            },
            Series {
                name: "a<b".into(),
                values: vec![0.2, 0.3, 0.4],
                errors: Vec::new(),
            },
        ]
    }

    #[test]
    fn labels_are_escaped() {
        let cats = vec!["x&y".to_string(), "b".into(), "c".into()];
        let svg = bar_chart("t", "y", &cats, &series());
        assert!(svg.contains("x&amp;y") && svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn gaps_split_lines() {
        let cats = vec!["0".to_string(), "1".into(), "2".into()];
        let svg = line_chart("t", "y", &cats, &series());
        // the first series has no two adjacent finite points
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
