//! Minimal fixed-size SVG writer for the report plots.

use std::fmt::Write;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 70.0;

/// Maps data coordinates onto the plot area, optionally on log10 axes.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub log_x: bool,
    pub log_y: bool,
    /// Keep one data unit the same length on both axes.
    pub equal_aspect: bool,
}

impl Frame {
    pub fn linear(x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            x: widen(x),
            y: widen(y),
            log_x: false,
            log_y: false,
            equal_aspect: false,
        }
    }

    fn axis(v: f64, (lo, hi): (f64, f64), log: bool) -> f64 {
        if log {
            (v.log10() - lo.log10()) / (hi.log10() - lo.log10())
        } else {
            (v - lo) / (hi - lo)
        }
    }

    fn scale(&self) -> (f64, f64, f64, f64) {
        let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        if !self.equal_aspect {
            return (w, h, 0.0, 0.0);
        }
        let s = (w / (self.x.1 - self.x.0)).min(h / (self.y.1 - self.y.0));
        let (ww, hh) = (s * (self.x.1 - self.x.0), s * (self.y.1 - self.y.0));
        (ww, hh, (w - ww) / 2.0, (h - hh) / 2.0)
    }

    pub fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h, ox, oy) = self.scale();
        (
            MARGIN + ox + w * Self::axis(x, self.x, self.log_x),
            HEIGHT - MARGIN - oy - h * Self::axis(y, self.y, self.log_y),
        )
    }

    /// Length of `d` data units on the x axis, in pixels. Linear frames only.
    pub fn len(&self, d: f64) -> f64 {
        let (w, _, _, _) = self.scale();
        w * d / (self.x.1 - self.x.0)
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Compact, deterministic number formatting for coordinates.
pub fn n(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

pub struct Doc {
    body: String,
}

impl Doc {
    pub fn new(id: &str, title: &str) -> Self {
        let mut body = String::new();
        writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" id="{}" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#,
            escape(id)
        )
        .unwrap();
        writeln!(body, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
        writeln!(
            body,
            r#"<text id="title" x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="18">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        )
        .unwrap();
        Self { body }
    }

    pub fn raw(&mut self, s: &str) {
        self.body.push_str(s);
        self.body.push('\n');
    }

    /// Axis lines with labels and min/max tick values.
    pub fn axes(&mut self, f: &Frame, x_label: &str, y_label: &str) {
        let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
        let (x1, y1) = (WIDTH - MARGIN, MARGIN);
        self.raw(&format!(
            r#"<g id="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
        ));
        let t = |x: f64, y: f64, anchor: &str, s: &str| {
            format!(r#"<text x="{}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="12">{}</text>"#, n(x), n(y), escape(s))
        };
        let mut g = String::from(r#"<g id="labels">"#);
        g += &t(WIDTH / 2.0, HEIGHT - 20.0, "middle", x_label);
        g += &t(20.0, HEIGHT / 2.0, "middle", y_label);
        g += &t(x0, y0 + 18.0, "start", &fmt_tick(f.x.0));
        g += &t(x1, y0 + 18.0, "end", &fmt_tick(f.x.1));
        g += &t(x0 - 6.0, y0, "end", &fmt_tick(f.y.0));
        g += &t(x0 - 6.0, y1 + 4.0, "end", &fmt_tick(f.y.1));
        g += "</g>";
        self.raw(&g);
    }

    pub fn polyline(&mut self, id: &str, f: &Frame, pts: &[(f64, f64)], stroke: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (a, b) = f.px(x, y);
                format!("{},{}", n(a), n(b))
            })
            .collect();
        self.raw(&format!(
            r#"<polyline id="{}" fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#,
            escape(id),
            coords.join(" ")
        ));
    }

    pub fn marker(&mut self, id: &str, f: &Frame, x: f64, y: f64, fill: &str) {
        let (a, b) = f.px(x, y);
        self.raw(&format!(
            r#"<rect id="{}" x="{}" y="{}" width="6" height="6" fill="{fill}"/>"#,
            escape(id),
            n(a - 3.0),
            n(b - 3.0)
        ));
    }

    pub fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        n(v)
    }
}
