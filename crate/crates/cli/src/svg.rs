//! Minimal deterministic SVG writer.

use std::fmt::Write as _;

pub const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, stroke: &str, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" stroke="{stroke}" fill="{fill}"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width:.2}"/>"#
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dashed: bool, clip: Option<&str>) {
        if pts.is_empty() {
            return;
        }
        let mut p = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                p.push(' ');
            }
            let _ = write!(p, "{x:.2},{y:.2}");
        }
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let clip = clip.map(|c| format!(r#" clip-path="url(#{c})""#)).unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="{width:.2}"{dash}{clip}/>"#
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}"/>"#);
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size:.1}" font-family="sans-serif" text-anchor="{anchor}">{s}</text>"#
        );
    }

    pub fn clip_rect(&mut self, id: &str, x: f64, y: f64, w: f64, h: f64) {
        let _ = writeln!(
            self.body,
            r#"<clipPath id="{id}"><rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}"/></clipPath>"#
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Maps data coordinates onto a pixel box, y pointing up.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub xr: (f64, f64),
    pub yr: (f64, f64),
}

impl Frame {
    pub fn map(&self, px: f64, py: f64) -> (f64, f64) {
        let sx = (px - self.xr.0) / (self.xr.1 - self.xr.0);
        let sy = (py - self.yr.0) / (self.yr.1 - self.yr.0);
        (self.x + sx * self.w, self.y + self.h - sy * self.h)
    }

    pub fn axes(&self, svg: &mut Svg, xlabel: &str, ylabel: &str) {
        svg.rect(self.x, self.y, self.w, self.h, "#444", "none");
        let fmt = |v: f64| format!("{v:.3}");
        svg.text(self.x, self.y + self.h + 14.0, 10.0, "start", &fmt(self.xr.0));
        svg.text(self.x + self.w, self.y + self.h + 14.0, 10.0, "end", &fmt(self.xr.1));
        svg.text(self.x - 4.0, self.y + self.h, 10.0, "end", &fmt(self.yr.0));
        svg.text(self.x - 4.0, self.y + 10.0, 10.0, "end", &fmt(self.yr.1));
        svg.text(self.x + self.w / 2.0, self.y + self.h + 28.0, 11.0, "middle", xlabel);
        svg.text(self.x - 30.0, self.y + self.h / 2.0, 11.0, "middle", ylabel);
    }
}

/// Range of finite values, padded by `pad` of its width on each side.
pub fn padded_range(values: impl IntoIterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.into_iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - pad * span, hi + pad * span)
}
