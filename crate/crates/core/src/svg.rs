//! Minimal SVG writer for the report plots. Output is deterministic:
//! fixed float formatting and insertion-order elements.

use std::fmt::Write as _;

pub struct SvgCanvas {
    width: f64,
    height: f64,
    body: String,
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl SvgCanvas {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="{}"/>"#,
            fmt(x1), fmt(y1), fmt(x2), fmt(y2), fmt(width)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{}"/>"#,
            coords.join(" "),
            fmt(width)
        );
    }

    /// Closed filled polygon, used for shaded uncertainty bands.
    pub fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="{}" stroke="none"/>"#,
            coords.join(" "),
            fmt(opacity)
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}"/>"#,
            fmt(cx), fmt(cy), fmt(r)
        );
    }

    /// Ellipse with semi-axes `a`, `b` rotated by `angle_deg`.
    pub fn ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, angle_deg: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<ellipse cx="0" cy="0" rx="{}" ry="{}" transform="translate({} {}) rotate({})" fill="none" stroke="{stroke}" stroke-width="1"/>"#,
            fmt(a), fmt(b), fmt(cx), fmt(cy), fmt(angle_deg)
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="{}" font-family="monospace">{content}</text>"#,
            fmt(x), fmt(y), fmt(size)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            fmt(self.width), fmt(self.height), fmt(self.width), fmt(self.height), self.body
        )
    }
}

/// Maps data coordinates into a pixel rectangle (y axis flipped).
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl Frame {
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = if self.x_max > self.x_min { (x - self.x_min) / (self.x_max - self.x_min) } else { 0.5 };
        let sy = if self.y_max > self.y_min { (y - self.y_min) / (self.y_max - self.y_min) } else { 0.5 };
        (self.left + sx * self.width, self.top + (1.0 - sy) * self.height)
    }

    pub fn scale_x(&self) -> f64 {
        if self.x_max > self.x_min {
            self.width / (self.x_max - self.x_min)
        } else {
            1.0
        }
    }
}
