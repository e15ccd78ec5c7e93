//! Hand-emitted SVG: polylines, circles, and text over a data-space viewport.
//! No plotting stack; the output is small and diffable.

use std::fmt::Write;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 48.0;

/// Maps data coordinates into the plot viewport.
pub struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        let pad = |lo: f64, hi: f64| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        let (x_min, x_max) = pad(x_min, x_max);
        let (y_min, y_max) = pad(y_min, y_max);
        Frame { x_min, x_max, y_min, y_max }
    }

    pub fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    pub fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

pub struct Svg {
    body: String,
}

impl Svg {
    pub fn new() -> Self {
        let mut body = String::new();
        writeln!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        )
        .unwrap();
        writeln!(body, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
        Svg { body }
    }

    pub fn axes(&mut self, frame: &Frame, x_label: &str, y_label: &str) {
        let x0 = frame.x(frame.x_min);
        let x1 = frame.x(frame.x_max);
        let y0 = frame.y(frame.y_min);
        let y1 = frame.y(frame.y_max);
        self.line(x0, y0, x1, y0, "#333", 1.0, false);
        self.line(x0, y0, x0, y1, "#333", 1.0, false);
        for i in 0..=4 {
            let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
            let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
            self.text(frame.x(fx), y0 + 16.0, &trim_number(fx), "middle", 11);
            self.text(x0 - 6.0, frame.y(fy) + 4.0, &trim_number(fy), "end", 11);
        }
        self.text((x0 + x1) / 2.0, HEIGHT - 10.0, x_label, "middle", 12);
        writeln!(
            self.body,
            "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\" font-family=\"sans-serif\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        )
        .unwrap();
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: &str, width: f64) {
        let mut attr = String::new();
        for (x, y) in points {
            write!(attr, "{x:.2},{y:.2} ").unwrap();
        }
        writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>",
            attr.trim_end()
        )
        .unwrap();
    }

    #[allow(clippy::too_many_arguments)]
    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &str, width: f64, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        writeln!(
            self.body,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>"
        )
        .unwrap();
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, stroke: &str) {
        writeln!(
            self.body,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"{fill}\" stroke=\"{stroke}\"/>"
        )
        .unwrap();
    }

    pub fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str, size: u32) {
        writeln!(
            self.body,
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"{size}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\">{}</text>",
            escape(s)
        )
        .unwrap();
    }

    pub fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn trim_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}
