//! Minimal SVG plots: line charts, scatter plots, histograms and image grids.

use std::fmt::Write as _;

use cyclechaos::data::pixel_to_byte;
use cyclechaos::Tensor;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Self {
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
        let widen = |a: f64, b: f64| {
            if b - a < 1e-12 {
                let d = a.abs().max(1.0) * 0.05;
                (a - d, b + d)
            } else {
                let p = (b - a) * 0.05;
                (a - p, b + p)
            }
        };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn ticks(a: f64, b: f64) -> Vec<f64> {
    let raw = (b - a) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (a / step).ceil() * step;
    let mut out = Vec::new();
    while t <= b + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (bx, by) = (LEFT, H - BOTTOM);
    writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    )
    .unwrap();
    for t in ticks(f.x0, f.x1) {
        let x = f.px(t);
        writeln!(s, r#"<line x1="{x:.2}" y1="{by}" x2="{x:.2}" y2="{}" stroke="black"/>"#, by + 5.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, by + 18.0, fmt_tick(t)).unwrap();
    }
    for t in ticks(f.y0, f.y1) {
        let y = f.py(t);
        writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{bx}" y2="{y:.2}" stroke="black"/>"#, bx - 5.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, bx - 8.0, y + 4.0, fmt_tick(t)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (W + LEFT - RIGHT) / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (H + TOP - BOTTOM) / 2.0,
        (H + TOP - BOTTOM) / 2.0,
        escape(ylabel)
    )
    .unwrap();
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let x = W - RIGHT - 150.0;
        writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[i % PALETTE.len()]).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(n)).unwrap();
    }
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = open(title, xlabel, ylabel, &f);
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        )
        .unwrap();
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

pub fn scatter_plot(title: &str, xlabel: &str, ylabel: &str, groups: &[Series]) -> String {
    let f = Frame::fit(groups.iter().flat_map(|s| s.points.iter()));
    let mut s = open(title, xlabel, ylabel, &f);
    for (i, g) in groups.iter().enumerate() {
        for &(x, y) in g.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{}" fill-opacity="0.6"/>"#,
                f.px(x),
                f.py(y),
                PALETTE[i % PALETTE.len()]
            )
            .unwrap();
        }
    }
    legend(&mut s, &groups.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Bin counts over `[min, max]` of the finite values.
pub fn bin_counts(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    if finite.is_empty() {
        return (0.0, 1.0, counts);
    }
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    for v in finite {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

pub fn histogram(title: &str, xlabel: &str, values: &[f64], bins: usize) -> String {
    let (lo, hi, counts) = bin_counts(values, bins);
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let f = Frame::fit([(lo, 0.0), (hi, top)].iter());
    let mut s = open(title, xlabel, "count", &f);
    let w = (hi - lo) / counts.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let (a, b) = (lo + i as f64 * w, lo + (i + 1) as f64 * w);
        let (x, y) = (f.px(a), f.py(c as f64));
        writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            f.px(b) - x,
            f.py(0.0) - y
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Rows of single-channel images drawn left to right, one rect per pixel.
pub fn image_grid(rows: &[Vec<Tensor>], scale: usize) -> String {
    let (h, w) = rows
        .first()
        .and_then(|r| r.first())
        .map(|t| (t.shape()[0], t.shape()[1]))
        .unwrap_or((0, 0));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2;
    let tw = (w * scale + gap) * cols + gap;
    let th = (h * scale + gap) * rows.len() + gap;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" shape-rendering="crispEdges">"#).unwrap();
    writeln!(s, r##"<rect width="{tw}" height="{th}" fill="#808080"/>"##).unwrap();
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let ox = gap + c * (w * scale + gap);
            let oy = gap + r * (h * scale + gap);
            let ch = img.shape()[2];
            for i in 0..h {
                for j in 0..w {
                    let v = pixel_to_byte(img.data()[(i * w + j) * ch]);
                    writeln!(
                        s,
                        r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({v},{v},{v})"/>"#,
                        ox + j * scale,
                        oy + i * scale
                    )
                    .unwrap();
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
