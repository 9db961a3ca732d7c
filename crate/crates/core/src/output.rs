//! Artifact formatting: RFC-4180 CSV with 17 significant digits, static SVG
//! line plots, and SHA-256 digests.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::diminishing::WindowMetricProfile;
use crate::simulate::Trajectory;

/// 17 significant digits, `.` decimal separator.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory csv writer")
}

/// Columns `t, x_1..x_k, u_1..u_m, norm`.
pub fn trajectory_csv(tr: &Trajectory) -> Vec<u8> {
    let k = tr.dim();
    let m = tr.inputs.as_ref().and_then(|u| u.first()).map_or(0, Vec::len);
    let mut w = writer();
    let mut header = vec!["t".to_string()];
    header.extend((1..=k).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|j| format!("u_{j}")));
    header.push("norm".into());
    w.write_record(&header).expect("csv");
    for (i, t) in tr.times.iter().enumerate() {
        let mut row = vec![fmt_num(*t)];
        row.extend(tr.states[i].iter().map(|v| fmt_num(*v)));
        if let Some(u) = &tr.inputs {
            row.extend(u[i].iter().map(|v| fmt_num(*v)));
        }
        row.push(fmt_num(tr.norms[i]));
        w.write_record(&row).expect("csv");
    }
    finish(w)
}

/// Columns `t, value, bound`; `bound` is empty when the signal has none.
pub fn profile_csv(p: &WindowMetricProfile) -> Vec<u8> {
    let mut w = writer();
    w.write_record(["t", "value", "bound"]).expect("csv");
    for (i, t) in p.t_grid.iter().enumerate() {
        let bound = p.bounds.as_ref().map_or(String::new(), |b| fmt_num(b[i]));
        w.write_record([fmt_num(*t), fmt_num(p.values[i]), bound]).expect("csv");
    }
    finish(w)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct Series<'a> {
    pub name: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b"];
const MAX_POINTS: usize = 4000;

/// Static line plot. With `log_y`, nonpositive values are dropped.
pub fn line_plot(title: &str, x_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 70.0, 150.0, 36.0, 46.0);
    let map_y = |y: f64| if log_y { y.log10() } else { y };
    let keep = |y: f64| y.is_finite() && (!log_y || y > 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (x, y) in s.xs.iter().zip(s.ys) {
            if x.is_finite() && keep(*y) {
                x0 = x0.min(*x);
                x1 = x1.max(*x);
                y0 = y0.min(map_y(*y));
                y1 = y1.max(map_y(*y));
            }
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (map_y(y) - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(out, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let px = left + f * pw;
        let py = top + (1.0 - f) * ph;
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
        let _ = writeln!(out, r##"<line x1="{px:.1}" y1="{top}" x2="{px:.1}" y2="{:.1}" stroke="#ddd"/>"##, top + ph);
        let _ = writeln!(out, r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, top + ph + 16.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylab}</text>"#, left - 6.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 8.0, escape(x_label));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let stride = s.xs.len().div_ceil(MAX_POINTS).max(1);
        let mut pts = String::new();
        for (i, (x, y)) in s.xs.iter().zip(s.ys).enumerate() {
            if (i % stride == 0 || i + 1 == s.xs.len()) && x.is_finite() && keep(*y) {
                let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
        }
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{}"/>"#, pts.trim_end());
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(s.name));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Components and norm of a trajectory against time.
pub fn trajectory_svg(title: &str, tr: &Trajectory) -> String {
    let cols: Vec<Vec<f64>> = (0..tr.dim()).map(|i| tr.states.iter().map(|s| s[i]).collect()).collect();
    let names: Vec<String> = (1..=tr.dim()).map(|i| format!("x_{i}")).collect();
    let mut series: Vec<Series> = cols.iter().zip(&names).map(|(c, n)| Series { name: n, xs: &tr.times, ys: c }).collect();
    series.push(Series { name: "norm", xs: &tr.times, ys: &tr.norms });
    line_plot(title, "t", &series, false)
}

/// Profile values and bound on a log axis.
pub fn profile_svg(p: &WindowMetricProfile) -> String {
    let mut series = vec![Series { name: "value", xs: &p.t_grid, ys: &p.values }];
    if let Some(b) = &p.bounds {
        series.push(Series { name: "bound", xs: &p.t_grid, ys: b });
    }
    line_plot(&format!("window metric of {}", p.signal), "t", &series, true)
}
