//! Minimal SVG output: line charts and a filled grid with a zero contour.
//! CSV stays the source of truth; these are for eyeballing only.

use std::fmt::Write as _;

use singcbf_core::sim::{EpisodeLog, TrajectorySpec};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#555555"];

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dashed: bool,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

fn header(s: &mut String, title: &str) {
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title)).unwrap();
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (PAD, W - PAD / 2.0, PAD / 1.5, H - PAD);
    writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t).unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let px = l + f * (r - l);
        let py = b - f * (b - t);
        writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, b + 14.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, py + 4.0, tick(yv)).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 10.0, escape(xlabel)).unwrap();
    writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">{}</text>"#, (t + b) / 2.0, (t + b) / 2.0, escape(ylabel)).unwrap();
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn map(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series<'_>]) -> String {
    let xr = range(series.iter().flat_map(|s| s.x.iter().copied()));
    let yr = range(series.iter().flat_map(|s| s.y.iter().copied()));
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, xr, yr, xlabel, ylabel);
    if yr.0 < 0.0 && yr.1 > 0.0 {
        let py = map(0.0, yr, H - PAD, PAD / 1.5);
        writeln!(s, r##"<line x1="{PAD}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#999" stroke-width="0.5"/>"##, W - PAD / 2.0).unwrap();
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let step = (ser.x.len() / 2000).max(1);
        let pts: Vec<String> = ser
            .x
            .iter()
            .zip(ser.y)
            .step_by(step)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", map(*x, xr, PAD, W - PAD / 2.0), map(*y, yr, H - PAD, PAD / 1.5)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#, PAD + 8.0, PAD / 1.5 + 14.0 * (i + 1) as f64, escape(ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Filled cells coloured by value, with the zero level traced by marching
/// squares over the cell centres.
pub fn contour(title: &str, xs: &[f64], ys: &[f64], value: impl Fn(usize, usize) -> Option<f64>, xlabel: &str, ylabel: &str) -> String {
    let (nx, ny) = (xs.len(), ys.len());
    let vals: Vec<Option<f64>> = (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).map(|(i, j)| value(i, j)).collect();
    let at = |i: usize, j: usize| vals[i * ny + j];
    let vr = range(vals.iter().flatten().copied());
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, (0.0, nx as f64), (0.0, ny as f64), xlabel, ylabel);
    let (l, r, t, b) = (PAD, W - PAD / 2.0, PAD / 1.5, H - PAD);
    let cw = (r - l) / nx as f64;
    let ch = (b - t) / ny as f64;
    for i in 0..nx {
        for j in 0..ny {
            let fill = match at(i, j) {
                Some(v) => {
                    let f = ((v - vr.0) / (vr.1 - vr.0)).clamp(0.0, 1.0);
                    format!("rgb({},{},{})", (255.0 * (1.0 - f)) as u8, (120.0 + 100.0 * f) as u8, (255.0 * f) as u8)
                }
                None => "#cccccc".into(),
            };
            writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}"/>"#, l + i as f64 * cw, b - (j + 1) as f64 * ch).unwrap();
            if let Some(v) = at(i, j) {
                writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#, l + (i as f64 + 0.5) * cw, b - (j as f64 + 0.5) * ch + 3.0, tick(v)).unwrap();
            }
        }
    }
    let centre = |i: f64, j: f64| (l + (i + 0.5) * cw, b - (j + 0.5) * ch);
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let Some(v): Option<Vec<f64>> = corners.iter().map(|&(a, c)| at(a, c)).collect() else { continue };
            let mut crossings = Vec::new();
            for k in 0..4 {
                let (a, c) = (v[k], v[(k + 1) % 4]);
                if (a < 0.0) != (c < 0.0) {
                    let f = a / (a - c);
                    let (p, q) = (corners[k], corners[(k + 1) % 4]);
                    crossings.push(centre(p.0 as f64 + f * (q.0 as f64 - p.0 as f64), p.1 as f64 + f * (q.1 as f64 - p.1 as f64)));
                }
            }
            for pair in crossings.chunks(2).filter(|c| c.len() == 2) {
                writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#, pair[0].0, pair[0].1, pair[1].0, pair[1].1).unwrap();
            }
        }
    }
    for (i, x) in xs.iter().enumerate() {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#, l + (i as f64 + 0.5) * cw, b + 26.0, tick(*x)).unwrap();
    }
    for (j, y) in ys.iter().enumerate() {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="9">{}</text>"#, r + 2.0, b - (j as f64 + 0.5) * ch, tick(*y)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// `q` against its reference, `z(t)`, `h(t)` and `u(t)` for one episode.
pub fn episode_plots(log: &EpisodeLog, reference: &TrajectorySpec) -> Vec<(&'static str, String)> {
    let t: Vec<f64> = log.rows.iter().map(|r| r.t).collect();
    let col = |f: &dyn Fn(&singcbf_core::sim::EpisodeRow) -> f64| log.rows.iter().map(f).collect::<Vec<f64>>();
    let n = log.dof;
    let q: Vec<Vec<f64>> = (0..n).map(|i| col(&|r| r.q[i])).collect();
    let qr: Vec<Vec<f64>> = (0..n).map(|i| t.iter().map(|&tt| reference.at(tt).0[i]).collect()).collect();
    let u: Vec<Vec<f64>> = (0..n).map(|i| col(&|r| r.u[i])).collect();
    let un: Vec<Vec<f64>> = (0..n).map(|i| col(&|r| r.u_nom[i])).collect();
    let labels: Vec<(String, String, String, String)> =
        (1..=n).map(|i| (format!("q{i}"), format!("q{i} ref"), format!("u{i}"), format!("unom{i}"))).collect();

    let mut qs = Vec::new();
    let mut us = Vec::new();
    for i in 0..n {
        qs.push(Series { label: &labels[i].0, x: &t, y: &q[i], dashed: false });
        qs.push(Series { label: &labels[i].1, x: &t, y: &qr[i], dashed: true });
        us.push(Series { label: &labels[i].2, x: &t, y: &u[i], dashed: false });
        us.push(Series { label: &labels[i].3, x: &t, y: &un[i], dashed: true });
    }
    let z = col(&|r| r.z);
    let h = col(&|r| r.h);
    vec![
        ("q.svg", line_chart("joint positions", "t [s]", "q [rad]", &qs)),
        ("z.svg", line_chart("singularity measure z(q)", "t [s]", "z", &[Series { label: "z", x: &t, y: &z, dashed: false }])),
        ("h.svg", line_chart("barrier h(x)", "t [s]", "h", &[Series { label: "h", x: &t, y: &h, dashed: false }])),
        ("u.svg", line_chart("torques", "t [s]", "u [N m]", &us)),
    ]
}
