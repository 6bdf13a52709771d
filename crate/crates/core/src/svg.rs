//! Self-contained SVG line charts of evaluation curves.
//!
//! Output depends only on the curves and options: no timestamps, no random
//! ids, fixed number formatting.

use std::fmt::Write;

use crate::evalshift::EvalCurve;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum YScale {
    Linear,
    /// Base-10 log; values below `floor` are drawn at `floor`.
    Log { floor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartOptions {
    pub title: String,
    pub y_scale: YScale,
}

impl ChartOptions {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            y_scale: YScale::Log { floor: 1e-3 },
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    floor: f64,
}

impl Axis {
    fn value(&self, v: f64) -> f64 {
        if self.log {
            v.max(self.floor).log10()
        } else {
            v
        }
    }

    fn frac(&self, v: f64) -> f64 {
        let t = self.value(v);
        if self.hi > self.lo {
            ((t - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.floor() as i32, self.hi.ceil() as i32);
            (a..=b).map(|e| (e as f64, format!("1e{e}"))).collect()
        } else {
            let step = nice_step((self.hi - self.lo) / 5.0);
            let first = (self.lo / step).ceil() as i64;
            let last = (self.hi / step).floor() as i64;
            (first..=last).map(|i| (i as f64 * step, format!("{}", round_label(i as f64 * step)))).collect()
        }
    }
}

fn nice_step(raw: f64) -> f64 {
    if !(raw > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn round_label(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn y_axis(curves: &[EvalCurve], scale: YScale) -> Axis {
    let (log, floor) = match scale {
        YScale::Linear => (false, f64::NEG_INFINITY),
        YScale::Log { floor } => (true, floor),
    };
    let mut axis = Axis {
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
        log,
        floor,
    };
    for c in curves {
        for (m, s) in c.mse_mean.iter().zip(&c.mse_stderr) {
            for v in [m - s, m + s] {
                if v.is_finite() {
                    let t = axis.value(v);
                    axis.lo = axis.lo.min(t);
                    axis.hi = axis.hi.max(t);
                }
            }
        }
    }
    if !axis.lo.is_finite() {
        axis.lo = 0.0;
        axis.hi = 1.0;
    }
    if log {
        axis.lo = axis.lo.floor();
        axis.hi = axis.hi.ceil().max(axis.lo + 1.0);
    } else {
        axis.lo = axis.lo.min(0.0);
        if axis.hi <= axis.lo {
            axis.hi = axis.lo + 1.0;
        }
    }
    axis
}

/// Renders one panel: `j` on the x-axis, `mse_mean` per predictor with a
/// shaded ±1 standard-error band.
pub fn render_chart(curves: &[EvalCurve], options: &ChartOptions) -> String {
    let k = curves.iter().map(EvalCurve::k).max().unwrap_or(1).max(1);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let ya = y_axis(curves, options.y_scale);
    let px = |j: usize| LEFT + if k > 1 { (j - 1) as f64 / (k - 1) as f64 * pw } else { pw / 2.0 };
    let py = |v: f64| TOP + (1.0 - ya.frac(v)) * ph;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" style="font-family:sans-serif;font-size:12px">"#
    )
    .unwrap();
    writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" style="fill:#ffffff"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="22" style="font-size:14px;text-anchor:middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&options.title)
    )
    .unwrap();

    // grid and ticks
    for (t, label) in ya.ticks() {
        let y = TOP + (1.0 - if ya.hi > ya.lo { (t - ya.lo) / (ya.hi - ya.lo) } else { 0.5 }) * ph;
        writeln!(
            out,
            r#"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" style="stroke:#e0e0e0;stroke-width:1"/>"#,
            LEFT + pw
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" style="text-anchor:end">{label}</text>"#,
            LEFT - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    let x_step = (k as f64 / 10.0).ceil().max(1.0) as usize;
    for j in (1..=k).filter(|j| (j - 1) % x_step == 0 || *j == k) {
        let x = px(j);
        writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" style="text-anchor:middle">{j}</text>"#,
            TOP + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" style="fill:none;stroke:#333333;stroke-width:1"/>"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" style="text-anchor:middle">prefix length j</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    )
    .unwrap();
    let y_label = if ya.log { "MSE (log scale)" } else { "MSE" };
    writeln!(
        out,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" style="text-anchor:middle">{y_label}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    )
    .unwrap();

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let n = c.k();
        if n == 0 {
            continue;
        }
        let mut band = String::new();
        for j in 1..=n {
            let (m, s) = c.at(j);
            write!(band, "{:.2},{:.2} ", px(j), py(m + s)).unwrap();
        }
        for j in (1..=n).rev() {
            let (m, s) = c.at(j);
            write!(band, "{:.2},{:.2} ", px(j), py(m - s)).unwrap();
        }
        writeln!(
            out,
            r#"<polygon points="{}" style="fill:{color};fill-opacity:0.18;stroke:none"/>"#,
            band.trim_end()
        )
        .unwrap();
        let line: Vec<String> = (1..=n).map(|j| format!("{:.2},{:.2}", px(j), py(c.at(j).0))).collect();
        writeln!(
            out,
            r#"<polyline points="{}" style="fill:none;stroke:{color};stroke-width:2"/>"#,
            line.join(" ")
        )
        .unwrap();

        let ly = TOP + 10.0 + i as f64 * 20.0;
        let lx = LEFT + pw + 15.0;
        writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" style="stroke:{color};stroke-width:3"/>"#,
            lx + 20.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.predictor)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
