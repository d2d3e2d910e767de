//! Minimal SVG plot writer for the experiment reports.
//!
//! Deliberately tiny: line plots with markers and a legend, and labeled bar
//! charts, both emitted as standalone SVG strings. CSV result tables are the
//! canonical artifact; these figures are derived views, so the writer favors
//! predictable deterministic output over styling knobs.

/// One named curve of a line plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

/// Qualitative palette, reused cyclically across series/bars.
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Compact tick label: fixed precision with trailing zeros trimmed.
fn tick_label(v: f64) -> String {
    let mut s = format!("{v:.3}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// Padded data range; degenerate spans widen so the mapping stays finite.
fn padded(min: f64, max: f64) -> (f64, f64) {
    if max > min {
        (min, max)
    } else {
        let pad = if min == 0.0 { 1.0 } else { min.abs() * 0.1 };
        (min - pad, max + pad)
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN_LEFT + (v - self.x_min) / (self.x_max - self.x_min)
            * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        // SVG y grows downward; data y grows upward.
        HEIGHT
            - MARGIN_BOTTOM
            - (v - self.y_min) / (self.y_max - self.y_min)
                * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{t}</text>\n",
        ),
        w = WIDTH,
        h = HEIGHT,
        cx = WIDTH / 2.0,
        t = esc(title),
    )
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    use std::fmt::Write;
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = frame.x_min + f * (frame.x_max - frame.x_min);
        let yv = frame.y_min + f * (frame.y_max - frame.y_min);
        let xp = frame.x(xv);
        let yp = frame.y(yv);
        let _ = write!(
            out,
            concat!(
                "<line x1=\"{xp:.2}\" y1=\"{y0}\" x2=\"{xp:.2}\" y2=\"{y1}\" ",
                "stroke=\"#dddddd\" stroke-dasharray=\"3 3\"/>\n",
                "<line x1=\"{x0}\" y1=\"{yp:.2}\" x2=\"{x1}\" y2=\"{yp:.2}\" ",
                "stroke=\"#dddddd\" stroke-dasharray=\"3 3\"/>\n",
                "<text x=\"{xp:.2}\" y=\"{xt}\" text-anchor=\"middle\">{xl}</text>\n",
                "<text x=\"{yt}\" y=\"{ypt:.2}\" text-anchor=\"end\">{yl}</text>\n",
            ),
            xp = xp,
            yp = yp,
            ypt = yp + 4.0,
            x0 = x0,
            x1 = x1,
            y0 = y0,
            y1 = y1,
            xt = y0 + 16.0,
            yt = x0 - 6.0,
            xl = tick_label(xv),
            yl = tick_label(yv),
        );
    }
    let _ = write!(
        out,
        concat!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{bx}\" text-anchor=\"middle\">{xlab}</text>\n",
            "<text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" ",
            "transform=\"rotate(-90 14 {cy})\">{ylab}</text>\n",
        ),
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
        cx = (x0 + x1) / 2.0,
        cy = (y0 + y1) / 2.0,
        bx = HEIGHT - 12.0,
        xlab = esc(x_label),
        ylab = esc(y_label),
    );
}

/// Renders one line per series with point markers and a legend.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    use std::fmt::Write;
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let mut out = header(title);
    if points.is_empty() {
        out.push_str("<text x=\"320\" y=\"210\" text-anchor=\"middle\">no data</text>\n</svg>\n");
        return out;
    }
    let fold = |init: (f64, f64), pick: fn(&(f64, f64)) -> f64| {
        points.iter().fold(init, |(lo, hi), p| (lo.min(pick(p)), hi.max(pick(p))))
    };
    let (x_min, x_max) = padded(fold((f64::INFINITY, f64::NEG_INFINITY), |p| p.0).0,
        fold((f64::INFINITY, f64::NEG_INFINITY), |p| p.0).1);
    let (y_min, y_max) = padded(fold((f64::INFINITY, f64::NEG_INFINITY), |p| p.1).0,
        fold((f64::INFINITY, f64::NEG_INFINITY), |p| p.1).1);
    let frame = Frame { x_min, x_max, y_min, y_max };
    axes(&mut out, &frame, x_label, y_label);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
        );
        for &(x, y) in &s.points {
            let _ = write!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                frame.x(x),
                frame.y(y),
            );
        }
        // Legend entry, top-right, one row per series.
        let ly = MARGIN_TOP + 8.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT - 130.0;
        let _ = write!(
            out,
            concat!(
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{lx2}\" y2=\"{ly}\" ",
                "stroke=\"{color}\" stroke-width=\"2\"/>\n",
                "<text x=\"{tx}\" y=\"{ty}\">{label}</text>\n",
            ),
            lx = lx,
            lx2 = lx + 22.0,
            ly = ly,
            color = color,
            tx = lx + 28.0,
            ty = ly + 4.0,
            label = esc(&s.label),
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Renders labeled vertical bars with the value printed above each bar.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    use std::fmt::Write;
    let mut out = header(title);
    if bars.is_empty() {
        out.push_str("<text x=\"320\" y=\"210\" text-anchor=\"middle\">no data</text>\n</svg>\n");
        return out;
    }
    let hi = bars.iter().fold(f64::NEG_INFINITY, |h, b| h.max(b.1));
    let lo = bars.iter().fold(0.0f64, |l, b| l.min(b.1));
    let (y_min, y_max) = padded(lo, hi);
    let frame = Frame { x_min: 0.0, x_max: 1.0, y_min, y_max };
    axes(&mut out, &frame, "", y_label);

    let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let slot = span / bars.len() as f64;
    let bar_w = slot * 0.6;
    let base = frame.y(0.0f64.clamp(y_min, y_max));
    for (i, (label, value)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let top = frame.y(*value);
        let (y, h) = if top <= base { (top, base - top) } else { (base, top - base) };
        let _ = write!(
            out,
            concat!(
                "<rect class=\"bar\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" ",
                "height=\"{h:.2}\" fill=\"{color}\"/>\n",
                "<text x=\"{cx:.2}\" y=\"{vt:.2}\" text-anchor=\"middle\">{v}</text>\n",
                "<text x=\"{cx:.2}\" y=\"{lt}\" text-anchor=\"middle\">{label}</text>\n",
            ),
            x = cx - bar_w / 2.0,
            y = y,
            w = bar_w,
            h = h,
            color = color,
            cx = cx,
            vt = y - 5.0,
            v = tick_label(*value),
            lt = HEIGHT - MARGIN_BOTTOM + 16.0,
            label = esc(label),
        );
    }
    out.push_str("</svg>\n");
    out
}
