//! Hand-written vector figures: line, bar, and scatter primitives only.
//! Output is byte-deterministic for fixed inputs: fixed canvas, fixed
//! palette, fixed decimal formatting, no timestamps.

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 42.0;
const MB: f64 = 52.0;

const PALETTE: [&str; 6] = ["#1f6f9f", "#c23b22", "#2e8540", "#8a5ca8", "#b8860b", "#444444"];

fn fx(v: f64) -> String {
    format!("{v:.2}")
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" ",
            "font-family=\"monospace\" font-size=\"12\">\n",
            "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n"
        ),
        w = fx(W),
        h = fx(H),
        tx = fx(W / 2.0),
        title = escape(title),
    )
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
    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str, x_ticks: &[f64], y_ticks: &[f64]) {
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#000000\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#000000\"/>\n",
        l = fx(ML),
        r = fx(W - MR),
        t = fx(MT),
        b = fx(H - MB),
    ));
    for &x in x_ticks {
        let px = f.px(x);
        out.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{b}\" x2=\"{px}\" y2=\"{b2}\" stroke=\"#000000\"/>\n<text x=\"{px}\" y=\"{ty}\" text-anchor=\"middle\">{lab}</text>\n",
            px = fx(px),
            b = fx(H - MB),
            b2 = fx(H - MB + 5.0),
            ty = fx(H - MB + 18.0),
            lab = format!("{x:.3}"),
        ));
    }
    for &y in y_ticks {
        let py = f.py(y);
        out.push_str(&format!(
            "<line x1=\"{l2}\" y1=\"{py}\" x2=\"{l}\" y2=\"{py}\" stroke=\"#000000\"/>\n<text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{lab}</text>\n",
            l = fx(ML),
            l2 = fx(ML - 5.0),
            py = fx(py),
            tx = fx(ML - 8.0),
            ty = fx(py + 4.0),
            lab = format!("{y:.2}"),
        ));
    }
    out.push_str(&format!(
        "<text x=\"{cx}\" y=\"{cy}\" text-anchor=\"middle\">{xl}</text>\n<text x=\"16\" y=\"{my}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {my})\">{yl}</text>\n",
        cx = fx((ML + W - MR) / 2.0),
        cy = fx(H - 14.0),
        my = fx((MT + H - MB) / 2.0),
        xl = escape(xlabel),
        yl = escape(ylabel),
    ));
}

fn even_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Rate-vs-x curves; y is fixed to [0, 1].
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut xmax = f64::MIN;
    let mut xmin = f64::MAX;
    for (_, pts) in series {
        for &(x, _) in pts {
            xmax = xmax.max(x);
            xmin = xmin.min(x);
        }
    }
    if series.iter().all(|(_, p)| p.is_empty()) {
        xmin = 0.0;
        xmax = 1.0;
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    let f = Frame { x0: xmin, x1: xmax, y0: 0.0, y1: 1.0 };
    let mut out = header(title);
    axes(&mut out, &f, xlabel, ylabel, &even_ticks(xmin, xmax, 4), &even_ticks(0.0, 1.0, 5));
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.len() > 1 {
            let path: Vec<String> =
                sorted.iter().map(|&(x, y)| format!("{},{}", fx(f.px(x)), fx(f.py(y)))).collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &sorted {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                fx(f.px(x)),
                fx(f.py(y))
            ));
        }
        out.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{ly}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n<text x=\"{tx}\" y=\"{ty}\">{name}</text>\n",
            lx = fx(ML + 10.0),
            ly = fx(MT + 8.0 + 16.0 * si as f64),
            tx = fx(ML + 24.0),
            ty = fx(MT + 17.0 + 16.0 * si as f64),
            name = escape(name),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Labeled bars; y fixed to [0, 1].
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let f = Frame { x0: 0.0, x1: bars.len().max(1) as f64, y0: 0.0, y1: 1.0 };
    let mut out = header(title);
    axes(&mut out, &f, "", ylabel, &[], &even_ticks(0.0, 1.0, 5));
    let slot = (W - ML - MR) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = ML + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let y = f.py(*v);
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{color}\"/>\n<text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">{name}</text>\n<text x=\"{cx}\" y=\"{vy}\" text-anchor=\"middle\">{val}</text>\n",
            x = fx(x),
            y = fx(y),
            w = fx(w),
            h = fx((H - MB) - y),
            cx = fx(x + w / 2.0),
            ly = fx(H - MB + 18.0),
            vy = fx(y - 5.0),
            name = escape(name),
            val = format!("{v:.3}"),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Labeled points on a [0,1] x [0,1] plane with the diagonal drawn.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, points: &[(String, f64, f64)]) -> String {
    let f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
    let mut out = header(title);
    axes(&mut out, &f, xlabel, ylabel, &even_ticks(0.0, 1.0, 5), &even_ticks(0.0, 1.0, 5));
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 3\"/>\n",
        x0 = fx(f.px(0.0)),
        y0 = fx(f.py(0.0)),
        x1 = fx(f.px(1.0)),
        y1 = fx(f.py(1.0)),
    ));
    for (i, (name, x, y)) in points.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"4\" fill=\"{color}\"/>\n<text x=\"{tx}\" y=\"{ty}\">{name}</text>\n",
            cx = fx(f.px(*x)),
            cy = fx(f.py(*y)),
            tx = fx(f.px(*x) + 7.0),
            ty = fx(f.py(*y) + 4.0),
            name = escape(name),
        ));
    }
    out.push_str("</svg>\n");
    out
}
