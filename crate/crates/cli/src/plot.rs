//! Static SVG charts for metric and loss files.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 7] = ["#3b6ea5", "#d08c2c", "#5a9e4b", "#b6443f", "#7d5ba6", "#7f7f7f", "#2a9d9d"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, y_max: f64, y_label: &str) {
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>", W - PAD / 2.0);
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", x0 - 4.0, y + 4.0, trim(v));
        let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>", W - PAD / 2.0);
    }
    let _ = writeln!(out, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>", H / 2.0, H / 2.0, escape(y_label));
}

fn trim(v: f64) -> String {
    if v >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = PAD + 10.0 + 110.0 * i as f64;
        let _ = writeln!(out, "<rect x=\"{x}\" y=\"30\" width=\"10\" height=\"10\" fill=\"{}\"/>", COLORS[i % COLORS.len()]);
        let _ = writeln!(out, "<text x=\"{}\" y=\"39\">{}</text>", x + 14.0, escape(n));
    }
}

/// Grouped bars: one group per label, one bar per series inside it.
pub fn bar_chart(title: &str, y_label: &str, groups: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = header(title);
    let y_max = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let y_max = if y_max <= 100.0 && y_max > 1.0 { 100.0 } else { y_max };
    axes(&mut out, y_max, y_label);
    let plot_w = W - 1.5 * PAD;
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let gx = PAD + gi as f64 * group_w + group_w * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0);
            let h = (H - 2.0 * PAD) * v / y_max;
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{}: {v:.2}</title></rect>",
                gx + si as f64 * bar_w,
                H - PAD - h,
                bar_w * 0.95,
                h,
                COLORS[si % COLORS.len()],
                escape(g)
            );
        }
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", gx + group_w * 0.4, H - PAD + 16.0, escape(g));
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Polylines over a shared x axis.
pub fn line_chart(title: &str, y_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let mut out = header(title);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let y_max = finite.fold(0.0, f64::max).max(1e-9);
    axes(&mut out, y_max, y_label);
    let (x_lo, x_hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let span = (x_hi - x_lo).max(1e-9);
    let px = |x: f64| PAD + (W - 1.5 * PAD) * (x - x_lo) / span;
    let py = |y: f64| H - PAD - (H - 2.0 * PAD) * y / y_max;
    for (si, (_, vals)) in series.iter().enumerate() {
        let pts: Vec<String> =
            xs.iter().zip(vals).filter(|(_, y)| y.is_finite()).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>", COLORS[si % COLORS.len()], pts.join(" "));
    }
    for x in [x_lo, x_hi] {
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(x), H - PAD + 16.0, trim(x));
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
