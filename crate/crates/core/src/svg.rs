//! Minimal SVG charts for curves and per-method metric summaries.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn px(x: f64) -> f64 {
    PAD + x.clamp(0.0, 1.0) * (W - 2.0 * PAD)
}

fn py(y: f64) -> f64 {
    H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#, px(t), H - PAD + 14.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"#, PAD - 4.0, py(t) + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 + 14.0 * i as f64;
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{colour}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - PAD - 150.0,
            y - 4.0,
            W - PAD - 136.0,
            y,
            escape(name)
        );
    }
}

/// Line chart of several series on the unit square.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            path.join(" ")
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.0.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Mean with a ±std whisker per row, rows spread along the x axis.
pub fn dot_plot(title: &str, y_label: &str, rows: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    frame(&mut out, title, "method", y_label);
    let n = rows.len().max(1) as f64;
    for (i, (_, mean, std)) in rows.iter().enumerate() {
        let x = px((i as f64 + 0.5) / n);
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="{colour}"/><circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="{colour}"/>"#,
            py(mean - std),
            py(mean + std),
            py(*mean)
        );
    }
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
