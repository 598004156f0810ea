//! Stacked-area load charts as standalone SVG: normal load at the bottom,
//! fill-in load on top of it, and the available capacity as a line.

use std::fmt::Write;

use crate::sim::LoadSample;

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub normal_color: String,
    pub fillin_color: String,
    pub capacity_color: String,
    pub width: u32,
    pub height: u32,
}

impl Default for ChartSpec {
    fn default() -> Self {
        ChartSpec {
            title: "CPU load".into(),
            normal_color: "#1f4e9c".into(),
            fillin_color: "#3a9d3a".into(),
            capacity_color: "#0a2a6b".into(),
            width: 900,
            height: 420,
        }
    }
}

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// A round tick spacing giving roughly `target` ticks over `span`.
fn tick_step(span: f64, target: f64) -> f64 {
    if span <= 0.0 {
        return 1.0;
    }
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    step.max(1.0)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(samples: &[LoadSample], spec: &ChartSpec) -> String {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let plot_w = w - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = h - MARGIN_TOP - MARGIN_BOTTOM;
    let t_max = samples.iter().map(|s| s.t_min).max().unwrap_or(0).max(1) as f64;
    let y_max = samples
        .iter()
        .map(|s| s.capacity.max(s.total()))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |t: f64| MARGIN_LEFT + t / t_max * plot_w;
    let y = |v: f64| MARGIN_TOP + plot_h - v / y_max * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(&spec.title)
    );

    if !samples.is_empty() {
        let area = |top: &dyn Fn(&LoadSample) -> u64, bottom: &dyn Fn(&LoadSample) -> u64| {
            let mut pts: Vec<String> = samples
                .iter()
                .map(|s| format!("{:.2},{:.2}", x(s.t_min as f64), y(top(s) as f64)))
                .collect();
            pts.extend(
                samples
                    .iter()
                    .rev()
                    .map(|s| format!("{:.2},{:.2}", x(s.t_min as f64), y(bottom(s) as f64))),
            );
            pts.join(" ")
        };
        let _ = writeln!(
            svg,
            r#"<polygon class="normal" fill="{}" stroke="none" points="{}"/>"#,
            spec.normal_color,
            area(&|s| s.normal_cores, &|_| 0)
        );
        let _ = writeln!(
            svg,
            r#"<polygon class="fillin" fill="{}" stroke="none" points="{}"/>"#,
            spec.fillin_color,
            area(&|s| s.total(), &|s| s.normal_cores)
        );
        let line: Vec<String> = samples
            .iter()
            .map(|s| format!("{:.2},{:.2}", x(s.t_min as f64), y(s.capacity as f64)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="capacity" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            spec.capacity_color,
            line.join(" ")
        );
    }

    // axes
    let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP + plot_h);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2},{:.2} L{x0:.2},{y0:.2} L{:.2},{y0:.2}" fill="none" stroke="black"/>"#,
        MARGIN_TOP,
        x0 + plot_w
    );
    let step = tick_step(t_max, 10.0);
    let mut t = 0.0;
    while t <= t_max + 1e-9 {
        let px = x(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{t}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
        t += step;
    }
    let step = tick_step(y_max, 6.0);
    let mut v = 0.0;
    while v <= y_max + 1e-9 {
        let py = y(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
        v += step;
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">time / min</text>"#,
        x0 + plot_w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">cores</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}
