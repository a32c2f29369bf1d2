//! Minimal standalone SVG bar charts. Each figure carries its data as CSV in
//! a `<metadata id="data">` element and a `{{provenance}}` placeholder that
//! the artifact writer fills in.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bars: one group per category, one bar per series.
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<(String, Vec<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

impl BarChart {
    fn data_csv(&self) -> String {
        let mut out = String::from("category");
        for (name, _) in &self.series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, c) in self.categories.iter().enumerate() {
            out.push_str(c);
            for (_, v) in &self.series {
                let _ = write!(out, ",{}", v[i]);
            }
            out.push('\n');
        }
        out
    }

    /// Draws the chart with its top-left corner at `(x0, y0)`.
    fn draw(&self, out: &mut String, x0: f64, y0: f64, width: f64, height: f64) {
        let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
        let plot_w = width - left - right;
        let plot_h = height - top - bottom;
        let values = self
            .series
            .iter()
            .flat_map(|s| s.1.iter().copied())
            .filter(|v| v.is_finite());
        let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let y_of = |v: f64| y0 + top + plot_h * (hi - v) / span;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
            num(x0 + width / 2.0),
            num(y0 + 18.0),
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" transform="rotate(-90 {} {})" text-anchor="middle">{}</text>"#,
            num(x0 + 14.0),
            num(y0 + top + plot_h / 2.0),
            num(x0 + 14.0),
            num(y0 + top + plot_h / 2.0),
            escape(&self.y_label)
        );
        for t in 0..=4 {
            let v = lo + span * t as f64 / 4.0;
            let y = y_of(v);
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" font-size="9" text-anchor="end">{}</text>"##,
                num(x0 + left),
                num(x0 + left + plot_w),
                num(x0 + left - 4.0),
                num(y + 3.0),
                format_tick(v),
                y = num(y),
            );
        }
        let groups = self.categories.len().max(1) as f64;
        let group_w = plot_w / groups;
        let bar_w = group_w * 0.8 / self.series.len().max(1) as f64;
        let zero = y_of(0.0);
        for (g, cat) in self.categories.iter().enumerate() {
            let gx = x0 + left + group_w * g as f64 + group_w * 0.1;
            for (s, (name, vals)) in self.series.iter().enumerate() {
                let v = vals[g];
                if !v.is_finite() {
                    continue;
                }
                let y = y_of(v);
                let _ = writeln!(
                    out,
                    r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"><title>{}: {}</title></rect>"#,
                    num(gx + bar_w * s as f64),
                    num(y.min(zero)),
                    num(bar_w),
                    num((zero - y).abs()),
                    PALETTE[s % PALETTE.len()],
                    escape(name),
                    v
                );
            }
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
                num(gx + group_w * 0.4),
                num(y0 + top + plot_h + 14.0),
                escape(cat)
            );
        }
        for (s, (name, _)) in self.series.iter().enumerate() {
            let lx = x0 + left + 90.0 * s as f64;
            let ly = y0 + height - 14.0;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="10">{}</text>"#,
                num(lx),
                num(ly - 9.0),
                PALETTE[s % PALETTE.len()],
                num(lx + 14.0),
                num(ly),
                escape(name)
            );
        }
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Stacks charts vertically in one document.
pub fn render(title: &str, charts: &[BarChart]) -> String {
    let (width, panel_h) = (720.0, 280.0);
    let height = 40.0 + panel_h * charts.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    out.push_str("{{provenance}}\n");
    out.push_str("<metadata id=\"data\"><![CDATA[\n");
    for c in charts {
        let _ = writeln!(out, "# {}", c.title);
        out.push_str(&c.data_csv());
    }
    out.push_str("]]></metadata>\n");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-size="16" text-anchor="middle" font-weight="bold">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, c) in charts.iter().enumerate() {
        c.draw(&mut out, 0.0, 40.0 + panel_h * i as f64, width, panel_h);
    }
    out.push_str("</svg>\n");
    out
}
