//! Summary tables and SVG risk-coverage plots.
//!
//! Output is a pure function of the inputs: no timestamps, no generated ids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selective::{Ranking, RiskCoveragePoint};

pub const SUMMARY_HEADER: &str = "method,checkpoint_id,pretrain_epoch,coverage,sel_accuracy,sel_macro_f1,sel_qwk";

fn fixed4(v: f64) -> String {
    format!("{v:.4}")
}

fn fixed4_opt(v: Option<f64>) -> String {
    v.map(fixed4).unwrap_or_default()
}

/// One row per ranked checkpoint, in rank order, numbers to four decimals.
pub fn summary_table(method: &str, ranking: &Ranking) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in &ranking.ranked {
        let p = &r.score.operating_point.point;
        let _ = writeln!(
            out,
            "{method},{},{},{},{},{},{}",
            r.score.checkpoint_id,
            r.score.pretrain_epoch,
            fixed4(p.coverage),
            fixed4_opt(p.sel_accuracy),
            fixed4_opt(p.sel_macro_f1),
            fixed4_opt(p.sel_qwk),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    SelAccuracy,
    #[default]
    SelMacroF1,
}

impl PlotMetric {
    pub fn of(self, p: &RiskCoveragePoint) -> Option<f64> {
        match self {
            PlotMetric::SelAccuracy => p.sel_accuracy,
            PlotMetric::SelMacroF1 => p.sel_macro_f1,
        }
    }

    fn label(self) -> &'static str {
        match self {
            PlotMetric::SelAccuracy => "selective accuracy",
            PlotMetric::SelMacroF1 => "selective macro-F1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
    pub metric: PlotMetric,
    pub title: String,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            width: 800,
            height: 500,
            metric: PlotMetric::default(),
            title: "Risk-coverage".into(),
        }
    }
}

/// One curve with its highlighted operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub curve: Vec<RiskCoveragePoint>,
    pub operating_point: RiskCoveragePoint,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
];

const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn x(&self, coverage: f64) -> f64 {
        self.x0 + coverage * self.w
    }

    fn y(&self, metric: f64) -> f64 {
        self.y0 + (1.0 - metric) * self.h
    }
}

/// Renders coverage (ascending, left to right) against the chosen metric.
pub fn risk_coverage_svg(series: &[Series], spec: &PlotSpec) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Usage("plot needs at least one series".into()));
    }
    if let Some(s) = series.iter().find(|s| s.curve.len() < 2) {
        return Err(Error::Usage(format!(
            "series {:?} has {} points; a curve needs at least 2",
            s.label,
            s.curve.len()
        )));
    }
    let (width, height) = (f64::from(spec.width), f64::from(spec.height));
    let frame = Frame {
        x0: MARGIN_LEFT,
        y0: MARGIN_TOP,
        w: (width - MARGIN_LEFT - MARGIN_RIGHT).max(10.0),
        h: (height - MARGIN_TOP - MARGIN_BOTTOM).max(10.0),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
        frame.x0 + frame.w / 2.0,
        escape(&spec.title)
    );

    // axes and ticks
    let _ = writeln!(svg, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
        frame.x0, frame.y0, frame.w, frame.h
    );
    for i in 0..=5 {
        let t = f64::from(i) / 5.0;
        let (x, y) = (frame.x(t), frame.y(t));
        let bottom = frame.y0 + frame.h;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}"/>"#,
            bottom + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#,
            frame.x0 - 5.0,
            frame.x0
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g class="tick-labels">"#);
    for i in 0..=5 {
        let t = f64::from(i) / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.1}</text>"#,
            frame.x(t),
            frame.y0 + frame.h + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.1}</text>"#,
            frame.x0 - 8.0,
            frame.y(t) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">coverage</text>"#,
        frame.x0 + frame.w / 2.0,
        frame.y0 + frame.h + 42.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        frame.y0 + frame.h / 2.0,
        frame.y0 + frame.h / 2.0,
        spec.metric.label()
    );
    let _ = writeln!(svg, "</g>");

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = escape(&s.label);
        let _ = writeln!(svg, r#"<g class="series" data-series="{label}">"#);
        // undefined metrics break the line into segments
        let mut segments: Vec<Vec<String>> = vec![Vec::new()];
        for p in &s.curve {
            match spec.metric.of(p) {
                Some(m) => segments.last_mut().expect("non-empty").push(format!(
                    "{:.2},{:.2}",
                    frame.x(p.coverage),
                    frame.y(m)
                )),
                None => segments.push(Vec::new()),
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                seg.join(" ")
            );
        }
        let op = &s.operating_point;
        if let Some(m) = spec.metric.of(op) {
            let _ = writeln!(
                svg,
                r#"<circle class="operating-point" cx="{:.2}" cy="{:.2}" r="5" fill="{color}" stroke="black" data-threshold="{}" data-coverage="{}" data-metric="{}"/>"#,
                frame.x(op.coverage),
                frame.y(m),
                fixed4(op.threshold),
                fixed4(op.coverage),
                fixed4(m)
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g class="legend">"#);
    let lx = frame.x0 + frame.w + 16.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = frame.y0 + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}
