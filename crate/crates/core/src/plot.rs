//! Metrics CSV parsing and SVG line charts.

use crate::error::{Error, Result};
use crate::training::CSV_HEADER;
use std::fmt::Write as _;

pub const METRICS: [&str; 4] = ["loss", "slor", "keyword_accuracy", "kl_to_oracle"];

/// One parsed metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub steps: Vec<usize>,
    /// Per metric in [`METRICS`] order; `None` for empty cells.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Series {
    pub fn metric(&self, name: &str) -> Option<Vec<(usize, f64)>> {
        let i = METRICS.iter().position(|m| *m == name)?;
        Some(
            self.steps
                .iter()
                .zip(&self.values[i])
                .filter_map(|(&s, v)| v.map(|v| (s, v)))
                .collect(),
        )
    }
}

/// Parses a metrics CSV; steps must increase strictly.
pub fn parse_metrics_csv(label: &str, text: &str) -> Result<Series> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((i, _)) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected header {CSV_HEADER:?}"),
            })
        }
        None => return Err(Error::Empty("metrics CSV")),
    }
    let mut series = Series {
        label: label.to_string(),
        steps: Vec::new(),
        values: vec![Vec::new(); METRICS.len()],
    };
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + METRICS.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected {} fields, found {}",
                    1 + METRICS.len(),
                    fields.len()
                ),
            });
        }
        let step: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad step {:?}", fields[0]),
        })?;
        if series.steps.last().is_some_and(|&prev| step <= prev) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("step {step} does not increase"),
            });
        }
        series.steps.push(step);
        for (k, raw) in fields[1..].iter().enumerate() {
            let raw = raw.trim();
            let value = if raw.is_empty() {
                None
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad {} value {raw:?}", METRICS[k]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-finite {}", METRICS[k]),
                    });
                }
                Some(v)
            };
            series.values[k].push(value);
        }
    }
    if series.steps.is_empty() {
        return Err(Error::Empty("metrics CSV"));
    }
    Ok(series)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG 1.1 line chart of `metric` against step, one polyline per series.
/// Series without values for the metric are left out; `None` if no series
/// has any.
pub fn line_chart(metric: &str, series: &[Series]) -> Option<String> {
    let data: Vec<(&str, Vec<(usize, f64)>)> = series
        .iter()
        .filter_map(|s| s.metric(metric).map(|p| (s.label.as_str(), p)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if data.is_empty() {
        return None;
    }
    let all = data.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(s, v) in all {
        x0 = x0.min(s as f64);
        x1 = x1.max(s as f64);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |s: f64| LEFT + (s - x0) / (x1 - x0) * pw;
    let py = |v: f64| TOP + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        esc(metric)
    );
    let _ = writeln!(
        svg,
        r#"<g stroke="black" fill="none"><line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/></g>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph,
        TOP + ph
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let sx = x0 + f * (x1 - x0);
        let sy = y0 + f * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.0}</text>"#,
            px(sx),
            TOP + ph + 16.0,
            sx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            LEFT - 6.0,
            py(sy) + 4.0,
            sy
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    for (k, (label, points)) in data.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|&(s, v)| format!("{:.2},{:.2}", px(s as f64), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(label)
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: &str =
        "step,loss,slor,keyword_accuracy,kl_to_oracle\n0,3.0,1.0,0.1,\n100,2.0,1.5,0.5,\n";
    const B: &str =
        "step,loss,slor,keyword_accuracy,kl_to_oracle\n0,4.0,0.2,0.0,\n100,2.5,0.9,0.8,\n";

    #[test]
    fn parses_and_skips_empty_cells() {
        let s = parse_metrics_csv("a", A).unwrap();
        assert_eq!(s.steps, vec![0, 100]);
        assert_eq!(s.metric("slor").unwrap(), vec![(0, 1.0), (100, 1.5)]);
        assert!(s.metric("kl_to_oracle").unwrap().is_empty());
    }

    #[test]
    fn two_series_and_legend() {
        let series = [
            parse_metrics_csv("aux", A).unwrap(),
            parse_metrics_csv("baseline", B).unwrap(),
        ];
        let svg = line_chart("slor", &series).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
        assert!(svg.contains(">aux<") && svg.contains(">baseline<"));
        assert!(line_chart("kl_to_oracle", &series).is_none());
    }

    #[test]
    fn malformed_rows_report_line() {
        let bad = "step,loss,slor,keyword_accuracy,kl_to_oracle\n0,1,,,\n5,x,,,\n";
        assert!(matches!(
            parse_metrics_csv("a", bad),
            Err(Error::Parse { line: 3, .. })
        ));
        let short = "step,loss,slor,keyword_accuracy,kl_to_oracle\n0,1\n";
        assert!(matches!(
            parse_metrics_csv("a", short),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_metrics_csv("a", "nope\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn non_monotone_steps_rejected() {
        let bad = "step,loss,slor,keyword_accuracy,kl_to_oracle\n10,1,,,\n10,1,,,\n";
        let err = parse_metrics_csv("a", bad).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
