//! Report rendering: a machine-readable records CSV, an aligned text table,
//! and standalone SVG plots of truth versus prediction. All output is
//! deterministic in the input so re-emission is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

pub fn render_csv(records: &[MetricRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Data("no records to report".into()));
    }
    let mut out = String::from("dataset,method,domain,metric,mean,std,runs\n");
    for r in records {
        let std = r.std.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.dataset,
            r.method.as_str(),
            r.domain,
            r.metric.as_str(),
            r.mean,
            std,
            r.runs
        )
        .expect("string write");
    }
    Ok(out)
}

pub fn render_table(records: &[MetricRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Data("no records to report".into()));
    }
    let header = ["dataset", "method", "domain", "metric", "mean", "std", "runs"];
    let rows: Vec<[String; 7]> = records
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.method.as_str().into(),
                r.domain.to_string(),
                r.metric.as_str().into(),
                format!("{:.6}", r.mean),
                fmt_opt(r.std),
                r.runs.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        let line = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        out.push_str(line.trim_end());
        out.push('\n');
    };
    emit(&mut out, &header.map(String::from));
    emit(
        &mut out,
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>(),
    );
    for row in &rows {
        emit(&mut out, row);
    }
    Ok(out)
}

/// One truth-versus-prediction trace for a target domain.
#[derive(Debug, Clone)]
pub struct SeriesPlot {
    pub title: String,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

const PLOT_W: f64 = 800.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 55.0;

/// Render one plot as a self-contained SVG with both polylines and the
/// individual data points embedded, so no raster step is ever needed.
pub fn render_series_svg(plot: &SeriesPlot) -> Result<String> {
    if plot.truth.is_empty() || plot.truth.len() != plot.prediction.len() {
        return Err(Error::Data(format!(
            "plot {:?} needs equal nonempty series, got {} vs {}",
            plot.title,
            plot.truth.len(),
            plot.prediction.len()
        )));
    }
    let all = plot.truth.iter().chain(&plot.prediction);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in all {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("plot {:?}", plot.title),
            });
        }
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = plot.truth.len();
    let x_at = |i: usize| {
        if n == 1 {
            PLOT_W / 2.0
        } else {
            MARGIN + (PLOT_W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| PLOT_H - MARGIN - (PLOT_H - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let polyline = |values: &[f64]| {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x_at(i), y_at(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let points = |values: &[f64], color: &str| {
        let mut s = String::new();
        for (i, v) in values.iter().enumerate() {
            writeln!(
                s,
                r#"  <circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
                x_at(i),
                y_at(*v),
                color
            )
            .expect("string write");
        }
        s
    };

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="monospace" font-size="12">"#
    )
    .expect("string write");
    writeln!(svg, r#"  <rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#).expect("string write");
    writeln!(
        svg,
        r#"  <text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        PLOT_W / 2.0,
        xml_escape(&plot.title)
    )
    .expect("string write");
    // axes
    writeln!(
        svg,
        r#"  <line x1="{m:.2}" y1="{y0:.2}" x2="{xr:.2}" y2="{y0:.2}" stroke="black"/>"#,
        m = MARGIN,
        y0 = PLOT_H - MARGIN,
        xr = PLOT_W - MARGIN
    )
    .expect("string write");
    writeln!(
        svg,
        r#"  <line x1="{m:.2}" y1="{t:.2}" x2="{m:.2}" y2="{y0:.2}" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        y0 = PLOT_H - MARGIN
    )
    .expect("string write");
    writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
        MARGIN - 5.0,
        PLOT_H - MARGIN,
        lo
    )
    .expect("string write");
    writeln!(
        svg,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
        MARGIN - 5.0,
        MARGIN + 4.0,
        hi
    )
    .expect("string write");
    // traces
    writeln!(
        svg,
        r##"  <polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        polyline(&plot.truth)
    )
    .expect("string write");
    writeln!(
        svg,
        r##"  <polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.5" stroke-dasharray="5,3"/>"##,
        polyline(&plot.prediction)
    )
    .expect("string write");
    svg.push_str(&points(&plot.truth, "#1f77b4"));
    svg.push_str(&points(&plot.prediction, "#d62728"));
    // legend
    writeln!(
        svg,
        r##"  <text x="{:.2}" y="{:.2}" fill="#1f77b4">truth</text>"##,
        PLOT_W - MARGIN - 120.0,
        MARGIN + 14.0
    )
    .expect("string write");
    writeln!(
        svg,
        r##"  <text x="{:.2}" y="{:.2}" fill="#d62728">prediction</text>"##,
        PLOT_W - MARGIN - 120.0,
        MARGIN + 30.0
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    while out.contains("--") {
        out = out.replace("--", "-");
    }
    out.trim_matches('-').to_string()
}

/// Write records.csv, records.txt, and plots/<slug>.svg under `out_dir`.
pub fn emit_report(
    records: &[MetricRecord],
    plots: &[SeriesPlot],
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("records.csv");
    std::fs::write(&csv_path, render_csv(records)?).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = dir.join("records.txt");
    std::fs::write(&txt_path, render_table(records)?).map_err(|e| Error::io(&txt_path, e))?;
    if !plots.is_empty() {
        let plot_dir = dir.join("plots");
        std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
        for plot in plots {
            let path = plot_dir.join(format!("{}.svg", slug(&plot.title)));
            std::fs::write(&path, render_series_svg(plot)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Method, MetricKind, MetricRecord};

    fn sample_records() -> Vec<MetricRecord> {
        vec![
            MetricRecord::from_runs("mg", Method::Vanilla, 20, MetricKind::Mse, &[0.13, 0.14])
                .unwrap(),
            MetricRecord::from_runs("mg", Method::Ours, 20, MetricKind::Mse, &[0.09]).unwrap(),
        ]
    }

    #[test]
    fn csv_has_header_and_one_line_per_record() {
        let text = render_csv(&sample_records()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "dataset,method,domain,metric,mean,std,runs");
        assert!(lines[1].starts_with("mg,vanilla,20,mse,"));
        // single-run record has an empty std cell
        assert!(lines[2].contains(",,1"), "{}", lines[2]);
        assert!(render_csv(&[]).is_err());
    }

    #[test]
    fn table_columns_align() {
        let text = render_table(&sample_records()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("dataset"));
        let method_col = lines[0].find("method").unwrap();
        assert_eq!(&lines[2][method_col..method_col + 7], "vanilla");
        assert_eq!(&lines[3][method_col..method_col + 4], "ours");
    }

    #[test]
    fn svg_contains_both_traces_and_points() {
        let plot = SeriesPlot {
            title: "cos target <20>".into(),
            truth: vec![0.0, 0.5, 1.0, 0.5],
            prediction: vec![0.1, 0.4, 0.9, 0.6],
        };
        let svg = render_series_svg(&plot).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 8);
        assert!(svg.contains("&lt;20&gt;"));
        assert!(svg.contains(">truth<") && svg.contains(">prediction<"));
    }

    #[test]
    fn svg_rejects_bad_series() {
        let bad = SeriesPlot {
            title: "x".into(),
            truth: vec![1.0],
            prediction: vec![],
        };
        assert!(render_series_svg(&bad).is_err());
        let nan = SeriesPlot {
            title: "x".into(),
            truth: vec![f64::NAN],
            prediction: vec![0.0],
        };
        assert!(render_series_svg(&nan).is_err());
    }

    #[test]
    fn emission_is_byte_identical() {
        let records = sample_records();
        let plots = vec![SeriesPlot {
            title: "mg target".into(),
            truth: vec![0.3, 0.35, 0.4],
            prediction: vec![0.31, 0.37, 0.38],
        }];
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit_report(&records, &plots, dir1.path()).unwrap();
        emit_report(&records, &plots, dir2.path()).unwrap();
        for rel in ["records.csv", "records.txt", "plots/mg-target.svg"] {
            let a = std::fs::read(dir1.path().join(rel)).unwrap();
            let b = std::fs::read(dir2.path().join(rel)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b, "{rel} differs");
        }
    }
}
