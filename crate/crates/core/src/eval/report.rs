//! Report tables and their byte-stable CSV, SVG and markdown renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }

    /// Pooled standard deviation of two seed groups of equal size.
    pub fn pooled_std(a: &MeanStd, b: &MeanStd) -> f64 {
        ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub config: String,
    /// Sweep coordinate, when the table is a sweep.
    pub x: Option<f64>,
    pub ap50: MeanStd,
    pub ap70: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub x_label: String,
    pub rows: Vec<TableRow>,
}

impl SweepTable {
    pub fn row(&self, config: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.config == config)
    }
}

/// Non-collaborative versus collaborative AP@0.5 of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub agent: String,
    pub local: MeanStd,
    pub collab: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub tables: Vec<SweepTable>,
    pub scatter: Vec<ScatterPoint>,
}

impl EvalReport {
    pub fn table(&self, name: &str) -> Option<&SweepTable> {
        self.tables.iter().find(|t| t.name == name)
    }
}

pub const CSV_HEADER: [&str; 7] = ["table", "config", "x", "ap50_mean", "ap50_std", "ap70_mean", "ap70_std"];

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// CSV rendering: one line per table row, then the scatter points as rows of
/// the `underperforming` table (AP@0.7 columns hold the collaborative AP).
pub fn metrics_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for t in &report.tables {
        for r in &t.rows {
            let x = r.x.map(num).unwrap_or_default();
            w.write_record([t.name.as_str(), &r.config, &x, &num(r.ap50.mean), &num(r.ap50.std), &num(r.ap70.mean), &num(r.ap70.std)]).map_err(io)?;
        }
    }
    for p in &report.scatter {
        w.write_record(["underperforming", &p.agent, "", &num(p.local.mean), &num(p.local.std), &num(p.collab.mean), &num(p.collab.std)]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parses [`metrics_csv`] output back into `(table, config, x, numbers)`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, String, Option<f64>, [f64; 4])>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| Error::Format(format!("column {i}: {e}")));
        let x = if rec[2].is_empty() { None } else { Some(f(2)?) };
        out.push((rec[0].to_string(), rec[1].to_string(), x, [f(3)?, f(4)?, f(5)?, f(6)?]));
    }
    Ok(out)
}

/// Markdown summary of every table.
pub fn summary_markdown(report: &EvalReport) -> String {
    let mut s = String::from("# Evaluation summary\n\n");
    let _ = writeln!(s, "Dataset `{}`, seeds {:?}.\n", report.dataset_hash, report.seeds);
    for t in &report.tables {
        let _ = writeln!(s, "## {}\n\n| config | {} | AP@0.5 | AP@0.7 |\n|---|---|---|---|", t.name, t.x_label);
        for r in &t.rows {
            let x = r.x.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(s, "| {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} |", r.config, x, r.ap50.mean, r.ap50.std, r.ap70.mean, r.ap70.std);
        }
        s.push('\n');
    }
    if !report.scatter.is_empty() {
        s.push_str("## underperforming\n\n| agent | local AP@0.5 | collaborative AP@0.5 |\n|---|---|---|\n");
        for p in &report.scatter {
            let _ = writeln!(s, "| {} | {:.3} ± {:.3} | {:.3} ± {:.3} |", p.agent, p.local.mean, p.local.std, p.collab.mean, p.collab.std);
        }
    }
    s
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

fn sweep_svg(t: &SweepTable) -> Result<String> {
    let pts: Vec<(f64, f64)> = t.rows.iter().filter_map(|r| r.x.map(|x| (x, r.ap50.mean))).collect();
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (480, 320)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (x0, x1) = pts.iter().fold((0.0f64, 1.0f64), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let mut chart = ChartBuilder::on(&root)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .caption(&t.name, ("sans-serif", 16))
            .build_cartesian_2d(x0..x1, 0.0f64..1.0f64)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(t.x_label.as_str()).y_desc("AP@0.5").draw().map_err(plot_err)?;
        chart.draw_series(LineSeries::new(pts.iter().copied(), &BLUE)).map_err(plot_err)?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled()))).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

fn scatter_svg(points: &[ScatterPoint]) -> Result<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (400, 400)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .caption("underperforming agents", ("sans-serif", 16))
            .build_cartesian_2d(0.0f64..1.0f64, 0.0f64..1.0f64)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("local AP@0.5").y_desc("collaborative AP@0.5").draw().map_err(plot_err)?;
        chart.draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], &BLACK)).map_err(plot_err)?;
        chart.draw_series(points.iter().map(|p| Circle::new((p.local.mean, p.collab.mean), 4, RED.filled()))).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

/// Writes `metrics.csv`, `summary.md`, one SVG per sweep table and the
/// scatter plot; returns the written paths.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("metrics.csv".into(), metrics_csv(report)?)?;
    put("summary.md".into(), summary_markdown(report))?;
    for t in &report.tables {
        if t.rows.iter().any(|r| r.x.is_some()) {
            put(format!("{}.svg", t.name), sweep_svg(t)?)?;
        }
    }
    if !report.scatter.is_empty() {
        put("underperforming.svg".into(), scatter_svg(&report.scatter)?)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let row = |c: &str, x: Option<f64>, a: f64| TableRow { config: c.into(), x, ap50: MeanStd { mean: a, std: 0.01 }, ap70: MeanStd { mean: a / 2.0, std: 0.02 } };
        EvalReport {
            dataset_hash: "abc".into(),
            seeds: vec![0, 1, 2],
            tables: vec![
                SweepTable { name: "pose".into(), x_label: "sigma_p".into(), rows: vec![row("0", Some(0.0), 0.8), row("1", Some(1.0), 0.7)] },
                SweepTable { name: "agents".into(), x_label: "".into(), rows: vec![row("L1/local", None, 0.123456789)] },
            ],
            scatter: vec![ScatterPoint { agent: "L1".into(), local: MeanStd { mean: 0.5, std: 0.0 }, collab: MeanStd { mean: 0.6, std: 0.1 } }],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = metrics_csv(&EvalReport::default()).unwrap();
        assert_eq!(csv, CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_round_trip() {
        let r = sample();
        let rows = parse_metrics_csv(&metrics_csv(&r).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], ("pose".into(), "0".into(), Some(0.0), [0.8, 0.01, 0.4, 0.02]));
        assert_eq!(rows[2].3[0], 0.123457);
        assert_eq!(rows[3].0, "underperforming");
    }

    #[test]
    fn emission_is_byte_stable() {
        let dir = std::env::temp_dir().join(format!("gtspace-report-{}", std::process::id()));
        let r = sample();
        let a = emit_report(&r, &dir.join("a")).unwrap();
        let b = emit_report(&r, &dir.join("b")).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[0.4]).std, 0.0);
    }
}
