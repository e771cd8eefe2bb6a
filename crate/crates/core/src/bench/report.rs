use serde::{Deserialize, Serialize};

use super::{BenchError, OverheadReport, OverheadRow, Result, ScalingReport, ScalingRow};
use crate::{Named, Registry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Report {
    Scaling(ScalingReport),
    Overhead(OverheadReport),
}

impl From<ScalingReport> for Report {
    fn from(r: ScalingReport) -> Self {
        Report::Scaling(r)
    }
}

impl From<OverheadReport> for Report {
    fn from(r: OverheadReport) -> Self {
        Report::Overhead(r)
    }
}

/// A serialization of reports that can be read back.
pub trait ReportFormat: Named + Send + Sync {
    fn emit(&self, report: &Report) -> Result<String>;
    fn parse(&self, text: &str) -> Result<Report>;
}

pub struct Json;

impl Named for Json {
    fn name(&self) -> &'static str {
        "json"
    }
}

impl ReportFormat for Json {
    fn emit(&self, report: &Report) -> Result<String> {
        Ok(serde_json::to_string_pretty(report)? + "\n")
    }

    fn parse(&self, text: &str) -> Result<Report> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One row per node count or benchmark; report-wide values repeat per row.
pub struct Csv;

impl Named for Csv {
    fn name(&self) -> &'static str {
        "csv"
    }
}

#[derive(Serialize, Deserialize)]
struct OverheadCsvRow {
    threshold: f64,
    benchmark: String,
    throughput_with: Option<f64>,
    throughput_without: Option<f64>,
    throughput_delta: Option<f64>,
    free_mem_with_gb: Option<f64>,
    free_mem_without_gb: Option<f64>,
    mem_delta_gb: Option<f64>,
    significant: bool,
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl ReportFormat for Csv {
    fn emit(&self, report: &Report) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match report {
            Report::Scaling(r) => {
                w.write_record([
                    "baseline_nodes",
                    "nodes",
                    "epoch_time_s",
                    "speedup",
                    "efficiency",
                    "linear_speedup",
                ])?;
                for row in &r.rows {
                    w.write_record([
                        r.baseline_nodes.to_string(),
                        row.nodes.to_string(),
                        row.epoch_time_s.to_string(),
                        row.speedup.to_string(),
                        row.efficiency.to_string(),
                        row.linear_speedup.to_string(),
                    ])?;
                }
            }
            Report::Overhead(r) => {
                for row in &r.rows {
                    w.serialize(OverheadCsvRow {
                        threshold: r.threshold,
                        benchmark: row.benchmark.clone(),
                        throughput_with: row.throughput_with,
                        throughput_without: row.throughput_without,
                        throughput_delta: row.throughput_delta,
                        free_mem_with_gb: row.free_mem_with_gb,
                        free_mem_without_gb: row.free_mem_without_gb,
                        mem_delta_gb: row.mem_delta_gb,
                        significant: row.significant,
                    })?;
                }
            }
        }
        finish(w)
    }

    fn parse(&self, text: &str) -> Result<Report> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let first = rdr.headers()?.get(0).unwrap_or("").to_string();
        match first.as_str() {
            "baseline_nodes" => {
                let mut baseline = None;
                let mut rows = Vec::new();
                for rec in rdr.records() {
                    let rec = rec?;
                    let field = |i: usize| rec.get(i).unwrap_or("");
                    let num = |i: usize| -> Result<f64> {
                        field(i)
                            .parse()
                            .map_err(|_| BenchError::InvalidRecord(format!("bad number {:?}", field(i))))
                    };
                    let int = |i: usize| -> Result<u32> {
                        field(i)
                            .parse()
                            .map_err(|_| BenchError::InvalidRecord(format!("bad count {:?}", field(i))))
                    };
                    baseline = Some(int(0)?);
                    rows.push(ScalingRow {
                        nodes: int(1)?,
                        epoch_time_s: num(2)?,
                        speedup: num(3)?,
                        efficiency: num(4)?,
                        linear_speedup: num(5)?,
                    });
                }
                let baseline_nodes =
                    baseline.ok_or_else(|| BenchError::InvalidRecord("scaling report has no rows".into()))?;
                Ok(Report::Scaling(ScalingReport { baseline_nodes, rows }))
            }
            "threshold" => {
                let mut threshold = None;
                let mut rows = Vec::new();
                for rec in rdr.deserialize() {
                    let r: OverheadCsvRow = rec?;
                    threshold = Some(r.threshold);
                    rows.push(OverheadRow {
                        benchmark: r.benchmark,
                        throughput_with: r.throughput_with,
                        throughput_without: r.throughput_without,
                        throughput_delta: r.throughput_delta,
                        free_mem_with_gb: r.free_mem_with_gb,
                        free_mem_without_gb: r.free_mem_without_gb,
                        mem_delta_gb: r.mem_delta_gb,
                        significant: r.significant,
                    });
                }
                let threshold =
                    threshold.ok_or_else(|| BenchError::InvalidRecord("overhead report has no rows".into()))?;
                Ok(Report::Overhead(OverheadReport { threshold, rows }))
            }
            other => Err(BenchError::InvalidRecord(format!(
                "unrecognized report header {other:?}"
            ))),
        }
    }
}

pub fn formats() -> Registry<dyn ReportFormat> {
    let mut reg: Registry<dyn ReportFormat> = Registry::new();
    reg.register(Box::new(Csv)).register(Box::new(Json));
    reg
}

pub fn emit(format_name: &str, report: &Report) -> Result<String> {
    let reg = formats();
    let f = reg
        .get(format_name)
        .ok_or_else(|| BenchError::NoSuchFormat(format_name.to_string()))?;
    f.emit(report)
}

pub fn parse(format_name: &str, text: &str) -> Result<Report> {
    let reg = formats();
    let f = reg
        .get(format_name)
        .ok_or_else(|| BenchError::NoSuchFormat(format_name.to_string()))?;
    f.parse(text)
}

/// `nodes,measured_speedup,linear_speedup` for plotting against perfect scaling.
pub fn plot_data(report: &ScalingReport) -> String {
    let mut out = String::from("nodes,measured_speedup,linear_speedup\n");
    for r in &report.rows {
        out += &format!("{},{},{}\n", r.nodes, r.speedup, r.linear_speedup);
    }
    out
}
