//! Scaling and containerization-overhead analysis, plus a local driver that
//! measures a workload with and without the runtime.

mod measure;
mod report;

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

pub use measure::{measure_pair, median, MeasureOptions, MemorySampler};
pub use report::{emit, formats, parse, plot_data, Csv, Json, Report, ReportFormat};

/// Relative throughput change above which overhead is reported.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("baseline node count {0} is not in the series")]
    MissingBaseline(u32),
    #[error("node count {0} appears more than once")]
    DuplicateNodeCount(u32),
    #[error("empty scaling series")]
    EmptySeries,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no record carries a with/without measurement pair")]
    NoMeasurements,
    #[error("{side} run failed: {status}")]
    WorkloadFailed { side: &'static str, status: String },
    #[error("{side} output did not match /{pattern}/")]
    PatternNotFound { side: &'static str, pattern: String },
    #[error("unknown report format {0:?}")]
    NoSuchFormat(String),
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub nodes: u32,
    pub epoch_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub nodes: u32,
    pub epoch_time_s: f64,
    /// T(baseline) / T(nodes).
    pub speedup: f64,
    /// speedup / (nodes / baseline).
    pub efficiency: f64,
    /// nodes / baseline: perfect scaling.
    pub linear_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub baseline_nodes: u32,
    /// Sorted by node count.
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn row(&self, nodes: u32) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.nodes == nodes)
    }
}

/// Speedup and parallel efficiency of `series` relative to `baseline`
/// (default: the smallest node count).
pub fn scaling_report(series: &[ScalingRecord], baseline: Option<u32>) -> Result<ScalingReport> {
    let mut by_nodes = BTreeMap::new();
    for r in series {
        if r.nodes == 0 {
            return Err(BenchError::InvalidRecord("node count must be positive".into()));
        }
        if !(r.epoch_time_s.is_finite() && r.epoch_time_s > 0.0) {
            return Err(BenchError::InvalidRecord(format!(
                "epoch time {} at {} nodes must be positive",
                r.epoch_time_s, r.nodes
            )));
        }
        if by_nodes.insert(r.nodes, r.epoch_time_s).is_some() {
            return Err(BenchError::DuplicateNodeCount(r.nodes));
        }
    }
    let base = match baseline {
        Some(b) => b,
        None => *by_nodes.keys().next().ok_or(BenchError::EmptySeries)?,
    };
    let t_base = *by_nodes.get(&base).ok_or(BenchError::MissingBaseline(base))?;
    let rows = by_nodes
        .into_iter()
        .map(|(nodes, t)| {
            let speedup = t_base / t;
            let linear_speedup = f64::from(nodes) / f64::from(base);
            ScalingRow {
                nodes,
                epoch_time_s: t,
                speedup,
                efficiency: speedup / linear_speedup,
                linear_speedup,
            }
        })
        .collect();
    Ok(ScalingReport {
        baseline_nodes: base,
        rows,
    })
}

/// Throughput and free memory of one benchmark with and without the container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRecord {
    pub benchmark: String,
    pub throughput_with: Option<f64>,
    pub throughput_without: Option<f64>,
    pub free_mem_with_gb: Option<f64>,
    pub free_mem_without_gb: Option<f64>,
}

impl OverheadRecord {
    pub fn throughput(benchmark: &str, with: f64, without: f64) -> Self {
        OverheadRecord {
            benchmark: benchmark.to_string(),
            throughput_with: Some(with),
            throughput_without: Some(without),
            free_mem_with_gb: None,
            free_mem_without_gb: None,
        }
    }

    pub fn memory(benchmark: &str, with_gb: f64, without_gb: f64) -> Self {
        OverheadRecord {
            benchmark: benchmark.to_string(),
            throughput_with: None,
            throughput_without: None,
            free_mem_with_gb: Some(with_gb),
            free_mem_without_gb: Some(without_gb),
        }
    }

    /// The same measurements with the with/without roles exchanged.
    pub fn swapped(&self) -> Self {
        OverheadRecord {
            benchmark: self.benchmark.clone(),
            throughput_with: self.throughput_without,
            throughput_without: self.throughput_with,
            free_mem_with_gb: self.free_mem_without_gb,
            free_mem_without_gb: self.free_mem_with_gb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub benchmark: String,
    pub throughput_with: Option<f64>,
    pub throughput_without: Option<f64>,
    /// (with - without) / without.
    pub throughput_delta: Option<f64>,
    pub free_mem_with_gb: Option<f64>,
    pub free_mem_without_gb: Option<f64>,
    /// without - with: positive when the container used memory.
    pub mem_delta_gb: Option<f64>,
    /// |throughput_delta| exceeds the report threshold.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub threshold: f64,
    pub rows: Vec<OverheadRow>,
}

impl OverheadReport {
    pub fn row(&self, benchmark: &str) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.benchmark == benchmark)
    }

    pub fn any_significant(&self) -> bool {
        self.rows.iter().any(|r| r.significant)
    }

    /// One line per benchmark for terminal output.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out += &r.benchmark;
            if let Some(d) = r.throughput_delta {
                out += &format!(": throughput {:+.2}%", d * 100.0);
                out += if r.significant {
                    " (overhead above threshold)"
                } else {
                    " (no significant overhead)"
                };
            }
            if let Some(m) = r.mem_delta_gb {
                out += &format!(", memory {m:.2} GB");
            }
            out.push('\n');
        }
        out
    }
}

fn check_measure(name: &str, what: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x.is_finite() && x >= 0.0) => Err(BenchError::InvalidRecord(format!(
            "{name}: {what} must be a non-negative number, got {x}"
        ))),
        _ => Ok(()),
    }
}

/// Relative throughput and absolute memory deltas per benchmark.
pub fn overhead_report(records: &[OverheadRecord], threshold: f64) -> Result<OverheadReport> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(BenchError::InvalidRecord(format!(
            "threshold {threshold} must be non-negative"
        )));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut any_pair = false;
    for r in records {
        for (what, v) in [
            ("throughput with", r.throughput_with),
            ("throughput without", r.throughput_without),
            ("free memory with", r.free_mem_with_gb),
            ("free memory without", r.free_mem_without_gb),
        ] {
            check_measure(&r.benchmark, what, v)?;
        }
        let throughput_delta = match (r.throughput_with, r.throughput_without) {
            (Some(_), Some(0.0)) => {
                return Err(BenchError::InvalidRecord(format!(
                    "{}: throughput without the container is zero",
                    r.benchmark
                )))
            }
            (Some(w), Some(w0)) => Some((w - w0) / w0),
            _ => None,
        };
        let mem_delta_gb = match (r.free_mem_with_gb, r.free_mem_without_gb) {
            (Some(w), Some(w0)) => Some(w0 - w),
            _ => None,
        };
        any_pair |= throughput_delta.is_some() || mem_delta_gb.is_some();
        rows.push(OverheadRow {
            benchmark: r.benchmark.clone(),
            throughput_with: r.throughput_with,
            throughput_without: r.throughput_without,
            throughput_delta,
            free_mem_with_gb: r.free_mem_with_gb,
            free_mem_without_gb: r.free_mem_without_gb,
            mem_delta_gb,
            significant: throughput_delta.is_some_and(|d| d.abs() > threshold),
        });
    }
    if !any_pair {
        return Err(BenchError::NoMeasurements);
    }
    Ok(OverheadReport { threshold, rows })
}

/// Reads `nodes,epoch_time_s` CSV.
pub fn read_scaling_csv(input: impl Read) -> Result<Vec<ScalingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    Ok(rdr.deserialize().collect::<Result<Vec<ScalingRecord>, _>>()?)
}

#[derive(Deserialize)]
struct OverheadCsvRow {
    benchmark: String,
    tp_with: Option<f64>,
    tp_without: Option<f64>,
    mem_with: Option<f64>,
    mem_without: Option<f64>,
}

/// Reads `benchmark,tp_with,tp_without,mem_with,mem_without` CSV; empty
/// fields mean "not measured".
pub fn read_overhead_csv(input: impl Read) -> Result<Vec<OverheadRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: OverheadCsvRow = row?;
        out.push(OverheadRecord {
            benchmark: r.benchmark,
            throughput_with: r.tp_with,
            throughput_without: r.tp_without,
            free_mem_with_gb: r.mem_with,
            free_mem_without_gb: r.mem_without,
        });
    }
    Ok(out)
}
