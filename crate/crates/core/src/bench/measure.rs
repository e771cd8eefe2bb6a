use std::ffi::OsString;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info};
use regex::Regex;

use super::{BenchError, OverheadRecord, Result};
use crate::runtime::{Container, ContainerSpec};

/// Median of `values`; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

fn mem_free_gb() -> Option<f64> {
    let text = fs::read_to_string("/proc/meminfo").ok()?;
    let kb: f64 = text
        .lines()
        .find(|l| l.starts_with("MemFree:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()?;
    Some(kb * 1024.0 / 1e9)
}

/// Tracks the minimum free system memory on a background thread.
pub struct MemorySampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Option<f64>>,
}

impl MemorySampler {
    pub fn start(interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let mut min: Option<f64> = None;
            loop {
                if let Some(gb) = mem_free_gb() {
                    min = Some(min.map_or(gb, |m| m.min(gb)));
                }
                if flag.load(Ordering::Relaxed) {
                    return min;
                }
                thread::sleep(interval);
            }
        });
        MemorySampler { stop, handle }
    }

    /// Minimum free memory observed, in GB (10^9 bytes).
    pub fn finish(self) -> Option<f64> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.join().ok().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct MeasureOptions {
    pub repetitions: usize,
    /// Throughput pattern; capture group 1 holds the number.
    pub pattern: Regex,
    pub sample_interval: Duration,
    /// Defaults to the workload's file name.
    pub benchmark: Option<String>,
}

impl MeasureOptions {
    pub fn new(pattern: &str, repetitions: usize) -> Result<Self> {
        let pattern =
            Regex::new(pattern).map_err(|e| BenchError::InvalidRecord(format!("bad throughput pattern: {e}")))?;
        if pattern.captures_len() < 2 {
            return Err(BenchError::InvalidRecord(
                "throughput pattern needs a capture group for the number".into(),
            ));
        }
        Ok(MeasureOptions {
            repetitions,
            pattern,
            sample_interval: Duration::from_millis(10),
            benchmark: None,
        })
    }
}

fn throughput(side: &'static str, out: &Output, pattern: &Regex) -> Result<f64> {
    let text = String::from_utf8_lossy(&out.stdout);
    pattern
        .captures_iter(&text)
        .last()
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse().ok())
        .ok_or_else(|| BenchError::PatternNotFound {
            side,
            pattern: pattern.as_str().to_string(),
        })
}

fn checked(side: &'static str, out: Output) -> Result<Output> {
    if out.status.success() {
        Ok(out)
    } else {
        let stderr = String::from_utf8_lossy(&out.stderr);
        let tail = stderr.lines().last().unwrap_or("");
        Err(BenchError::WorkloadFailed {
            side,
            status: if tail.is_empty() {
                out.status.to_string()
            } else {
                format!("{} ({tail})", out.status)
            },
        })
    }
}

/// Runs `workload` `repetitions` times natively, then as many times inside
/// the container described by `spec`, and reports medians of throughput and
/// of the minimum free memory seen during each run.
pub fn measure_pair(workload: &[OsString], spec: &ContainerSpec, opts: &MeasureOptions) -> Result<OverheadRecord> {
    if workload.is_empty() {
        return Err(BenchError::InvalidRecord("empty workload command".into()));
    }
    if opts.repetitions == 0 {
        return Err(BenchError::InvalidRecord("at least one repetition is required".into()));
    }
    let mut contained = spec.clone();
    contained.command = workload.to_vec();

    let mut native = (Vec::new(), Vec::new());
    for rep in 0..opts.repetitions {
        let sampler = MemorySampler::start(opts.sample_interval);
        let out = Command::new(&workload[0]).args(&workload[1..]).output();
        let mem = sampler.finish();
        let out = checked("native", out?)?;
        let tp = throughput("native", &out, &opts.pattern)?;
        debug!("native run {rep}: {tp} (min free {mem:?} GB)");
        native.0.push(tp);
        native.1.extend(mem);
    }

    let mut inside = (Vec::new(), Vec::new());
    for rep in 0..opts.repetitions {
        let mut container = Container::prepare(&contained)?;
        let sampler = MemorySampler::start(opts.sample_interval);
        let out = container.output();
        let mem = sampler.finish();
        let out = checked("containerized", out?)?;
        let tp = throughput("containerized", &out, &opts.pattern)?;
        debug!("containerized run {rep}: {tp} (min free {mem:?} GB)");
        inside.0.push(tp);
        inside.1.extend(mem);
    }

    let benchmark = opts.benchmark.clone().unwrap_or_else(|| {
        Path::new(&workload[0])
            .file_name()
            .unwrap_or(workload[0].as_os_str())
            .to_string_lossy()
            .into_owned()
    });
    let record = OverheadRecord {
        benchmark,
        throughput_with: median(&inside.0),
        throughput_without: median(&native.0),
        free_mem_with_gb: median(&inside.1),
        free_mem_without_gb: median(&native.1),
    };
    info!(
        "{}: {:?} img/s with, {:?} without",
        record.benchmark, record.throughput_with, record.throughput_without
    );
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn pattern_needs_a_group() {
        assert!(MeasureOptions::new("throughput", 1).is_err());
        assert!(MeasureOptions::new("(", 1).is_err());
        assert!(MeasureOptions::new(r"tp: ([0-9.]+)", 1).is_ok());
    }

    #[test]
    fn sampler_reads_meminfo() {
        let s = MemorySampler::start(Duration::from_millis(1));
        thread::sleep(Duration::from_millis(5));
        let gb = s.finish().unwrap();
        assert!(gb > 0.0);
    }

    #[test]
    fn native_failures_are_reported() {
        let spec = ContainerSpec::new("/nonexistent", ["x"]);
        let opts = MeasureOptions::new(r"tp: (\d+)", 1).unwrap();
        let sh = |s: &str| vec![OsString::from("sh"), "-c".into(), s.into()];
        assert!(matches!(
            measure_pair(&sh("exit 3"), &spec, &opts),
            Err(BenchError::WorkloadFailed { side: "native", .. })
        ));
        assert!(matches!(
            measure_pair(&sh("echo nothing"), &spec, &opts),
            Err(BenchError::PatternNotFound { side: "native", .. })
        ));
    }
}
