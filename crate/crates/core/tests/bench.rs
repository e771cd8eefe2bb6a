use std::ffi::OsString;
use std::fs;

use airlift::bench::{
    emit, measure_pair, overhead_report, parse, plot_data, read_scaling_csv, scaling_report, MeasureOptions,
    OverheadRecord, Report, ScalingRecord, DEFAULT_THRESHOLD,
};
use airlift::runtime::{probe_support, Bind, ContainerSpec};
use airlift_testkit::hostfs::host_rootfs;
use airlift_testkit::workload::{write_workload, THROUGHPUT_PATTERN};
use proptest::prelude::*;

fn series() -> impl Strategy<Value = Vec<ScalingRecord>> {
    prop::collection::btree_map(1u32..512, 1.0f64..1e5, 1..8).prop_map(|m| {
        m.into_iter()
            .map(|(nodes, epoch_time_s)| ScalingRecord { nodes, epoch_time_s })
            .collect()
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn baseline_row_is_unity(s in series()) {
        let r = scaling_report(&s, None).unwrap();
        let b = &r.rows[0];
        prop_assert_eq!(b.nodes, r.baseline_nodes);
        prop_assert_eq!((b.speedup, b.efficiency, b.linear_speedup), (1.0, 1.0, 1.0));
        prop_assert!(r.rows.windows(2).all(|w| w[0].nodes < w[1].nodes));
    }

    #[test]
    fn efficiency_times_linear_is_speedup(s in series()) {
        for row in scaling_report(&s, None).unwrap().rows {
            prop_assert!(close(row.efficiency * row.linear_speedup, row.speedup));
        }
    }

    #[test]
    fn scaling_all_times_changes_nothing(s in series(), k in 0.01f64..100.0) {
        let scaled: Vec<_> = s.iter().map(|r| ScalingRecord { epoch_time_s: r.epoch_time_s * k, ..*r }).collect();
        let (a, b) = (scaling_report(&s, None).unwrap(), scaling_report(&scaled, None).unwrap());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            prop_assert!(close(x.speedup, y.speedup) && close(x.efficiency, y.efficiency));
        }
    }

    #[test]
    fn perfect_scaling_has_unit_efficiency(nodes in prop::collection::btree_set(1u32..256, 1..6), t in 1.0f64..1e4) {
        let base = *nodes.iter().next().unwrap();
        let s: Vec<_> = nodes.iter().map(|&n| ScalingRecord { nodes: n, epoch_time_s: t * f64::from(base) / f64::from(n) }).collect();
        for row in scaling_report(&s, None).unwrap().rows {
            prop_assert!(close(row.efficiency, 1.0));
        }
    }

    #[test]
    fn swapping_sides_inverts_the_ratio(with in 1.0f64..1e4, without in 1.0f64..1e4) {
        let rec = OverheadRecord::throughput("b", with, without);
        let d = overhead_report(std::slice::from_ref(&rec), DEFAULT_THRESHOLD).unwrap().rows[0].throughput_delta.unwrap();
        let e = overhead_report(&[rec.swapped()], DEFAULT_THRESHOLD).unwrap().rows[0].throughput_delta.unwrap();
        prop_assert!(close((1.0 + d) * (1.0 + e), 1.0));
        prop_assert!(d == 0.0 || d.signum() == -e.signum());
    }

    #[test]
    fn significance_is_the_threshold_test(with in 1.0f64..1e4, without in 1.0f64..1e4, threshold in 0.0f64..0.5) {
        let r = overhead_report(&[OverheadRecord::throughput("b", with, without)], threshold).unwrap();
        let row = &r.rows[0];
        prop_assert_eq!(row.significant, row.throughput_delta.unwrap().abs() > threshold);
    }

    #[test]
    fn reports_round_trip_through_every_format(s in series()) {
        let report = Report::from(scaling_report(&s, None).unwrap());
        for fmt in ["csv", "json"] {
            prop_assert_eq!(&parse(fmt, &emit(fmt, &report).unwrap()).unwrap(), &report);
        }
        let recs: Vec<_> = s.iter().map(|r| OverheadRecord::throughput(&format!("n{}", r.nodes), r.epoch_time_s, 100.0)).collect();
        let report = Report::from(overhead_report(&recs, DEFAULT_THRESHOLD).unwrap());
        for fmt in ["csv", "json"] {
            prop_assert_eq!(&parse(fmt, &emit(fmt, &report).unwrap()).unwrap(), &report);
        }
    }
}

#[test]
fn plot_series_has_measured_and_linear_columns() {
    let s = read_scaling_csv("nodes,epoch_time_s\n2,100\n4,60\n".as_bytes()).unwrap();
    let plot = plot_data(&scaling_report(&s, None).unwrap());
    let expected = format!("nodes,measured_speedup,linear_speedup\n2,1,1\n4,{},2\n", 100.0 / 60.0);
    assert_eq!(plot, expected);
}

/// Rootfs plus a workload directory bound over a host path of the same name,
/// so native and containerized runs execute `<dir>/bench` with different
/// contents when `inside_sleep` differs from `native_sleep`.
fn slowdown_fixture(
    native_sleep: &str,
    inside_sleep: &str,
) -> Option<(tempfile::TempDir, ContainerSpec, Vec<OsString>)> {
    let support = probe_support();
    if !support.user_namespaces {
        eprintln!(
            "skipping: no unprivileged user namespaces ({})",
            support.reason.unwrap_or_default()
        );
        return None;
    }
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    host_rootfs(&root).unwrap();
    let (native, inside) = (tmp.path().join("native"), tmp.path().join("inside"));
    fs::create_dir(&native).unwrap();
    fs::create_dir(&inside).unwrap();
    write_workload(&native.join("bench"), 100, native_sleep).unwrap();
    write_workload(&inside.join("bench"), 100, inside_sleep).unwrap();
    let spec = ContainerSpec::new(&root, ["true"]).bind(Bind::new(&inside, &native));
    let workload = vec![native.join("bench").into_os_string()];
    Some((tmp, spec, workload))
}

#[test]
fn same_workload_shows_no_overhead() {
    let Some((_tmp, spec, workload)) = slowdown_fixture("0.2", "0.2") else {
        return;
    };
    let opts = MeasureOptions::new(THROUGHPUT_PATTERN, 3).unwrap();
    let rec = measure_pair(&workload, &spec, &opts).unwrap();
    assert_eq!(rec.benchmark, "bench");
    let row = &overhead_report(&[rec], DEFAULT_THRESHOLD).unwrap().rows[0];
    assert!(row.throughput_delta.unwrap().abs() < 0.05, "{row:?}");
    assert!(row.free_mem_with_gb.unwrap() > 0.0 && row.free_mem_without_gb.unwrap() > 0.0);
}

#[test]
fn injected_slowdown_is_detected() {
    // 0.25 s instead of 0.2 s per batch: throughput drops by 20%
    let Some((_tmp, spec, workload)) = slowdown_fixture("0.2", "0.25") else {
        return;
    };
    let opts = MeasureOptions::new(THROUGHPUT_PATTERN, 3).unwrap();
    let rec = measure_pair(&workload, &spec, &opts).unwrap();
    let row = &overhead_report(&[rec], DEFAULT_THRESHOLD).unwrap().rows[0];
    let d = row.throughput_delta.unwrap();
    assert!((d - -0.2).abs() <= 0.02, "{row:?}");
    assert!(row.significant);
}

#[test]
fn containerized_failure_names_the_side() {
    let Some((tmp, spec, workload)) = slowdown_fixture("0", "0") else {
        return;
    };
    fs::write(tmp.path().join("inside/bench"), "#!/bin/sh\necho broken >&2\nexit 7\n").unwrap();
    let opts = MeasureOptions::new(THROUGHPUT_PATTERN, 1).unwrap();
    let err = measure_pair(&workload, &spec, &opts).unwrap_err();
    assert!(err.to_string().starts_with("containerized run failed"), "{err}");
    assert!(err.to_string().contains("broken"), "{err}");
}
