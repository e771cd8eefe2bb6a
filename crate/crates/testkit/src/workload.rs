//! A synthetic "training" workload that reports throughput.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

/// Output pattern matching the workload's report line.
pub const THROUGHPUT_PATTERN: &str = r"throughput: ([0-9.]+) img/s";

/// Writes a POSIX sh script that "processes" `images` images by sleeping
/// `sleep_s` seconds and prints `throughput: N img/s` from wall time.
pub fn write_workload(path: &Path, images: u64, sleep_s: &str) -> io::Result<()> {
    let script = format!(
        r#"#!/bin/sh
start=$(date +%s%N)
sleep {sleep_s}
end=$(date +%s%N)
dt=$((end - start))
milli=$(({images} * 1000000000000 / dt))
printf 'throughput: %d.%03d img/s\n' $((milli / 1000)) $((milli % 1000))
"#
    );
    fs::write(path, script)?;
    fs::set_permissions(path, fs::Permissions::from_mode(0o755))
}
