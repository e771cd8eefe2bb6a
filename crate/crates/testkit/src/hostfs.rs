//! A minimal runnable rootfs assembled from the host's own binaries.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::layers::TEntry;

/// Tools copied into [`host_rootfs`] when the host has them.
pub const TOOLS: &[&str] = &[
    "sh", "echo", "id", "cat", "touch", "sleep", "date", "true", "false", "mkdir", "rm", "ls", "env", "pwd",
];

fn which(tool: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into());
    std::env::split_paths(&path).map(|d| d.join(tool)).find(|p| p.is_file())
}

/// Shared objects (and the ELF interpreter) `bin` loads, as reported by ldd.
fn libraries(bin: &Path) -> io::Result<Vec<PathBuf>> {
    let out = Command::new("ldd").arg(bin).output()?;
    let text = String::from_utf8_lossy(&out.stdout);
    Ok(text
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let p = match l.split_once("=>") {
                Some((_, rest)) => rest.split_whitespace().next()?,
                None => l.split_whitespace().next()?,
            };
            p.starts_with('/').then(|| PathBuf::from(p))
        })
        .collect())
}

fn copy_into(root: &Path, host: &Path, at: &Path) -> io::Result<()> {
    let dest = root.join(at.strip_prefix("/").unwrap_or(at));
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    if fs::symlink_metadata(&dest).is_err() {
        fs::copy(fs::canonicalize(host)?, &dest)?;
    }
    Ok(())
}

/// Populates `root` with host tools and their libraries, the top-level
/// symlinks the host uses (`bin -> usr/bin` and friends) and empty
/// `dev proc sys tmp home etc` directories.
pub fn host_rootfs(root: &Path) -> io::Result<()> {
    fs::create_dir_all(root)?;
    for top in ["bin", "sbin", "lib", "lib32", "lib64", "libx32"] {
        let host = Path::new("/").join(top);
        match fs::read_link(&host) {
            Ok(target) if target.is_relative() => {
                fs::create_dir_all(root.join(&target))?;
                symlink(&target, root.join(top))?;
            }
            _ => {
                if host.is_dir() {
                    fs::create_dir_all(root.join(top))?;
                }
            }
        }
    }
    fs::create_dir_all(root.join("usr/bin"))?;
    let mut libs = BTreeSet::new();
    for tool in TOOLS {
        let Some(bin) = which(tool) else { continue };
        copy_into(root, &bin, &Path::new("/usr/bin").join(tool))?;
        libs.extend(libraries(&bin)?);
    }
    for lib in libs {
        copy_into(root, &lib, &lib)?;
    }
    for d in ["dev", "proc", "sys", "tmp", "home", "etc"] {
        fs::create_dir_all(root.join(d))?;
    }
    fs::write(root.join("etc/hostname"), "container\n")?;
    Ok(())
}

/// Copies the host executable `bin` to `at` inside `root`, with the shared
/// libraries it needs.
pub fn install_binary(root: &Path, bin: &Path, at: &Path) -> io::Result<()> {
    copy_into(root, bin, at)?;
    for lib in libraries(bin)? {
        copy_into(root, &lib, &lib)?;
    }
    Ok(())
}

/// [`host_rootfs`] as layer entries: a base layer that can be packed into an
/// OCI or docker-save fixture and flattened back.
pub fn host_rootfs_layer(scratch: &Path) -> io::Result<Vec<TEntry>> {
    host_rootfs(scratch)?;
    let mut entries = Vec::new();
    for e in walkdir::WalkDir::new(scratch).min_depth(1).sort_by_file_name() {
        let e = e.map_err(io::Error::from)?;
        let rel = e.path().strip_prefix(scratch).unwrap().to_string_lossy().into_owned();
        let ft = e.file_type();
        if ft.is_symlink() {
            let t = fs::read_link(e.path())?;
            entries.push(TEntry::symlink(&rel, &t.to_string_lossy()));
        } else if ft.is_dir() {
            entries.push(TEntry::dir(&rel, 0o755));
        } else {
            use std::os::unix::fs::PermissionsExt;
            let mode = e.metadata().map_err(io::Error::from)?.permissions().mode() & 0o777;
            entries.push(TEntry::File {
                path: rel,
                data: fs::read(e.path())?,
                mode,
                mtime: 1_700_000_000,
            });
        }
    }
    Ok(entries)
}
