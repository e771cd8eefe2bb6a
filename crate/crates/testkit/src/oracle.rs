//! Naive layer application: extract each layer tar, in order, into a real
//! directory, honouring whiteouts as they are met.
//!
//! Deliberately simple. It agrees with a proper flattener whenever each
//! layer lists its whiteouts and opaque markers before its other entries,
//! which is how the generators in [`crate::gen`] emit them.

use std::fs;
use std::io::{self, Read};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Component, Path, PathBuf};

use filetime::FileTime;
use tar::{Archive, EntryType};

fn clean(raw: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in raw.components() {
        match c {
            Component::Normal(n) => out.push(n),
            Component::CurDir | Component::RootDir => {}
            _ => return None,
        }
    }
    Some(out)
}

/// True when every proper ancestor of `rel` under `root` is a real directory.
fn ancestors_are_dirs(root: &Path, rel: &Path) -> bool {
    let mut p = root.to_path_buf();
    let comps: Vec<_> = rel.components().collect();
    for c in &comps[..comps.len().saturating_sub(1)] {
        p.push(c);
        match fs::symlink_metadata(&p) {
            Ok(m) if m.file_type().is_dir() => {}
            _ => return false,
        }
    }
    true
}

fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.file_type().is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

fn mkdir_mode(path: &Path, mode: u32) -> io::Result<()> {
    fs::create_dir(path)?;
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

/// Makes every component of `rel` (inclusive) a directory.
fn ensure_dir(root: &Path, rel: &Path) -> io::Result<()> {
    let mut p = root.to_path_buf();
    for c in rel.components() {
        p.push(c);
        match fs::symlink_metadata(&p) {
            Ok(m) if m.file_type().is_dir() => {}
            Ok(_) => {
                fs::remove_file(&p)?;
                mkdir_mode(&p, 0o755)?;
            }
            Err(_) => mkdir_mode(&p, 0o755)?,
        }
    }
    Ok(())
}

fn ensure_parent(root: &Path, rel: &Path) -> io::Result<()> {
    match rel.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => ensure_dir(root, parent),
        _ => Ok(()),
    }
}

/// Applies one uncompressed layer tar to `root`.
pub fn extract_layer(root: &Path, layer: &[u8]) -> io::Result<()> {
    let mut archive = Archive::new(layer);
    for entry in archive.entries()? {
        let mut entry = entry?;
        let rel = match clean(&entry.path()?) {
            Some(r) if !r.as_os_str().is_empty() => r,
            _ => continue,
        };
        let name = rel.file_name().unwrap().to_string_lossy().into_owned();
        let target = root.join(&rel);
        let header = entry.header().clone();
        let mode = header.mode()? & 0o7777;
        let mtime = header.mtime()? as i64;

        if name == ".wh..wh..opq" {
            let dir = rel.parent().unwrap();
            ensure_dir(root, dir)?;
            for child in fs::read_dir(root.join(dir))? {
                remove_any(&child?.path())?;
            }
            continue;
        }
        if let Some(victim) = name.strip_prefix(".wh.") {
            let victim_rel = rel.with_file_name(victim);
            if ancestors_are_dirs(root, &victim_rel) {
                remove_any(&root.join(victim_rel))?;
            }
            continue;
        }

        ensure_parent(root, &rel)?;
        match header.entry_type() {
            EntryType::Directory => {
                match fs::symlink_metadata(&target) {
                    Ok(m) if m.file_type().is_dir() => {}
                    _ => {
                        remove_any(&target)?;
                        fs::create_dir(&target)?;
                    }
                }
                fs::set_permissions(&target, fs::Permissions::from_mode(mode))?;
            }
            EntryType::Regular => {
                remove_any(&target)?;
                let mut data = Vec::new();
                entry.read_to_end(&mut data)?;
                fs::write(&target, &data)?;
                fs::set_permissions(&target, fs::Permissions::from_mode(mode))?;
                filetime::set_file_mtime(&target, FileTime::from_unix_time(mtime, 0))?;
            }
            EntryType::Symlink => {
                remove_any(&target)?;
                let link = header.link_name()?.expect("symlink without target");
                symlink(&link, &target)?;
                let t = FileTime::from_unix_time(mtime, 0);
                filetime::set_symlink_file_times(&target, t, t)?;
            }
            EntryType::Link => {
                let link = header.link_name()?.expect("hard link without target");
                let src = root.join(clean(&link).expect("hard link target inside root"));
                if src != target {
                    remove_any(&target)?;
                    fs::hard_link(&src, &target)?;
                }
            }
            other => panic!("oracle does not handle {other:?}"),
        }
    }
    Ok(())
}

/// Applies `layers` (uncompressed tars, base first) to an empty `root`.
pub fn extract_sequential(root: &Path, layers: &[Vec<u8>]) -> io::Result<()> {
    for l in layers {
        extract_layer(root, l)?;
    }
    Ok(())
}
