//! Single-file rootfs archives: gzip-compressed pax tar with exactly one
//! top-level directory named after the image.
//!
//! [`pack`] writes a [`FlattenedRootfs`]; [`unpack`] extracts into a staging
//! directory inside the destination and renames it into place, so a failed
//! unpack leaves nothing behind and never writes outside the destination.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::os::unix::fs::{OpenOptionsExt, PermissionsExt};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use filetime::FileTime;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::{debug, warn};
use tar::{Archive, Builder, EntryType};
use thiserror::Error;

use crate::image::{entry_writer, FlattenedRootfs, NodeKind};

pub const DEFAULT_COMPRESSION: u32 = 6;

const MODE_MASK: u32 = 0o1777;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("rootfs is empty")]
    EmptyRootfs,
    #[error("{}: already exists (pass --overwrite to replace it)", .0.display())]
    DestCollision(PathBuf),
    #[error("archive entry {0:?} escapes the destination")]
    PathEscape(String),
    #[error("{}: not a directory", .0.display())]
    NotADirectory(PathBuf),
    #[error("archive must contain exactly one top-level directory: {0}")]
    TopLevel(String),
    #[error("invalid image name {0:?}")]
    InvalidName(String),
    #[error("hard link {link:?} points at {target:?}, which is not a regular file in the archive")]
    HardlinkTarget { link: String, target: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = ArchiveError> = std::result::Result<T, E>;

trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| ArchiveError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    /// gzip level, 0-9.
    pub compression_level: u32,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            compression_level: DEFAULT_COMPRESSION,
        }
    }
}

/// A packed rootfs on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootfsArchive {
    pub path: PathBuf,
    pub top_level_name: String,
}

/// Header-level description of one archive member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub path: String,
    pub kind: &'static str,
    pub mode: u32,
    pub mtime: u64,
    pub size: u64,
    pub link: Option<String>,
}

fn validate_name(name: &str) -> Result<()> {
    let mut components = Path::new(name).components();
    match (components.next(), components.next()) {
        (Some(Component::Normal(c)), None) if c == name => Ok(()),
        _ => Err(ArchiveError::InvalidName(name.to_string())),
    }
}

/// Writes `rootfs` to `out_path` as `<image_name>/...` in a gzip-compressed tar.
///
/// Entries are written in path order, with hard links last so their targets
/// always precede them. Ownership is not recorded.
pub fn pack(
    rootfs: &FlattenedRootfs,
    image_name: &str,
    out_path: &Path,
    options: &PackOptions,
) -> Result<RootfsArchive> {
    validate_name(image_name)?;
    if rootfs.is_empty() {
        return Err(ArchiveError::EmptyRootfs);
    }
    let partial = sibling_temp(out_path, "partial");
    let result =
        write_archive(rootfs, image_name, &partial, options).and_then(|()| fs::rename(&partial, out_path).at(out_path));
    if result.is_err() {
        let _ = fs::remove_file(&partial);
    }
    result?;
    Ok(RootfsArchive {
        path: out_path.to_path_buf(),
        top_level_name: image_name.to_string(),
    })
}

fn write_archive(rootfs: &FlattenedRootfs, top: &str, path: &Path, options: &PackOptions) -> Result<()> {
    let file = File::create(path).at(path)?;
    let gz = GzEncoder::new(BufWriter::new(file), Compression::new(options.compression_level.min(9)));
    let mut builder = Builder::new(gz);
    let top_path = Path::new(top);
    entry_writer(&mut builder, top_path, EntryType::Directory, 0o755, 0, &[], None).at(path)?;

    let (links, rest): (Vec<_>, Vec<_>) = rootfs
        .iter()
        .partition(|(_, n)| matches!(n.kind, NodeKind::Hardlink(_)));
    for (rel, node) in rest.into_iter().chain(links) {
        let full = top_path.join(rel);
        let (entry_type, data, link): (EntryType, &[u8], Option<PathBuf>) = match &node.kind {
            NodeKind::File(d) => (EntryType::Regular, d, None),
            NodeKind::Dir => (EntryType::Directory, &[], None),
            NodeKind::Symlink(t) => (EntryType::Symlink, &[], Some(t.clone())),
            NodeKind::Hardlink(t) => (EntryType::Link, &[], Some(top_path.join(t))),
        };
        entry_writer(
            &mut builder,
            &full,
            entry_type,
            node.mode & MODE_MASK,
            node.mtime,
            data,
            link.as_deref(),
        )
        .at(path)?;
    }
    let gz = builder.into_inner().at(path)?;
    let mut inner = gz.finish().at(path)?;
    inner.flush().at(path)?;
    inner
        .into_inner()
        .map_err(|e| e.into_error())
        .at(path)?
        .sync_all()
        .at(path)
}

fn sibling_temp(path: &Path, tag: &str) -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}-{n}", std::process::id()))
}

fn open_entries(path: &Path) -> Result<Archive<GzDecoder<BufReader<File>>>> {
    let file = File::open(path).at(path)?;
    Ok(Archive::new(GzDecoder::new(BufReader::new(file))))
}

/// Splits an archive path into its top-level name and the remainder,
/// rejecting absolute paths and `..` outright.
fn split_top(raw: &Path) -> Result<(String, PathBuf)> {
    let escape = || ArchiveError::PathEscape(raw.display().to_string());
    let mut top = None;
    let mut rest = PathBuf::new();
    for c in raw.components() {
        match c {
            Component::Normal(part) => {
                if top.is_none() {
                    top = Some(part.to_string_lossy().into_owned());
                } else {
                    rest.push(part);
                }
            }
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => return Err(escape()),
        }
    }
    let top = top.ok_or_else(|| ArchiveError::TopLevel(format!("entry {:?} has no name", raw)))?;
    Ok((top, rest))
}

fn kind_label(t: EntryType) -> &'static str {
    match t {
        EntryType::Regular | EntryType::Continuous => "file",
        EntryType::Directory => "dir",
        EntryType::Symlink => "symlink",
        EntryType::Link => "hardlink",
        _ => "other",
    }
}

impl RootfsArchive {
    /// Opens an existing archive, checking the single-top-level invariant.
    pub fn open(path: &Path) -> Result<Self> {
        let mut top: Option<String> = None;
        let mut archive = open_entries(path)?;
        for entry in archive.entries().at(path)? {
            let entry = entry.at(path)?;
            let raw = entry.path().at(path)?.into_owned();
            let (name, _) = split_top(&raw)?;
            match &top {
                None => top = Some(name),
                Some(t) if *t == name => {}
                Some(t) => return Err(ArchiveError::TopLevel(format!("found both {t:?} and {name:?}"))),
            }
        }
        let top_level_name = top.ok_or_else(|| ArchiveError::TopLevel("archive is empty".into()))?;
        validate_name(&top_level_name)?;
        Ok(Self {
            path: path.to_path_buf(),
            top_level_name,
        })
    }

    /// Member headers in archive order.
    pub fn entries(&self) -> Result<Vec<EntryInfo>> {
        let mut out = Vec::new();
        let mut archive = open_entries(&self.path)?;
        for entry in archive.entries().at(&self.path)? {
            let entry = entry.at(&self.path)?;
            let header = entry.header();
            out.push(EntryInfo {
                path: entry.path().at(&self.path)?.display().to_string(),
                kind: kind_label(header.entry_type()),
                mode: header.mode().at(&self.path)?,
                mtime: header.mtime().at(&self.path)?,
                size: header.size().at(&self.path)?,
                link: entry.link_name().at(&self.path)?.map(|l| l.display().to_string()),
            });
        }
        Ok(out)
    }
}

/// Extracts `archive` to `dest/<top_level_name>` and returns that path.
///
/// An existing rootfs at the target is a [`ArchiveError::DestCollision`]
/// unless `overwrite` is set, in which case it is replaced only after the new
/// tree has been fully extracted.
pub fn unpack(archive: &RootfsArchive, dest: &Path, overwrite: bool) -> Result<PathBuf> {
    validate_name(&archive.top_level_name)?;
    let meta = fs::metadata(dest).at(dest)?;
    if !meta.is_dir() {
        return Err(ArchiveError::NotADirectory(dest.to_path_buf()));
    }
    let target = dest.join(&archive.top_level_name);
    let exists = target.symlink_metadata().is_ok();
    if exists && !overwrite {
        return Err(ArchiveError::DestCollision(target));
    }

    let staging = sibling_temp(&target, "unpack");
    fs::create_dir(&staging).at(&staging)?;
    let result = extract_into(archive, &staging).and_then(|()| {
        if exists {
            force_remove(&target).at(&target)?;
        }
        fs::rename(&staging, &target).at(&target)
    });
    if result.is_err() {
        let _ = force_remove(&staging);
    }
    result?;
    Ok(target)
}

struct DeferredDir {
    path: PathBuf,
    mode: u32,
    mtime: u64,
}

fn extract_into(archive: &RootfsArchive, staging: &Path) -> Result<()> {
    let src = &archive.path;
    let mut tar = open_entries(src)?;
    let mut dirs: Vec<DeferredDir> = Vec::new();
    let mut root_meta = (0o755, 0u64);

    for entry in tar.entries().at(src)? {
        let mut entry = entry.at(src)?;
        let raw = entry.path().at(src)?.into_owned();
        let (top, rel) = split_top(&raw)?;
        if top != archive.top_level_name {
            return Err(ArchiveError::TopLevel(format!(
                "entry {raw:?} is outside {:?}",
                archive.top_level_name
            )));
        }
        let header = entry.header();
        let entry_type = header.entry_type();
        let mode = header.mode().at(src)? & MODE_MASK;
        let mtime = header.mtime().at(src)?;

        if rel.as_os_str().is_empty() {
            if entry_type == EntryType::Directory {
                root_meta = (mode, mtime);
            }
            continue;
        }
        let out = staging.join(&rel);
        prepare_parent(staging, &rel, &raw)?;

        match entry_type {
            EntryType::Directory => {
                match out.symlink_metadata() {
                    Ok(m) if m.is_dir() => {}
                    Ok(_) => {
                        fs::remove_file(&out).at(&out)?;
                        fs::create_dir(&out).at(&out)?;
                    }
                    Err(_) => fs::create_dir(&out).at(&out)?,
                }
                // writable until all children are in place
                fs::set_permissions(&out, fs::Permissions::from_mode(0o700)).at(&out)?;
                dirs.push(DeferredDir { path: out, mode, mtime });
            }
            EntryType::Regular | EntryType::Continuous => {
                clear_slot(&out)?;
                let mut file = OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .mode(0o600)
                    .custom_flags(libc::O_NOFOLLOW)
                    .open(&out)
                    .at(&out)?;
                io::copy(&mut entry, &mut file).at(&out)?;
                file.set_permissions(fs::Permissions::from_mode(mode)).at(&out)?;
                file.set_modified(system_time(mtime)).at(&out)?;
            }
            EntryType::Symlink => {
                let link = entry
                    .link_name()
                    .at(src)?
                    .ok_or_else(|| ArchiveError::PathEscape(raw.display().to_string()))?
                    .into_owned();
                clear_slot(&out)?;
                std::os::unix::fs::symlink(&link, &out).at(&out)?;
                let t = FileTime::from_unix_time(mtime as i64, 0);
                filetime::set_symlink_file_times(&out, t, t).at(&out)?;
            }
            EntryType::Link => {
                let link = entry
                    .link_name()
                    .at(src)?
                    .ok_or_else(|| ArchiveError::PathEscape(raw.display().to_string()))?
                    .into_owned();
                let (link_top, link_rel) = split_top(&link)?;
                let source = staging.join(&link_rel);
                let is_file = link_top == archive.top_level_name
                    && !link_rel.as_os_str().is_empty()
                    && no_symlink_ancestors(staging, &link_rel)
                    && source.symlink_metadata().map(|m| m.is_file()).unwrap_or(false);
                if !is_file {
                    return Err(ArchiveError::HardlinkTarget {
                        link: raw.display().to_string(),
                        target: link.display().to_string(),
                    });
                }
                clear_slot(&out)?;
                fs::hard_link(&source, &out).at(&out)?;
            }
            other => {
                warn!("skipping {} entry {}", kind_label(other), raw.display());
            }
        }
    }

    // children first so setting a directory's mtime sticks
    for d in dirs.iter().rev() {
        fs::set_permissions(&d.path, fs::Permissions::from_mode(d.mode)).at(&d.path)?;
        let t = FileTime::from_unix_time(d.mtime as i64, 0);
        filetime::set_file_times(&d.path, t, t).at(&d.path)?;
    }
    fs::set_permissions(staging, fs::Permissions::from_mode(root_meta.0)).at(staging)?;
    let t = FileTime::from_unix_time(root_meta.1 as i64, 0);
    filetime::set_file_times(staging, t, t).at(staging)?;
    debug!("extracted {} into {}", src.display(), staging.display());
    Ok(())
}

fn system_time(secs: u64) -> std::time::SystemTime {
    std::time::UNIX_EPOCH + std::time::Duration::from_secs(secs)
}

fn no_symlink_ancestors(root: &Path, rel: &Path) -> bool {
    let mut cur = root.to_path_buf();
    let parent = rel.parent().unwrap_or(Path::new(""));
    for c in parent.components() {
        cur.push(c);
        match cur.symlink_metadata() {
            Ok(m) if m.is_dir() => {}
            _ => return false,
        }
    }
    true
}

/// Creates missing ancestors of `rel` under `root`; any ancestor that exists
/// but is not a real directory aborts the unpack.
fn prepare_parent(root: &Path, rel: &Path, raw: &Path) -> Result<()> {
    let mut cur = root.to_path_buf();
    let parent = rel.parent().unwrap_or(Path::new(""));
    for c in parent.components() {
        cur.push(c);
        match cur.symlink_metadata() {
            Ok(m) if m.is_dir() => {}
            Ok(_) => return Err(ArchiveError::PathEscape(raw.display().to_string())),
            Err(_) => {
                fs::create_dir(&cur).at(&cur)?;
            }
        }
    }
    Ok(())
}

/// Removes whatever sits at `path` so a new non-directory can take its place.
fn clear_slot(path: &Path) -> Result<()> {
    match path.symlink_metadata() {
        Ok(m) if m.is_dir() => force_remove(path).at(path),
        Ok(_) => fs::remove_file(path).at(path),
        Err(_) => Ok(()),
    }
}

/// `remove_dir_all` that first restores owner write/search permission on
/// directories, so read-only trees can be removed.
fn force_remove(path: &Path) -> io::Result<()> {
    let meta = match path.symlink_metadata() {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if !meta.is_dir() {
        return fs::remove_file(path);
    }
    for entry in walkdir::WalkDir::new(path).follow_links(false) {
        let entry = entry.map_err(io::Error::from)?;
        if entry.file_type().is_dir() {
            let perms = entry.metadata().map_err(io::Error::from)?.permissions();
            if perms.mode() & 0o700 != 0o700 {
                fs::set_permissions(entry.path(), fs::Permissions::from_mode(perms.mode() | 0o700))?;
            }
        }
    }
    fs::remove_dir_all(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::LayerEntry;

    fn sample() -> FlattenedRootfs {
        let mut t = FlattenedRootfs::new();
        t.apply_layer(vec![
            LayerEntry::file("bin/echo", "#!echo", 0o755).with_mtime(1_600_000_000),
            LayerEntry::file("etc/os-release", "ID=test\n", 0o644).with_mtime(1_600_000_001),
        ])
        .unwrap();
        t
    }

    #[test]
    fn entries_are_prefixed_with_image_name() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("tf.tar.gz");
        let a = pack(&sample(), "tf", &out, &PackOptions::default()).unwrap();
        assert_eq!(a.top_level_name, "tf");
        let entries = a.entries().unwrap();
        assert!(!entries.is_empty());
        for e in &entries {
            assert!(e.path == "tf" || e.path.starts_with("tf/"), "{}", e.path);
        }
        assert_eq!(RootfsArchive::open(&out).unwrap(), a);
    }

    #[test]
    fn empty_rootfs_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = pack(
            &FlattenedRootfs::new(),
            "x",
            &dir.path().join("x.tar.gz"),
            &PackOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ArchiveError::EmptyRootfs));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn bad_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["", "..", "a/b", "/abs", "."] {
            let err = pack(&sample(), name, &dir.path().join("x"), &PackOptions::default()).unwrap_err();
            assert!(matches!(err, ArchiveError::InvalidName(_)), "{name:?}");
        }
    }

    #[test]
    fn second_unpack_collides_and_overwrite_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("tf.tar.gz");
        let a = pack(&sample(), "tf", &out, &PackOptions::default()).unwrap();
        let dest = dir.path().join("dest");
        fs::create_dir(&dest).unwrap();

        let root = unpack(&a, &dest, false).unwrap();
        assert_eq!(root, dest.join("tf"));
        assert_eq!(fs::read(root.join("etc/os-release")).unwrap(), b"ID=test\n");

        let err = unpack(&a, &dest, false).unwrap_err();
        assert!(matches!(err, ArchiveError::DestCollision(_)));

        fs::write(root.join("stale"), "old").unwrap();
        unpack(&a, &dest, true).unwrap();
        assert!(!root.join("stale").exists());
        assert!(root.join("bin/echo").exists());
        // no staging leftovers
        assert_eq!(fs::read_dir(&dest).unwrap().count(), 1);
    }

    #[test]
    fn unpack_into_file_dest_fails() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("tf.tar.gz");
        let a = pack(&sample(), "tf", &out, &PackOptions::default()).unwrap();
        assert!(matches!(unpack(&a, &out, false), Err(ArchiveError::NotADirectory(_))));
    }

    #[test]
    fn read_only_directories_are_restored_after_children() {
        let mut t = FlattenedRootfs::new();
        t.apply_layer(vec![
            LayerEntry::dir("ro", 0o555).with_mtime(1234),
            LayerEntry::file("ro/f", "x", 0o444).with_mtime(99),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = pack(&t, "img", &dir.path().join("a.tgz"), &PackOptions::default()).unwrap();
        let root = unpack(&a, dir.path(), false).unwrap();
        let back = FlattenedRootfs::from_dir(&root).unwrap();
        assert_eq!(back, t);
        // overwrite must cope with the read-only directory
        unpack(&a, dir.path(), true).unwrap();
    }

    #[test]
    fn split_top_rejects_escapes() {
        assert!(split_top(Path::new("tf/../x")).is_err());
        assert!(split_top(Path::new("/tf/x")).is_err());
        let (top, rest) = split_top(Path::new("./tf/a/b")).unwrap();
        assert_eq!(top, "tf");
        assert_eq!(rest, Path::new("a/b"));
    }
}
