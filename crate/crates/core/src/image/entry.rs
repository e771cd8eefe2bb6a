use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::path::{Component, Path, PathBuf};

use log::{debug, warn};
use tar::{Archive, Builder, EntryType, Header};

use super::{ImageError, Result};

const WHITEOUT_PREFIX: &str = ".wh.";
const OPAQUE_MARKER: &str = ".wh..wh..opq";

/// Permission bits kept from layer entries; setuid and setgid are dropped.
pub(crate) const MODE_MASK: u32 = 0o1777;

/// One member of a layer tar, classified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    /// Normalized, relative to the image root.
    pub path: PathBuf,
    pub kind: EntryKind,
    pub mode: u32,
    pub mtime: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryKind {
    File(Vec<u8>),
    Dir,
    Symlink(PathBuf),
    /// Target path, normalized relative to the image root.
    Hardlink(PathBuf),
    /// `.wh.NAME`: deletes `NAME` from lower layers.
    Whiteout,
    /// `.wh..wh..opq`: hides everything lower layers put in this directory.
    OpaqueMarker,
}

impl LayerEntry {
    pub fn file(path: impl Into<PathBuf>, data: impl Into<Vec<u8>>, mode: u32) -> Self {
        Self::new(path, EntryKind::File(data.into()), mode)
    }

    pub fn dir(path: impl Into<PathBuf>, mode: u32) -> Self {
        Self::new(path, EntryKind::Dir, mode)
    }

    pub fn symlink(path: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        Self::new(path, EntryKind::Symlink(target.into()), 0o777)
    }

    pub fn hardlink(path: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        Self::new(path, EntryKind::Hardlink(target.into()), 0o644)
    }

    /// A whiteout deleting `victim`.
    pub fn whiteout(victim: impl AsRef<Path>) -> Self {
        let victim = victim.as_ref();
        let name = victim.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        let mut marker = std::ffi::OsString::from(WHITEOUT_PREFIX);
        marker.push(name);
        let path = victim.parent().unwrap_or(Path::new("")).join(marker);
        Self::new(path, EntryKind::Whiteout, 0o644)
    }

    /// An opaque marker for directory `dir`.
    pub fn opaque(dir: impl AsRef<Path>) -> Self {
        Self::new(dir.as_ref().join(OPAQUE_MARKER), EntryKind::OpaqueMarker, 0o644)
    }

    fn new(path: impl Into<PathBuf>, kind: EntryKind, mode: u32) -> Self {
        Self {
            path: path.into(),
            kind,
            mode,
            mtime: 0,
        }
    }

    pub fn with_mtime(mut self, mtime: u64) -> Self {
        self.mtime = mtime;
        self
    }

    /// For a whiteout, the path it deletes.
    pub fn whiteout_target(&self) -> Option<PathBuf> {
        if self.kind != EntryKind::Whiteout {
            return None;
        }
        let name = self.path.file_name()?.as_bytes();
        let victim = std::ffi::OsStr::from_bytes(&name[WHITEOUT_PREFIX.len()..]);
        Some(self.path.parent().unwrap_or(Path::new("")).join(victim))
    }

    /// For an opaque marker, the directory it applies to.
    pub fn opaque_dir(&self) -> Option<PathBuf> {
        if self.kind != EntryKind::OpaqueMarker {
            return None;
        }
        Some(self.path.parent().unwrap_or(Path::new("")).to_path_buf())
    }
}

/// Lexically normalizes an archive path to a root-relative path.
///
/// Leading `/` and `.` components are dropped and `..` is resolved; a `..`
/// that would climb above the root is a [`ImageError::PathEscape`]. The
/// empty path denotes the root itself.
pub fn normalize_path(raw: &Path) -> Result<PathBuf> {
    let mut out = PathBuf::new();
    for component in raw.components() {
        match component {
            Component::Prefix(_) | Component::RootDir | Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return Err(ImageError::PathEscape(raw.display().to_string()));
                }
            }
            Component::Normal(c) => out.push(c),
        }
    }
    Ok(out)
}

fn classify(path: &Path) -> Option<EntryKind> {
    let name = path.file_name()?.to_str()?;
    if name == OPAQUE_MARKER {
        Some(EntryKind::OpaqueMarker)
    } else if name.starts_with(".wh..wh.") {
        // aufs bookkeeping (.wh..wh.plnk and friends); carries no content
        None
    } else if name.len() > WHITEOUT_PREFIX.len() && name.starts_with(WHITEOUT_PREFIX) {
        Some(EntryKind::Whiteout)
    } else {
        None
    }
}

fn is_aufs_metadata(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with(".wh..wh.") && n != OPAQUE_MARKER)
}

/// Decodes an uncompressed layer tar into classified entries, in tar order.
///
/// Device nodes and FIFOs are skipped. setuid/setgid bits are stripped.
pub fn decode_layer(reader: impl Read) -> Result<Vec<LayerEntry>> {
    let mut archive = Archive::new(reader);
    let mut entries = Vec::new();
    for raw in archive.entries()? {
        let mut raw = raw?;
        let header = raw.header();
        let entry_type = header.entry_type();
        let path = normalize_path(&raw.path()?)?;
        let mode = header.mode().unwrap_or(0o644);
        if mode & 0o6000 != 0 {
            debug!("stripping setuid/setgid from {}", path.display());
        }
        let mode = mode & MODE_MASK;
        let mtime = header.mtime().unwrap_or(0);

        if path.as_os_str().is_empty() {
            // the layer's own "./" entry
            continue;
        }
        if is_aufs_metadata(&path) {
            continue;
        }
        if let Some(kind) = classify(&path) {
            entries.push(LayerEntry {
                path,
                kind,
                mode,
                mtime,
            });
            continue;
        }

        let kind = match entry_type {
            EntryType::Regular | EntryType::Continuous | EntryType::GNUSparse => {
                let mut data = Vec::with_capacity(raw.size() as usize);
                raw.read_to_end(&mut data)?;
                EntryKind::File(data)
            }
            EntryType::Directory => EntryKind::Dir,
            EntryType::Symlink => {
                let target = raw
                    .link_name()?
                    .ok_or_else(|| ImageError::Malformed(format!("symlink {} without target", path.display())))?;
                EntryKind::Symlink(target.into_owned())
            }
            EntryType::Link => {
                let target = raw
                    .link_name()?
                    .ok_or_else(|| ImageError::Malformed(format!("hard link {} without target", path.display())))?;
                EntryKind::Hardlink(normalize_path(&target)?)
            }
            EntryType::Char | EntryType::Block | EntryType::Fifo => {
                warn!(
                    "skipping device node or FIFO {} (cannot be recreated unprivileged)",
                    path.display()
                );
                continue;
            }
            other => {
                debug!("skipping tar entry {} of type {:?}", path.display(), other);
                continue;
            }
        };
        entries.push(LayerEntry {
            path,
            kind,
            mode,
            mtime,
        });
    }
    Ok(entries)
}

/// Writes entries as an uncompressed layer tar, preserving their order.
pub fn encode_layer(entries: &[LayerEntry]) -> io::Result<Vec<u8>> {
    let mut builder = Builder::new(Vec::new());
    for e in entries {
        let (entry_type, data, link): (EntryType, &[u8], Option<&Path>) = match &e.kind {
            EntryKind::File(d) => (EntryType::Regular, d, None),
            EntryKind::Dir => (EntryType::Directory, &[], None),
            EntryKind::Symlink(t) => (EntryType::Symlink, &[], Some(t)),
            EntryKind::Hardlink(t) => (EntryType::Link, &[], Some(t)),
            EntryKind::Whiteout | EntryKind::OpaqueMarker => (EntryType::Regular, &[], None),
        };
        append_entry(&mut builder, &e.path, entry_type, e.mode, e.mtime, data, link)?;
    }
    builder.into_inner()
}

/// Appends one ustar entry, preceded by a pax extended header when the path
/// or link target does not fit the ustar fields.
pub(crate) fn append_entry<W: Write>(
    builder: &mut Builder<W>,
    path: &Path,
    entry_type: EntryType,
    mode: u32,
    mtime: u64,
    data: &[u8],
    link: Option<&Path>,
) -> io::Result<()> {
    let mut header = Header::new_ustar();
    header.set_entry_type(entry_type);
    header.set_mode(mode);
    header.set_mtime(mtime);
    header.set_uid(0);
    header.set_gid(0);
    header.set_size(data.len() as u64);

    let mut pax: Vec<(&str, &[u8])> = Vec::new();
    let path_bytes = path.as_os_str().as_bytes();
    if header.set_path(path).is_err() {
        pax.push(("path", path_bytes));
        header.set_path(pax_placeholder(path_bytes))?;
    }
    if let Some(target) = link {
        let target_bytes = target.as_os_str().as_bytes();
        if header.set_link_name(target).is_err() {
            pax.push(("linkpath", target_bytes));
            header.set_link_name(pax_placeholder(target_bytes))?;
        }
    }
    if !pax.is_empty() {
        let records = pax_records(&pax);
        let mut xheader = Header::new_ustar();
        xheader.set_entry_type(EntryType::XHeader);
        xheader.set_path("././@PaxHeader")?;
        xheader.set_mode(0o644);
        xheader.set_mtime(mtime);
        xheader.set_size(records.len() as u64);
        xheader.set_cksum();
        builder.append(&xheader, records.as_slice())?;
    }
    header.set_cksum();
    builder.append(&header, data)
}

fn pax_placeholder(bytes: &[u8]) -> String {
    let lossy = String::from_utf8_lossy(bytes);
    let tail: String = lossy
        .chars()
        .rev()
        .take(90)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .filter(|c| c.is_ascii() && *c != '/')
        .collect();
    if tail.is_empty() {
        "pax-entry".to_string()
    } else {
        tail
    }
}

/// Encodes `"<len> key=value\n"` records, where `<len>` counts the whole record.
fn pax_records(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    for (key, value) in fields {
        let body = key.len() + value.len() + 3; // space, '=', '\n'
        let mut len = body + 1;
        while len != body + len.to_string().len() {
            len = body + len.to_string().len();
        }
        out.extend_from_slice(format!("{len} {key}=").as_bytes());
        out.extend_from_slice(value);
        out.push(b'\n');
    }
    out
}
