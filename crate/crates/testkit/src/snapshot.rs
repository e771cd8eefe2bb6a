//! Recursive metadata snapshots of directory trees, for diffing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapKind {
    Dir,
    /// `link_group` is the first path (in sorted order) sharing the inode,
    /// when the file has more than one name in the tree.
    File {
        data: Vec<u8>,
        link_group: Option<PathBuf>,
    },
    Symlink(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapEntry {
    pub kind: SnapKind,
    /// Permission bits; None for symlinks.
    pub mode: Option<u32>,
    pub mtime: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub entries: BTreeMap<PathBuf, SnapEntry>,
}

impl Snapshot {
    /// Walks `root` without following symlinks. The root itself is excluded.
    pub fn of(root: &Path) -> io::Result<Self> {
        let mut entries = BTreeMap::new();
        let mut inodes: HashMap<(u64, u64), PathBuf> = HashMap::new();
        for e in walkdir::WalkDir::new(root).min_depth(1).sort_by_file_name() {
            let e = e.map_err(io::Error::from)?;
            let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
            let m = fs::symlink_metadata(e.path())?;
            let ft = m.file_type();
            let (kind, mode) = if ft.is_dir() {
                (SnapKind::Dir, Some(m.permissions().mode() & 0o7777))
            } else if ft.is_symlink() {
                (SnapKind::Symlink(fs::read_link(e.path())?), None)
            } else if ft.is_file() {
                let link_group =
                    (m.nlink() > 1).then(|| inodes.entry((m.dev(), m.ino())).or_insert_with(|| rel.clone()).clone());
                (
                    SnapKind::File {
                        data: fs::read(e.path())?,
                        link_group,
                    },
                    Some(m.permissions().mode() & 0o7777),
                )
            } else {
                continue;
            };
            entries.insert(
                rel,
                SnapEntry {
                    kind,
                    mode,
                    mtime: Some(m.mtime()),
                },
            );
        }
        // a group of one means the other names live outside the tree
        let mut counts: HashMap<PathBuf, usize> = HashMap::new();
        for e in entries.values() {
            if let SnapKind::File {
                link_group: Some(g), ..
            } = &e.kind
            {
                *counts.entry(g.clone()).or_default() += 1;
            }
        }
        for e in entries.values_mut() {
            if let SnapKind::File { link_group, .. } = &mut e.kind {
                if link_group.as_ref().is_some_and(|g| counts[g] < 2) {
                    *link_group = None;
                }
            }
        }
        Ok(Snapshot { entries })
    }

    pub fn without_dir_mtimes(mut self) -> Self {
        for e in self.entries.values_mut() {
            if e.kind == SnapKind::Dir {
                e.mtime = None;
            }
        }
        self
    }

    pub fn without_mtimes(mut self) -> Self {
        for e in self.entries.values_mut() {
            e.mtime = None;
        }
        self
    }

    pub fn without(mut self, path: &str) -> Self {
        let p = Path::new(path);
        self.entries.retain(|k, _| !k.starts_with(p));
        self
    }

    /// Human-readable differences, empty when equal.
    pub fn diff(&self, other: &Snapshot) -> Vec<String> {
        let mut out = Vec::new();
        for (p, a) in &self.entries {
            match other.entries.get(p) {
                None => out.push(format!("- {}: {}", p.display(), Short(a))),
                Some(b) if a != b => out.push(format!("~ {}: {} != {}", p.display(), Short(a), Short(b))),
                _ => {}
            }
        }
        for (p, b) in &other.entries {
            if !self.entries.contains_key(p) {
                out.push(format!("+ {}: {}", p.display(), Short(b)));
            }
        }
        out
    }
}

struct Short<'a>(&'a SnapEntry);

impl fmt::Display for Short<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0.kind {
            SnapKind::Dir => write!(f, "dir")?,
            SnapKind::File { data, link_group } => {
                write!(
                    f,
                    "file[{}b {:?}]",
                    data.len(),
                    String::from_utf8_lossy(&data[..data.len().min(16)])
                )?;
                if let Some(g) = link_group {
                    write!(f, " link-group {}", g.display())?;
                }
            }
            SnapKind::Symlink(t) => write!(f, "symlink -> {}", t.display())?,
        }
        if let Some(m) = self.0.mode {
            write!(f, " mode {m:o}")?;
        }
        if let Some(t) = self.0.mtime {
            write!(f, " mtime {t}")?;
        }
        Ok(())
    }
}
