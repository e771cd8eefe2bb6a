use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use tar::{Builder, EntryType, Header};

/// A layer member as a test describes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TEntry {
    File {
        path: String,
        data: Vec<u8>,
        mode: u32,
        mtime: u64,
    },
    Dir {
        path: String,
        mode: u32,
        mtime: u64,
    },
    Symlink {
        path: String,
        target: String,
        mtime: u64,
    },
    Hardlink {
        path: String,
        target: String,
    },
    /// Deletes `path` from lower layers.
    Whiteout {
        path: String,
    },
    /// Hides lower-layer children of `dir` ("" for the root).
    Opaque {
        dir: String,
    },
}

impl TEntry {
    pub fn file(path: &str, data: &str, mode: u32) -> Self {
        TEntry::File {
            path: path.into(),
            data: data.as_bytes().to_vec(),
            mode,
            mtime: 1_700_000_000,
        }
    }

    pub fn dir(path: &str, mode: u32) -> Self {
        TEntry::Dir {
            path: path.into(),
            mode,
            mtime: 1_700_000_000,
        }
    }

    pub fn symlink(path: &str, target: &str) -> Self {
        TEntry::Symlink {
            path: path.into(),
            target: target.into(),
            mtime: 1_700_000_000,
        }
    }

    pub fn hardlink(path: &str, target: &str) -> Self {
        TEntry::Hardlink {
            path: path.into(),
            target: target.into(),
        }
    }

    pub fn whiteout(path: &str) -> Self {
        TEntry::Whiteout { path: path.into() }
    }

    pub fn opaque(dir: &str) -> Self {
        TEntry::Opaque { dir: dir.into() }
    }

    /// Member name as it appears in the tar.
    pub fn tar_path(&self) -> PathBuf {
        match self {
            TEntry::File { path, .. }
            | TEntry::Dir { path, .. }
            | TEntry::Symlink { path, .. }
            | TEntry::Hardlink { path, .. } => PathBuf::from(path),
            TEntry::Whiteout { path } => {
                let p = Path::new(path);
                let name = p.file_name().expect("whiteout of a named path").to_string_lossy();
                p.with_file_name(format!(".wh.{name}"))
            }
            TEntry::Opaque { dir } => Path::new(dir).join(".wh..wh..opq"),
        }
    }
}

fn header(kind: EntryType, mode: u32, mtime: u64, size: u64) -> Header {
    let mut h = Header::new_ustar();
    h.set_entry_type(kind);
    h.set_mode(mode);
    h.set_mtime(mtime);
    h.set_uid(0);
    h.set_gid(0);
    h.set_size(size);
    h
}

/// Uncompressed tar of `entries`, in the given order.
pub fn layer_tar(entries: &[TEntry]) -> Vec<u8> {
    let mut b = Builder::new(Vec::new());
    for e in entries {
        let path = e.tar_path();
        match e {
            TEntry::File { data, mode, mtime, .. } => {
                let mut h = header(EntryType::Regular, *mode, *mtime, data.len() as u64);
                b.append_data(&mut h, &path, data.as_slice()).unwrap();
            }
            TEntry::Dir { mode, mtime, .. } => {
                let mut h = header(EntryType::Directory, *mode, *mtime, 0);
                b.append_data(&mut h, &path, std::io::empty()).unwrap();
            }
            TEntry::Symlink { target, mtime, .. } => {
                let mut h = header(EntryType::Symlink, 0o777, *mtime, 0);
                b.append_link(&mut h, &path, target).unwrap();
            }
            TEntry::Hardlink { target, .. } => {
                let mut h = header(EntryType::Link, 0o644, 0, 0);
                b.append_link(&mut h, &path, target).unwrap();
            }
            TEntry::Whiteout { .. } | TEntry::Opaque { .. } => {
                let mut h = header(EntryType::Regular, 0o644, 0, 0);
                b.append_data(&mut h, &path, std::io::empty()).unwrap();
            }
        }
    }
    b.into_inner().unwrap()
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut gz = GzEncoder::new(Vec::new(), Compression::fast());
    gz.write_all(bytes).unwrap();
    gz.finish().unwrap()
}

/// A raw tar whose single member is named `name` verbatim, bypassing the
/// `tar` crate's path checks (for `..` and absolute-path attacks).
pub fn raw_tar_member(name: &str, kind: EntryType, data: &[u8], link: Option<&str>) -> Vec<u8> {
    let mut h = header(kind, 0o644, 0, data.len() as u64);
    {
        let old = h.as_old_mut();
        old.name = [0; 100];
        old.name[..name.len()].copy_from_slice(name.as_bytes());
        if let Some(l) = link {
            old.linkname = [0; 100];
            old.linkname[..l.len()].copy_from_slice(l.as_bytes());
        }
    }
    h.set_cksum();
    let mut out = h.as_bytes().to_vec();
    out.extend_from_slice(data);
    out.resize(out.len().div_ceil(512) * 512, 0);
    out
}

/// Concatenates raw members and appends the end-of-archive marker.
pub fn raw_tar(members: &[Vec<u8>]) -> Vec<u8> {
    let mut out: Vec<u8> = members.concat();
    out.extend_from_slice(&[0u8; 1024]);
    out
}
