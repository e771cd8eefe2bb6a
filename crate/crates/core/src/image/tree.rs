use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

use log::warn;

use super::entry::MODE_MASK;
use super::{normalize_path, EntryKind, ImageConfig, ImageError, LayerEntry, Result, IMAGE_CONFIG_PATH};

const DEFAULT_DIR_MODE: u32 = 0o755;

/// Final state of one path in a flattened tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub mode: u32,
    pub mtime: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    File(Vec<u8>),
    Dir,
    Symlink(PathBuf),
    /// Always points at a path holding a [`NodeKind::File`].
    Hardlink(PathBuf),
}

impl NodeKind {
    pub fn is_dir(&self) -> bool {
        matches!(self, NodeKind::Dir)
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::File(_) => "file",
            NodeKind::Dir => "dir",
            NodeKind::Symlink(_) => "symlink",
            NodeKind::Hardlink(_) => "hardlink",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Removal {
    /// Deleted by a whiteout or opaque marker.
    Whiteout,
    /// Replaced by a new entry at the same path.
    Replace,
}

/// A squashed filesystem tree: root-relative path to final node.
///
/// The root itself is implicit. Every stored path has all of its ancestors
/// stored as directories, and no whiteout ever appears.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlattenedRootfs {
    tree: BTreeMap<PathBuf, Node>,
    /// Hard link target -> links pointing at it.
    links: BTreeMap<PathBuf, BTreeSet<PathBuf>>,
}

impl FlattenedRootfs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn get(&self, path: impl AsRef<Path>) -> Option<&Node> {
        self.tree.get(path.as_ref())
    }

    /// Entries in path order; parents always precede their children.
    pub fn iter(&self) -> impl Iterator<Item = (&Path, &Node)> {
        self.tree.iter().map(|(p, n)| (p.as_path(), n))
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.tree.keys().map(|p| p.as_path())
    }

    /// Bytes of regular file content, counting each hard-linked file once.
    pub fn total_size_bytes(&self) -> u64 {
        self.tree
            .values()
            .map(|n| match &n.kind {
                NodeKind::File(d) => d.len() as u64,
                _ => 0,
            })
            .sum()
    }

    /// Content of a regular file, following a hard link if needed.
    pub fn file_data(&self, path: impl AsRef<Path>) -> Option<&[u8]> {
        match &self.tree.get(path.as_ref())?.kind {
            NodeKind::File(d) => Some(d),
            NodeKind::Hardlink(t) => match &self.tree.get(t)?.kind {
                NodeKind::File(d) => Some(d),
                _ => None,
            },
            _ => None,
        }
    }

    /// Applies one layer on top of the current tree.
    ///
    /// Whiteouts and opaque markers act on lower layers only, so they are
    /// applied first; regular entries follow in their original order.
    pub fn apply_layer(&mut self, layer: Vec<LayerEntry>) -> Result<()> {
        let mut entries = Vec::with_capacity(layer.len());
        for mut e in layer {
            e.path = normalize_path(&e.path)?;
            if let EntryKind::Hardlink(t) = &e.kind {
                e.kind = EntryKind::Hardlink(normalize_path(t)?);
            }
            entries.push(e);
        }

        let (masks, regular): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .partition(|e| matches!(e.kind, EntryKind::Whiteout | EntryKind::OpaqueMarker));

        for mask in masks {
            if let Some(victim) = mask.whiteout_target() {
                self.remove_subtree(&victim, Removal::Whiteout)?;
            } else if let Some(dir) = mask.opaque_dir() {
                self.remove_children(&dir, Removal::Whiteout)?;
                if !dir.as_os_str().is_empty() {
                    self.ensure_dir(&dir)?;
                }
            }
        }

        for entry in regular {
            if entry.path.as_os_str().is_empty() {
                continue;
            }
            self.insert_entry(entry)?;
        }
        Ok(())
    }

    fn insert_entry(&mut self, entry: LayerEntry) -> Result<()> {
        let LayerEntry {
            path,
            kind,
            mode,
            mtime,
        } = entry;
        let mode = mode & MODE_MASK;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                self.ensure_dir(parent)?;
            }
        }

        let node = match kind {
            EntryKind::Dir => {
                if let Some(existing) = self.tree.get_mut(&path) {
                    if existing.kind.is_dir() {
                        existing.mode = mode;
                        existing.mtime = mtime;
                        return Ok(());
                    }
                }
                self.remove_subtree(&path, Removal::Replace)?;
                Node {
                    kind: NodeKind::Dir,
                    mode,
                    mtime,
                }
            }
            EntryKind::File(data) => {
                self.remove_subtree(&path, Removal::Replace)?;
                Node {
                    kind: NodeKind::File(data),
                    mode,
                    mtime,
                }
            }
            EntryKind::Symlink(target) => {
                self.remove_subtree(&path, Removal::Replace)?;
                Node {
                    kind: NodeKind::Symlink(target),
                    mode,
                    mtime,
                }
            }
            EntryKind::Hardlink(target) => {
                let resolved = self.resolve_link_target(&path, &target)?;
                if resolved == path {
                    // a link to itself leaves the file as it is
                    return Ok(());
                }
                let (mode, mtime) = {
                    let t = &self.tree[&resolved];
                    (t.mode, t.mtime)
                };
                self.remove_subtree(&path, Removal::Replace)?;
                // the removal may have promoted a link, moving the content
                let resolved = self.resolve_link_target(&path, &resolved)?;
                self.links.entry(resolved.clone()).or_default().insert(path.clone());
                Node {
                    kind: NodeKind::Hardlink(resolved),
                    mode,
                    mtime,
                }
            }
            EntryKind::Whiteout | EntryKind::OpaqueMarker => unreachable!("masks applied first"),
        };
        self.tree.insert(path, node);
        Ok(())
    }

    fn resolve_link_target(&self, link: &Path, target: &Path) -> Result<PathBuf> {
        match self.tree.get(target).map(|n| &n.kind) {
            Some(NodeKind::File(_)) => Ok(target.to_path_buf()),
            Some(NodeKind::Hardlink(t)) => Ok(t.clone()),
            _ => Err(ImageError::HardlinkTargetMissing {
                link: link.to_path_buf(),
                target: target.to_path_buf(),
            }),
        }
    }

    /// Makes `dir` and all its ancestors directories, replacing any
    /// non-directory found on the way.
    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut prefix = PathBuf::new();
        for component in dir.components() {
            prefix.push(component);
            match self.tree.get(&prefix) {
                Some(n) if n.kind.is_dir() => {}
                Some(_) => {
                    self.remove_subtree(&prefix, Removal::Replace)?;
                    self.tree.insert(prefix.clone(), default_dir());
                }
                None => {
                    self.tree.insert(prefix.clone(), default_dir());
                }
            }
        }
        Ok(())
    }

    fn descendants(&self, dir: &Path) -> Vec<PathBuf> {
        use std::ops::Bound::{Excluded, Unbounded};
        self.tree
            .range::<Path, _>((Excluded(dir), Unbounded))
            .map(|(p, _)| p)
            .take_while(|p| dir.as_os_str().is_empty() || p.starts_with(dir))
            .cloned()
            .collect()
    }

    fn remove_subtree(&mut self, path: &Path, cause: Removal) -> Result<()> {
        if !self.tree.contains_key(path) {
            return Ok(());
        }
        let mut doomed = self.descendants(path);
        doomed.push(path.to_path_buf());
        self.remove_all(doomed, cause)
    }

    fn remove_children(&mut self, dir: &Path, cause: Removal) -> Result<()> {
        let doomed = self.descendants(dir);
        self.remove_all(doomed, cause)
    }

    fn remove_all(&mut self, doomed: Vec<PathBuf>, cause: Removal) -> Result<()> {
        let doomed_set: BTreeSet<&PathBuf> = doomed.iter().collect();
        // Files that lose their path while links elsewhere survive.
        let mut orphaned: Vec<(PathBuf, Vec<PathBuf>)> = Vec::new();
        for p in &doomed {
            if let Some(links) = self.links.get(p) {
                let survivors: Vec<PathBuf> = links.iter().filter(|l| !doomed_set.contains(l)).cloned().collect();
                if !survivors.is_empty() {
                    if cause == Removal::Whiteout {
                        return Err(ImageError::HardlinkTargetRemoved {
                            link: survivors[0].clone(),
                            target: p.clone(),
                        });
                    }
                    orphaned.push((p.clone(), survivors));
                }
            }
        }

        let mut removed_nodes = HashMap::new();
        for p in &doomed {
            if let Some(node) = self.tree.remove(p) {
                if let NodeKind::Hardlink(t) = &node.kind {
                    if let Some(set) = self.links.get_mut(t) {
                        set.remove(p);
                        if set.is_empty() {
                            self.links.remove(t);
                        }
                    }
                }
                removed_nodes.insert(p.clone(), node);
            }
        }

        // The first surviving link inherits the content, as an inode would.
        for (target, survivors) in orphaned {
            self.links.remove(&target);
            let node = removed_nodes.remove(&target).expect("orphaned target was removed");
            let (heir, rest) = survivors.split_first().expect("non-empty survivors");
            self.tree.insert(heir.clone(), node);
            for link in rest {
                if let Some(n) = self.tree.get_mut(link) {
                    n.kind = NodeKind::Hardlink(heir.clone());
                }
            }
            if !rest.is_empty() {
                self.links.insert(heir.clone(), rest.iter().cloned().collect());
            }
        }
        Ok(())
    }

    /// Emits the tree as a single layer: non-links in path order, then hard links.
    pub fn to_layer(&self) -> Vec<LayerEntry> {
        let (links, rest): (Vec<_>, Vec<_>) = self
            .tree
            .iter()
            .partition(|(_, n)| matches!(n.kind, NodeKind::Hardlink(_)));
        rest.into_iter()
            .chain(links)
            .map(|(p, n)| LayerEntry {
                path: p.clone(),
                kind: match &n.kind {
                    NodeKind::File(d) => EntryKind::File(d.clone()),
                    NodeKind::Dir => EntryKind::Dir,
                    NodeKind::Symlink(t) => EntryKind::Symlink(t.clone()),
                    NodeKind::Hardlink(t) => EntryKind::Hardlink(t.clone()),
                },
                mode: n.mode,
                mtime: n.mtime,
            })
            .collect()
    }

    /// Stores `config` at [`IMAGE_CONFIG_PATH`] so the runtime can apply it.
    pub fn insert_image_config(&mut self, config: &ImageConfig) -> Result<()> {
        let data = serde_json::to_vec_pretty(config)?;
        self.insert_entry(LayerEntry::file(IMAGE_CONFIG_PATH, data, 0o644))
    }

    /// Reads an unpacked directory tree.
    ///
    /// Files sharing an inode become one [`NodeKind::File`] at the first path
    /// in path order, with hard links at the others. Device nodes, FIFOs and
    /// sockets are skipped.
    pub fn from_dir(root: &Path) -> io::Result<Self> {
        let mut rootfs = Self::new();
        let mut inodes: HashMap<(u64, u64), PathBuf> = HashMap::new();
        let walker = walkdir::WalkDir::new(root)
            .min_depth(1)
            .follow_links(false)
            .sort_by_file_name();
        for entry in walker {
            let entry = entry.map_err(io::Error::from)?;
            let rel = entry
                .path()
                .strip_prefix(root)
                .expect("walkdir stays under root")
                .to_path_buf();
            let meta = entry.path().symlink_metadata()?;
            let mode = meta.permissions().mode() & MODE_MASK;
            let mtime = meta.mtime().max(0) as u64;
            let ft = meta.file_type();
            let kind = if ft.is_dir() {
                NodeKind::Dir
            } else if ft.is_symlink() {
                NodeKind::Symlink(fs::read_link(entry.path())?)
            } else if ft.is_file() {
                let key = (meta.dev(), meta.ino());
                match inodes.get(&key) {
                    Some(first) if meta.nlink() > 1 => NodeKind::Hardlink(first.clone()),
                    _ => {
                        if meta.nlink() > 1 {
                            inodes.insert(key, rel.clone());
                        }
                        NodeKind::File(fs::read(entry.path())?)
                    }
                }
            } else {
                warn!("skipping special file {}", entry.path().display());
                continue;
            };
            if let NodeKind::Hardlink(t) = &kind {
                rootfs.links.entry(t.clone()).or_default().insert(rel.clone());
            }
            rootfs.tree.insert(rel, Node { kind, mode, mtime });
        }
        Ok(rootfs)
    }
}

fn default_dir() -> Node {
    Node {
        kind: NodeKind::Dir,
        mode: DEFAULT_DIR_MODE,
        mtime: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree_of(layers: Vec<Vec<LayerEntry>>) -> Result<FlattenedRootfs> {
        let mut t = FlattenedRootfs::new();
        for l in layers {
            t.apply_layer(l)?;
        }
        Ok(t)
    }

    fn paths(t: &FlattenedRootfs) -> Vec<String> {
        t.paths().map(|p| p.display().to_string()).collect()
    }

    #[test]
    fn overwrite_replaces_content() {
        let t = tree_of(vec![
            vec![LayerEntry::file("a/f", "1", 0o644)],
            vec![LayerEntry::file("a/f", "2", 0o644)],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["a", "a/f"]);
        assert_eq!(t.file_data("a/f").unwrap(), b"2");
    }

    #[test]
    fn whiteout_removes_sibling_only() {
        let t = tree_of(vec![
            vec![LayerEntry::file("a/f", "f", 0o644), LayerEntry::file("a/g", "g", 0o644)],
            vec![LayerEntry::whiteout("a/f")],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["a", "a/g"]);
    }

    #[test]
    fn whiteout_of_directory_is_recursive() {
        let t = tree_of(vec![
            vec![
                LayerEntry::file("d/x/1", "", 0o644),
                LayerEntry::file("d/y", "", 0o644),
                LayerEntry::file("dz", "", 0o644),
            ],
            vec![LayerEntry::whiteout("d")],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["dz"]);
    }

    #[test]
    fn opaque_marker_hides_lower_children() {
        let t = tree_of(vec![
            vec![LayerEntry::file("d/x", "", 0o644), LayerEntry::file("d/y", "", 0o644)],
            vec![LayerEntry::file("d/z", "", 0o644), LayerEntry::opaque("d")],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["d", "d/z"]);
    }

    #[test]
    fn whiteout_of_missing_path_is_noop() {
        let t = tree_of(vec![
            vec![LayerEntry::file("a", "", 0o644)],
            vec![LayerEntry::whiteout("nope/b")],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["a"]);
    }

    #[test]
    fn directory_replaced_by_file_drops_subtree() {
        let t = tree_of(vec![
            vec![LayerEntry::file("d/x", "", 0o644)],
            vec![LayerEntry::file("d", "now a file", 0o600)],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["d"]);
        assert_eq!(t.get("d").unwrap().mode, 0o600);
    }

    #[test]
    fn file_parent_replaced_by_directory() {
        let t = tree_of(vec![
            vec![LayerEntry::file("a", "x", 0o644)],
            vec![LayerEntry::file("a/b", "y", 0o644)],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["a", "a/b"]);
        assert!(t.get("a").unwrap().kind.is_dir());
    }

    #[test]
    fn directory_entry_updates_metadata_keeps_children() {
        let t = tree_of(vec![
            vec![LayerEntry::file("d/x", "", 0o644)],
            vec![LayerEntry::dir("d", 0o700).with_mtime(42)],
        ])
        .unwrap();
        assert_eq!(paths(&t), ["d", "d/x"]);
        assert_eq!(t.get("d").unwrap().mode, 0o700);
        assert_eq!(t.get("d").unwrap().mtime, 42);
    }

    #[test]
    fn setuid_is_stripped() {
        let t = tree_of(vec![vec![LayerEntry::file("su", "", 0o6755)]]).unwrap();
        assert_eq!(t.get("su").unwrap().mode, 0o755);
    }

    #[test]
    fn escaping_entry_is_rejected_before_mutation() {
        let mut t = tree_of(vec![vec![LayerEntry::file("keep", "", 0o644)]]).unwrap();
        let before = t.clone();
        let err = t
            .apply_layer(vec![
                LayerEntry::file("ok", "", 0o644),
                LayerEntry::file("../escape", "", 0o644),
            ])
            .unwrap_err();
        assert!(matches!(err, ImageError::PathEscape(_)));
        assert_eq!(t, before);
    }

    #[test]
    fn hardlink_resolves_and_survives_target_overwrite() {
        let t = tree_of(vec![
            vec![
                LayerEntry::file("bin/a", "old", 0o755),
                LayerEntry::hardlink("bin/b", "bin/a"),
                LayerEntry::hardlink("bin/c", "bin/b"),
            ],
            vec![LayerEntry::file("bin/a", "new", 0o644)],
        ])
        .unwrap();
        assert_eq!(t.file_data("bin/a").unwrap(), b"new");
        // b inherits the old inode content, c now links to b
        assert_eq!(t.get("bin/b").unwrap().kind, NodeKind::File(b"old".to_vec()));
        assert_eq!(t.get("bin/c").unwrap().kind, NodeKind::Hardlink(PathBuf::from("bin/b")));
        assert_eq!(t.get("bin/b").unwrap().mode, 0o755);
    }

    #[test]
    fn hardlink_to_missing_target_is_error() {
        let err = tree_of(vec![vec![LayerEntry::hardlink("b", "a")]]).unwrap_err();
        assert!(matches!(err, ImageError::HardlinkTargetMissing { .. }));
    }

    #[test]
    fn hardlink_to_whited_out_target_is_error() {
        let err = tree_of(vec![
            vec![LayerEntry::file("a", "x", 0o644)],
            vec![LayerEntry::whiteout("a"), LayerEntry::hardlink("b", "a")],
        ])
        .unwrap_err();
        assert!(matches!(err, ImageError::HardlinkTargetMissing { .. }));

        let err = tree_of(vec![
            vec![LayerEntry::file("a", "x", 0o644), LayerEntry::hardlink("b", "a")],
            vec![LayerEntry::whiteout("a")],
        ])
        .unwrap_err();
        assert!(matches!(err, ImageError::HardlinkTargetRemoved { .. }));
    }

    #[test]
    fn whiteout_of_link_and_target_together_is_fine() {
        let t = tree_of(vec![
            vec![LayerEntry::file("d/a", "x", 0o644), LayerEntry::hardlink("d/b", "d/a")],
            vec![LayerEntry::whiteout("d")],
        ])
        .unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn to_layer_refattens_identically() {
        let t = tree_of(vec![
            vec![
                LayerEntry::file("z", "z", 0o644),
                LayerEntry::hardlink("a", "z"),
                LayerEntry::symlink("l", "/z"),
                LayerEntry::dir("e", 0o700),
            ],
            vec![LayerEntry::file("q/r", "r", 0o600)],
        ])
        .unwrap();
        let again = tree_of(vec![t.to_layer()]).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn size_counts_file_content_once() {
        let t = tree_of(vec![vec![
            LayerEntry::file("a", "1234", 0o644),
            LayerEntry::hardlink("b", "a"),
            LayerEntry::symlink("c", "a"),
        ]])
        .unwrap();
        assert_eq!(t.total_size_bytes(), 4);
    }

    #[test]
    fn image_config_is_stored_as_file() {
        let mut t = FlattenedRootfs::new();
        let cfg = ImageConfig {
            env: vec!["A=1".into()],
            workdir: Some("/w".into()),
        };
        t.insert_image_config(&cfg).unwrap();
        let stored: ImageConfig = serde_json::from_slice(t.file_data(IMAGE_CONFIG_PATH).unwrap()).unwrap();
        assert_eq!(stored, cfg);
        assert!(t.get(".airlift").unwrap().kind.is_dir());
    }
}
