//! proptest strategies for layer stacks and rootfs trees.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};

use filetime::FileTime;
use proptest::prelude::*;
use proptest::sample::select;

use crate::layers::TEntry;

const NAMES: &[&str] = &["a", "b", "c"];
const FILE_MODES: &[u32] = &[0o644, 0o600, 0o755, 0o444, 0o1755];
const DIR_MODES: &[u32] = &[0o755, 0o700, 0o750, 0o1777];
const LINK_TARGETS: &[&str] = &["a", "../b", "/etc/nonexistent", "c/a", "."];

fn path(max_depth: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(select(NAMES), 1..=max_depth).prop_map(|v| v.join("/"))
}

fn mtime() -> impl Strategy<Value = u64> {
    1_000_000_000u64..1_800_000_000
}

fn regular_entry() -> impl Strategy<Value = TEntry> {
    prop_oneof![
        4 => (path(3), prop::collection::vec(any::<u8>(), 0..24), select(FILE_MODES), mtime())
            .prop_map(|(path, data, mode, mtime)| TEntry::File { path, data, mode, mtime }),
        3 => (path(3), select(DIR_MODES), mtime())
            .prop_map(|(path, mode, mtime)| TEntry::Dir { path, mode, mtime }),
        1 => (path(3), select(LINK_TARGETS), mtime())
            .prop_map(|(path, t, mtime)| TEntry::Symlink { path, target: t.to_string(), mtime }),
    ]
}

fn mask_entry() -> impl Strategy<Value = TEntry> {
    prop_oneof![
        3 => path(3).prop_map(|path| TEntry::Whiteout { path }),
        1 => path(2).prop_map(|dir| TEntry::Opaque { dir }),
        1 => Just(TEntry::Opaque { dir: String::new() }),
    ]
}

/// One layer: masks first, then regular entries; at most 10 members.
pub fn layer() -> impl Strategy<Value = Vec<TEntry>> {
    (
        prop::collection::vec(mask_entry(), 0..=3),
        prop::collection::vec(regular_entry(), 0..=7),
    )
        .prop_map(|(mut masks, regular)| {
            masks.extend(regular);
            masks
        })
}

/// 1 to 5 layers, base first; at most 50 members in total.
pub fn layer_stack() -> impl Strategy<Value = Vec<Vec<TEntry>>> {
    prop::collection::vec(layer(), 1..=5)
}

/// Node of a generated rootfs tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Dir {
        mode: u32,
        mtime: u64,
    },
    File {
        data: Vec<u8>,
        mode: u32,
        mtime: u64,
    },
    Symlink {
        target: String,
        mtime: u64,
    },
    /// Another name for the file at this path.
    Hardlink(PathBuf),
}

/// A consistent rootfs: every ancestor is a directory, hard links point at files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    pub nodes: BTreeMap<PathBuf, TreeNode>,
}

const TREE_NAMES: &[&str] = &["a", "b", "c d", "ünï", "bin", ".hidden"];

fn tree_component() -> impl Strategy<Value = String> {
    prop_oneof![
        8 => select(TREE_NAMES).prop_map(str::to_string),
        1 => (100usize..140).prop_map(|n| "l".repeat(n)),
    ]
}

#[derive(Debug, Clone)]
enum Raw {
    Dir(u32, u64),
    File(Vec<u8>, u32, u64),
    Symlink(String, u64),
    Hardlink(usize),
}

fn raw_node() -> impl Strategy<Value = Raw> {
    prop_oneof![
        3 => (select(DIR_MODES), mtime()).prop_map(|(m, t)| Raw::Dir(m, t)),
        4 => (prop::collection::vec(any::<u8>(), 0..64), select(FILE_MODES), mtime())
            .prop_map(|(d, m, t)| Raw::File(d, m, t)),
        1 => (select(LINK_TARGETS), mtime()).prop_map(|(s, t)| Raw::Symlink(s.to_string(), t)),
        1 => any::<usize>().prop_map(Raw::Hardlink),
    ]
}

/// Random non-empty trees of up to `max` nodes, including long names and hard links.
pub fn tree(max: usize) -> impl Strategy<Value = Tree> {
    prop::collection::vec((prop::collection::vec(tree_component(), 1..=3), raw_node()), 1..=max)
        .prop_map(|raw| {
            let mut nodes: BTreeMap<PathBuf, TreeNode> = BTreeMap::new();
            let mut links = Vec::new();
            for (comps, node) in raw {
                let p: PathBuf = comps.iter().collect();
                if nodes.contains_key(&p) {
                    continue;
                }
                // ancestors must be (or become) directories
                let blocked = p
                    .ancestors()
                    .skip(1)
                    .any(|a| nodes.get(a).is_some_and(|n| !matches!(n, TreeNode::Dir { .. })));
                if blocked {
                    continue;
                }
                for a in p.ancestors().skip(1) {
                    if !a.as_os_str().is_empty() {
                        nodes.entry(a.to_path_buf()).or_insert(TreeNode::Dir {
                            mode: 0o755,
                            mtime: 1_500_000_000,
                        });
                    }
                }
                match node {
                    Raw::Dir(m, t) => nodes.insert(p, TreeNode::Dir { mode: m, mtime: t }),
                    Raw::File(d, m, t) => nodes.insert(
                        p,
                        TreeNode::File {
                            data: d,
                            mode: m,
                            mtime: t,
                        },
                    ),
                    Raw::Symlink(s, t) => nodes.insert(p, TreeNode::Symlink { target: s, mtime: t }),
                    Raw::Hardlink(i) => {
                        links.push((p, i));
                        None
                    }
                };
            }
            let files: Vec<PathBuf> = nodes
                .iter()
                .filter(|(_, n)| matches!(n, TreeNode::File { .. }))
                .map(|(p, _)| p.clone())
                .collect();
            for (p, i) in links {
                if files.is_empty() || nodes.contains_key(&p) {
                    continue;
                }
                nodes.insert(p, TreeNode::Hardlink(files[i % files.len()].clone()));
            }
            Tree { nodes }
        })
        // only hard links drawn and no file to point them at
        .prop_filter("a rootfs has at least one entry", |t| !t.nodes.is_empty())
}

impl Tree {
    /// Writes the tree under `root` (which must exist), setting directory
    /// modes and mtimes last so child creation does not disturb them.
    pub fn materialize(&self, root: &Path) -> io::Result<()> {
        for (p, n) in &self.nodes {
            let at = root.join(p);
            match n {
                TreeNode::Dir { .. } => fs::create_dir(&at)?,
                TreeNode::File { data, mode, mtime } => {
                    fs::write(&at, data)?;
                    fs::set_permissions(&at, fs::Permissions::from_mode(*mode))?;
                    filetime::set_file_mtime(&at, FileTime::from_unix_time(*mtime as i64, 0))?;
                }
                TreeNode::Symlink { target, mtime } => {
                    symlink(target, &at)?;
                    let t = FileTime::from_unix_time(*mtime as i64, 0);
                    filetime::set_symlink_file_times(&at, t, t)?;
                }
                TreeNode::Hardlink(_) => {}
            }
        }
        for (p, n) in &self.nodes {
            if let TreeNode::Hardlink(t) = n {
                fs::hard_link(root.join(t), root.join(p))?;
            }
        }
        for (p, n) in self.nodes.iter().rev() {
            if let TreeNode::Dir { mode, mtime } = n {
                let at = root.join(p);
                fs::set_permissions(&at, fs::Permissions::from_mode(*mode))?;
                filetime::set_file_mtime(&at, FileTime::from_unix_time(*mtime as i64, 0))?;
            }
        }
        Ok(())
    }
}
