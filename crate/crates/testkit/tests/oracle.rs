use std::fs;
use std::path::Path;

use airlift_testkit::oracle::extract_sequential;
use airlift_testkit::{layer_tar, SnapKind, Snapshot, TEntry};

fn apply(layers: &[Vec<TEntry>]) -> (tempfile::TempDir, Snapshot) {
    let dir = tempfile::tempdir().unwrap();
    let tars: Vec<_> = layers.iter().map(|l| layer_tar(l)).collect();
    extract_sequential(dir.path(), &tars).unwrap();
    let snap = Snapshot::of(dir.path()).unwrap();
    (dir, snap)
}

fn names(s: &Snapshot) -> Vec<String> {
    s.entries.keys().map(|p| p.display().to_string()).collect()
}

#[test]
fn whiteout_removes_lower_entry() {
    let (_d, s) = apply(&[
        vec![TEntry::file("a/x", "1", 0o644), TEntry::file("b", "2", 0o644)],
        vec![TEntry::whiteout("a/x"), TEntry::whiteout("b")],
    ]);
    assert_eq!(names(&s), ["a"]);
}

#[test]
fn opaque_marker_clears_directory() {
    let (_d, s) = apply(&[
        vec![TEntry::file("a/x", "1", 0o644), TEntry::file("a/y", "1", 0o644)],
        vec![TEntry::opaque("a"), TEntry::file("a/z", "3", 0o600)],
    ]);
    assert_eq!(names(&s), ["a", "a/z"]);
    assert_eq!(s.entries[Path::new("a/z")].mode, Some(0o600));
}

#[test]
fn file_replaces_directory_and_back() {
    let (_d, s) = apply(&[
        vec![TEntry::file("a/x", "1", 0o644)],
        vec![TEntry::file("a", "now a file", 0o644)],
        vec![TEntry::file("a/y", "dir again", 0o644)],
    ]);
    assert_eq!(names(&s), ["a", "a/y"]);
}

#[test]
fn whiteout_below_a_non_directory_is_a_no_op() {
    let (_d, s) = apply(&[vec![TEntry::file("a", "f", 0o644)], vec![TEntry::whiteout("a/x")]]);
    assert_eq!(names(&s), ["a"]);
}

#[test]
fn snapshot_sees_hardlinks_symlinks_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("f"), "x").unwrap();
    fs::hard_link(dir.path().join("f"), dir.path().join("g")).unwrap();
    std::os::unix::fs::symlink("f", dir.path().join("l")).unwrap();
    let s = Snapshot::of(dir.path()).unwrap();
    let group = |p: &str| match &s.entries[Path::new(p)].kind {
        SnapKind::File { link_group, .. } => link_group.clone(),
        k => panic!("{k:?}"),
    };
    assert!(group("f").is_some() && group("f") == group("g"));
    assert!(matches!(s.entries[Path::new("l")].kind, SnapKind::Symlink(_)));

    let before = s.clone();
    fs::write(dir.path().join("h"), "new").unwrap();
    let diff = before.diff(&Snapshot::of(dir.path()).unwrap());
    assert_eq!(diff.len(), 1, "{diff:?}");
    assert!(diff[0].contains('h'));
}
