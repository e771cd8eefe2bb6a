use std::fs;
use std::path::Path;

use airlift::archive::{pack, unpack, ArchiveError, PackOptions, RootfsArchive};
use airlift::image::FlattenedRootfs;
use airlift_testkit::gen::tree;
use airlift_testkit::layers::{raw_tar, raw_tar_member};
use airlift_testkit::{gzip, Snapshot};
use proptest::prelude::*;
use tar::EntryType;

fn round_trip(src: &Path, scratch: &Path) -> Snapshot {
    let rootfs = FlattenedRootfs::from_dir(src).unwrap();
    let archive = scratch.join("img.tar.gz");
    let packed = pack(&rootfs, "img", &archive, &PackOptions::default()).unwrap();
    let dest = scratch.join("dest");
    fs::create_dir(&dest).unwrap();
    let reopened = RootfsArchive::open(&archive).unwrap();
    assert_eq!(reopened, packed);
    Snapshot::of(&unpack(&reopened, &dest, false).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn unpack_inverts_pack(t in tree(40)) {
        let scratch = tempfile::tempdir().unwrap();
        let src = scratch.path().join("src");
        fs::create_dir(&src).unwrap();
        t.materialize(&src).unwrap();
        let before = Snapshot::of(&src).unwrap();
        let after = round_trip(&src, scratch.path());
        let diff = before.diff(&after);
        prop_assert!(diff.is_empty(), "{}", diff.join("\n"));
    }

    #[test]
    fn dotdot_members_write_nothing_outside(
        ups in 1usize..4,
        prefix_in_image in any::<bool>(),
        kind in prop::sample::select(vec![EntryType::Regular, EntryType::Symlink, EntryType::Link, EntryType::Directory]),
    ) {
        let name = format!("{}{}evil", if prefix_in_image { "img/" } else { "" }, "../".repeat(ups));
        let link = match kind {
            EntryType::Symlink => Some("/etc/passwd"),
            EntryType::Link => Some("img/a"),
            _ => None,
        };
        let members = vec![
            raw_tar_member("img/", EntryType::Directory, b"", None),
            raw_tar_member("img/a", EntryType::Regular, b"a", None),
            raw_tar_member(&name, kind, if kind == EntryType::Regular { b"pwned" } else { b"" }, link),
        ];
        assert_contained(&gzip(&raw_tar(&members)));
    }
}

/// Unpacks `bytes` into `<scratch>/deep/dest` and checks the attempt failed
/// without touching anything outside `dest`.
fn assert_contained(bytes: &[u8]) {
    let scratch = tempfile::tempdir().unwrap();
    let dest = scratch.path().join("deep/dest");
    fs::create_dir_all(&dest).unwrap();
    let archive = scratch.path().join("evil.tar.gz");
    fs::write(&archive, bytes).unwrap();
    let before = Snapshot::of(scratch.path())
        .unwrap()
        .without("deep/dest")
        .without_dir_mtimes();

    let result = RootfsArchive::open(&archive).and_then(|a| unpack(&a, &dest, false));
    assert!(
        matches!(
            result,
            Err(ArchiveError::PathEscape(_)
                | ArchiveError::HardlinkTarget { .. }
                | ArchiveError::TopLevel(_)
                | ArchiveError::InvalidName(_))
        ),
        "{result:?}"
    );
    let after = Snapshot::of(scratch.path())
        .unwrap()
        .without("deep/dest")
        .without_dir_mtimes();
    assert!(before.diff(&after).is_empty(), "{:?}", before.diff(&after));
    // a failed unpack leaves no partial tree behind
    assert_eq!(fs::read_dir(&dest).unwrap().count(), 0);
}

#[test]
fn absolute_member_is_rejected() {
    let members = vec![
        raw_tar_member("img/", EntryType::Directory, b"", None),
        raw_tar_member("/tmp/airlift-evil", EntryType::Regular, b"x", None),
    ];
    assert_contained(&gzip(&raw_tar(&members)));
    assert!(!Path::new("/tmp/airlift-evil").exists());
}

#[test]
fn write_through_symlink_is_rejected() {
    let members = vec![
        raw_tar_member("img/", EntryType::Directory, b"", None),
        raw_tar_member("img/esc", EntryType::Symlink, b"", Some("../..")),
        raw_tar_member("img/esc/pwned", EntryType::Regular, b"x", None),
    ];
    assert_contained(&gzip(&raw_tar(&members)));
}

#[test]
fn hardlink_to_outside_is_rejected() {
    let members = vec![
        raw_tar_member("img/", EntryType::Directory, b"", None),
        raw_tar_member("img/passwd", EntryType::Link, b"", Some("/etc/passwd")),
    ];
    assert_contained(&gzip(&raw_tar(&members)));
    let members = vec![
        raw_tar_member("img/", EntryType::Directory, b"", None),
        raw_tar_member("img/esc", EntryType::Symlink, b"", Some("/etc")),
        raw_tar_member("img/passwd", EntryType::Link, b"", Some("img/esc/passwd")),
    ];
    assert_contained(&gzip(&raw_tar(&members)));
}

#[test]
fn two_top_level_directories_are_rejected() {
    let members = vec![
        raw_tar_member("img/", EntryType::Directory, b"", None),
        raw_tar_member("other/x", EntryType::Regular, b"x", None),
    ];
    assert_contained(&gzip(&raw_tar(&members)));
}

#[test]
fn collision_and_overwrite() {
    let scratch = tempfile::tempdir().unwrap();
    let src = scratch.path().join("src");
    fs::create_dir_all(src.join("etc")).unwrap();
    fs::write(src.join("etc/v"), "1").unwrap();
    let archive = scratch.path().join("img.tar.gz");
    let a = pack(
        &FlattenedRootfs::from_dir(&src).unwrap(),
        "img",
        &archive,
        &PackOptions::default(),
    )
    .unwrap();
    let dest = scratch.path().join("dest");
    fs::create_dir(&dest).unwrap();
    let target = unpack(&a, &dest, false).unwrap();
    fs::write(target.join("stale"), "").unwrap();
    assert!(matches!(unpack(&a, &dest, false), Err(ArchiveError::DestCollision(_))));
    assert!(target.join("stale").exists());
    unpack(&a, &dest, true).unwrap();
    assert!(!target.join("stale").exists());
    assert_eq!(fs::read_to_string(target.join("etc/v")).unwrap(), "1");
}

#[test]
fn headers_are_normalized() {
    let scratch = tempfile::tempdir().unwrap();
    let src = scratch.path().join("src");
    fs::create_dir(&src).unwrap();
    fs::write(src.join("f"), "x").unwrap();
    let archive = scratch.path().join("img.tar.gz");
    let a = pack(
        &FlattenedRootfs::from_dir(&src).unwrap(),
        "img",
        &archive,
        &PackOptions::default(),
    )
    .unwrap();
    let entries = a.entries().unwrap();
    assert_eq!(entries[0].kind, "dir");
    assert!(
        entries.iter().all(|e| e.path == "img" || e.path.starts_with("img/")),
        "{entries:?}"
    );
    // repacking the same tree is byte-identical
    let again = scratch.path().join("again.tar.gz");
    pack(
        &FlattenedRootfs::from_dir(&src).unwrap(),
        "img",
        &again,
        &PackOptions::default(),
    )
    .unwrap();
    assert_eq!(fs::read(&archive).unwrap(), fs::read(&again).unwrap());
}
