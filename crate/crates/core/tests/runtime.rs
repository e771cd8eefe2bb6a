use std::fs;
use std::os::unix::process::ExitStatusExt;
use std::path::Path;

use airlift::runtime::{probe_support, run, Bind, Container, ContainerSpec, EnvPolicy, RuntimeError};
use airlift_testkit::hostfs::host_rootfs;
use tempfile::TempDir;

fn rootfs() -> Option<TempDir> {
    let report = probe_support();
    if !report.user_namespaces {
        eprintln!("skipping: {}", report.reason.unwrap_or_default());
        return None;
    }
    let dir = tempfile::tempdir().unwrap();
    host_rootfs(dir.path()).unwrap();
    Some(dir)
}

fn stdout(spec: &ContainerSpec) -> (i32, String, String) {
    let out = Container::prepare(spec).unwrap().output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn hello_world() {
    let Some(root) = rootfs() else { return };
    let spec = ContainerSpec::new(root.path(), ["echo", "container hello world!"]);
    assert_eq!(stdout(&spec), (0, "container hello world!\n".into(), String::new()));
}

#[test]
fn uid_and_gid_are_the_invokers() {
    let Some(root) = rootfs() else { return };
    let (code, out, _) = stdout(&ContainerSpec::new(root.path(), ["id", "-u"]));
    assert_eq!(code, 0);
    assert_eq!(out.trim(), unsafe { libc::geteuid() }.to_string());
    let (_, out, _) = stdout(&ContainerSpec::new(root.path(), ["id", "-g"]));
    assert_eq!(out.trim(), unsafe { libc::getegid() }.to_string());
}

#[test]
fn root_is_the_image() {
    let Some(root) = rootfs() else { return };
    let (_, out, _) = stdout(&ContainerSpec::new(root.path(), ["cat", "/etc/hostname"]));
    assert_eq!(out, "container\n");
}

#[test]
fn no_new_privs_is_set() {
    let Some(root) = rootfs() else { return };
    let (code, out, _) = stdout(&ContainerSpec::new(root.path(), ["cat", "/proc/self/status"]));
    assert_eq!(code, 0);
    let line = out.lines().find(|l| l.starts_with("NoNewPrivs:")).unwrap();
    assert_eq!(line.split_whitespace().nth(1), Some("1"));
}

#[test]
fn read_only_by_default() {
    let Some(root) = rootfs() else { return };
    let (code, _, err) = stdout(&ContainerSpec::new(root.path(), ["touch", "/newfile"]));
    assert_ne!(code, 0);
    assert!(err.contains("Read-only"), "{err}");
    assert!(!root.path().join("newfile").exists());
    let (code, _, _) = stdout(&ContainerSpec::new(root.path(), ["rm", "/etc/hostname"]));
    assert_ne!(code, 0);
    assert!(root.path().join("etc/hostname").exists());
}

#[test]
fn writable_persists_changes() {
    let Some(root) = rootfs() else { return };
    let spec = ContainerSpec::new(root.path(), ["touch", "/newfile"]).writable(true);
    assert_eq!(stdout(&spec).0, 0);
    assert!(root.path().join("newfile").exists());
}

#[test]
fn exit_status_is_propagated() {
    let Some(root) = rootfs() else { return };
    let status = run(&ContainerSpec::new(root.path(), ["sh", "-c", "exit 42"])).unwrap();
    assert_eq!(status.code(), Some(42));
    let status = run(&ContainerSpec::new(root.path(), ["sh", "-c", "kill -TERM $$"])).unwrap();
    assert_eq!(status.signal(), Some(libc::SIGTERM));
}

#[test]
fn stderr_is_separate() {
    let Some(root) = rootfs() else { return };
    let (code, out, err) = stdout(&ContainerSpec::new(root.path(), ["sh", "-c", "echo out; echo err >&2"]));
    assert_eq!((code, out.as_str(), err.as_str()), (0, "out\n", "err\n"));
}

#[test]
fn host_files_outside_binds_are_invisible() {
    let Some(root) = rootfs() else { return };
    let secret_dir = tempfile::tempdir().unwrap();
    let secret = secret_dir.path().join("secret");
    fs::write(&secret, "hunter2").unwrap();
    let spec = ContainerSpec::new(root.path(), ["cat".into(), secret.clone().into_os_string()]);
    let (code, out, _) = stdout(&spec);
    assert_ne!(code, 0);
    assert!(!out.contains("hunter2"));
}

#[test]
fn binds_are_visible_and_writable() {
    let Some(root) = rootfs() else { return };
    let data = tempfile::tempdir().unwrap();
    fs::write(data.path().join("in"), "payload").unwrap();
    let spec = ContainerSpec::new(
        root.path(),
        ["sh", "-c", "cat /mnt/data/in && echo back > /mnt/data/out"],
    )
    .bind(Bind::new(data.path(), "/mnt/data"));
    let (code, out, err) = stdout(&spec);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out, "payload");
    assert_eq!(fs::read_to_string(data.path().join("out")).unwrap(), "back\n");
}

#[test]
fn default_binds_include_proc_and_dev() {
    let Some(root) = rootfs() else { return };
    let (code, _, err) = stdout(&ContainerSpec::new(
        root.path(),
        ["sh", "-c", "test -e /proc/self/status && test -c /dev/null"],
    ));
    assert_eq!(code, 0, "{err}");
    let spec = ContainerSpec::new(root.path(), ["sh", "-c", "test -e /proc/self/status"]).default_binds(false);
    assert_ne!(stdout(&spec).0, 0);
}

#[test]
fn missing_command_is_exec_not_found() {
    let Some(root) = rootfs() else { return };
    let err = run(&ContainerSpec::new(root.path(), ["no-such-tool"])).unwrap_err();
    assert!(
        matches!(err, RuntimeError::ExecNotFound(ref c) if c == "no-such-tool"),
        "{err}"
    );
    // present on the host, absent from the image
    let err = run(&ContainerSpec::new(root.path(), ["/usr/bin/git"])).unwrap_err();
    assert!(matches!(err, RuntimeError::ExecNotFound(_)), "{err}");
}

#[test]
fn workdir_is_honoured() {
    let Some(root) = rootfs() else { return };
    let (_, out, _) = stdout(&ContainerSpec::new(root.path(), ["pwd"]).workdir("/etc"));
    assert_eq!(out, "/etc\n");
}

#[test]
fn env_policies() {
    let Some(root) = rootfs() else { return };
    fs::create_dir_all(root.path().join(".airlift")).unwrap();
    fs::write(
        root.path().join(".airlift/config.json"),
        r#"{"env":["IMAGE_VAR=from-image","SHARED=image"],"workdir":"/tmp"}"#,
    )
    .unwrap();
    // cargo exports CARGO_PKG_NAME to the test process: a stand-in host variable
    let script = "echo ${IMAGE_VAR:-unset} ${CARGO_PKG_NAME:-unset} $(pwd)";
    let go = |p: EnvPolicy| {
        let mut c = Container::prepare(&ContainerSpec::new(root.path(), ["sh", "-c", script]).env_policy(p)).unwrap();
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    assert_eq!(go(EnvPolicy::InheritHost), "unset airlift-core /tmp\n");
    assert_eq!(go(EnvPolicy::ImageConfig), "from-image unset /tmp\n");
    assert_eq!(go(EnvPolicy::Merged), "from-image airlift-core /tmp\n");
}

#[test]
fn nested_depth_is_exported() {
    let Some(root) = rootfs() else { return };
    let (_, out, _) = stdout(&ContainerSpec::new(
        root.path(),
        ["sh", "-c", "echo $AIRLIFT_USERNS_DEPTH"],
    ));
    assert_eq!(out.trim(), (airlift::runtime::current_depth() + 1).to_string());
}

#[test]
fn concurrent_containers_are_independent() {
    let Some(root) = rootfs() else { return };
    let path: &Path = root.path();
    let mut kids: Vec<_> = (0..4)
        .map(|i| {
            let mut c =
                Container::prepare(&ContainerSpec::new(path, ["sh", "-c", &format!("sleep 0.2; exit {i}")])).unwrap();
            c.spawn().unwrap()
        })
        .collect();
    let codes: Vec<_> = kids.iter_mut().map(|k| k.wait().unwrap().code().unwrap()).collect();
    assert_eq!(codes, vec![0, 1, 2, 3]);
}
