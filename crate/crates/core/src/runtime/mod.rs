//! Unprivileged execution of a command inside an unpacked rootfs.
//!
//! The runtime forks once; the child enters fresh user and mount namespaces,
//! maps the caller's UID/GID onto themselves, bind-mounts host resources,
//! pivots into the rootfs and execs. The parent only waits, so the contained
//! process is a plain child of whoever started the runtime (an MPI launcher,
//! a batch script, a shell) and no daemon is involved.

mod probe;
mod sys;

use std::collections::BTreeMap;
use std::ffi::{CString, OsStr, OsString};
use std::fmt;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Output};
use std::str::FromStr;

use log::{debug, warn};

use crate::image::ImageConfig;

pub use probe::{probe_at, probe_support, SupportReport, DEPTH_ENV};

/// Host directories bound at the same path unless disabled.
pub const DEFAULT_BINDS: &[&str] = &["/dev", "/proc", "/sys"];

const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("unprivileged user namespaces are unavailable: {0}")]
    NoUserNamespaces(String),
    #[error("rootfs {0} does not exist or is not a directory")]
    RootfsMissing(PathBuf),
    #[error("bind source {0} does not exist")]
    BindSourceMissing(PathBuf),
    #[error("bind target {0} is not a plain path inside the container")]
    BindEscape(PathBuf),
    #[error("invalid bind {0:?}: expected SRC[:DST] with an absolute DST")]
    BadBind(String),
    #[error("no command given")]
    EmptyCommand,
    #[error("working directory {0} does not exist in the container")]
    WorkdirMissing(PathBuf),
    #[error("{0}: command not found in the container")]
    ExecNotFound(String),
    #[error("unknown environment policy {0:?} (expected inherit-host, image-config or merged)")]
    BadEnvPolicy(String),
    #[error("container setup failed: {0}")]
    Setup(#[source] io::Error),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

/// Where the contained process's environment comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnvPolicy {
    /// The runtime's own environment, untouched (so MPI launcher variables reach ranks).
    #[default]
    InheritHost,
    /// Only the image's configured environment.
    ImageConfig,
    /// The runtime's environment with the image's variables layered on top.
    Merged,
}

impl EnvPolicy {
    pub const ALL: [EnvPolicy; 3] = [EnvPolicy::InheritHost, EnvPolicy::ImageConfig, EnvPolicy::Merged];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvPolicy::InheritHost => "inherit-host",
            EnvPolicy::ImageConfig => "image-config",
            EnvPolicy::Merged => "merged",
        }
    }
}

impl fmt::Display for EnvPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvPolicy {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        EnvPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| RuntimeError::BadEnvPolicy(s.to_string()))
    }
}

/// A host path made visible inside the container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bind {
    pub source: PathBuf,
    /// Absolute path inside the container.
    pub target: PathBuf,
}

impl Bind {
    pub fn new(source: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        Bind {
            source: source.into(),
            target: target.into(),
        }
    }

    /// Parses `SRC[:DST]`; DST defaults to SRC.
    pub fn parse(s: &str) -> Result<Self> {
        let (src, dst) = match s.split_once(':') {
            Some((src, dst)) => (src, dst),
            None => (s, s),
        };
        if src.is_empty() || !dst.starts_with('/') {
            return Err(RuntimeError::BadBind(s.to_string()));
        }
        Ok(Bind::new(src, dst))
    }
}

impl FromStr for Bind {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        Bind::parse(s)
    }
}

/// Identity mapping of the invoking user into the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityMap {
    pub host_uid: u32,
    pub host_gid: u32,
    pub container_uid: u32,
    pub container_gid: u32,
}

impl IdentityMap {
    pub fn current() -> Self {
        // SAFETY: geteuid/getegid cannot fail.
        let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
        IdentityMap {
            host_uid: uid,
            host_gid: gid,
            container_uid: uid,
            container_gid: gid,
        }
    }

    fn uid_map(&self) -> Vec<u8> {
        format!("{} {} 1\n", self.container_uid, self.host_uid).into_bytes()
    }

    fn gid_map(&self) -> Vec<u8> {
        format!("{} {} 1\n", self.container_gid, self.host_gid).into_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerSpec {
    pub rootfs: PathBuf,
    /// Explicit binds, applied after the default and site binds.
    pub binds: Vec<Bind>,
    /// Bind /dev, /proc, /sys and `$HOME`.
    pub default_binds: bool,
    /// Site directories bound at their host path.
    pub site_binds: Vec<PathBuf>,
    pub env_policy: EnvPolicy,
    /// Defaults to the image's working directory, then `/`.
    pub workdir: Option<PathBuf>,
    pub writable: bool,
    pub command: Vec<OsString>,
    /// Deliver SIGTERM to the contained process if the runtime dies.
    pub die_with_parent: bool,
}

impl ContainerSpec {
    pub fn new<I, S>(rootfs: impl Into<PathBuf>, command: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<OsString>,
    {
        ContainerSpec {
            rootfs: rootfs.into(),
            binds: Vec::new(),
            default_binds: true,
            site_binds: Vec::new(),
            env_policy: EnvPolicy::default(),
            workdir: None,
            writable: false,
            command: command.into_iter().map(Into::into).collect(),
            die_with_parent: true,
        }
    }

    pub fn bind(mut self, bind: Bind) -> Self {
        self.binds.push(bind);
        self
    }

    pub fn writable(mut self, writable: bool) -> Self {
        self.writable = writable;
        self
    }

    pub fn workdir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workdir = Some(dir.into());
        self
    }

    pub fn env_policy(mut self, policy: EnvPolicy) -> Self {
        self.env_policy = policy;
        self
    }

    pub fn default_binds(mut self, on: bool) -> Self {
        self.default_binds = on;
        self
    }

    pub fn site_binds(mut self, dirs: Vec<PathBuf>) -> Self {
        self.site_binds = dirs;
        self
    }
}

fn cstring(bytes: &[u8]) -> Result<CString> {
    CString::new(bytes).map_err(|e| RuntimeError::Setup(io::Error::new(io::ErrorKind::InvalidInput, e)))
}

fn cpath(path: &Path) -> Result<CString> {
    cstring(path.as_os_str().as_bytes())
}

/// Lexically normalized absolute container path, or None if it climbs out.
fn container_path(p: &Path) -> Option<PathBuf> {
    if !p.is_absolute() {
        return None;
    }
    let mut out = PathBuf::from("/");
    for c in p.components() {
        match c {
            Component::RootDir | Component::CurDir => {}
            Component::Normal(n) => out.push(n),
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::Prefix(_) => return None,
        }
    }
    Some(out)
}

/// Host path of `target` inside `rootfs`, refusing symlinked components so a
/// mount can never land outside the image.
fn mountpoint(rootfs: &Path, target: &Path) -> Result<PathBuf> {
    let norm = container_path(target).ok_or_else(|| RuntimeError::BindEscape(target.to_path_buf()))?;
    let mut host = rootfs.to_path_buf();
    for c in norm.components().skip(1) {
        host.push(c);
        match fs::symlink_metadata(&host) {
            Ok(m) if m.file_type().is_symlink() => return Err(RuntimeError::BindEscape(target.to_path_buf())),
            _ => {}
        }
    }
    Ok(host)
}

/// Creates the mount point for `source` (a directory or a file) if missing.
fn ensure_mountpoint(source: &Path, at: &Path) -> io::Result<()> {
    let src_is_dir = fs::metadata(source)?.is_dir();
    match fs::symlink_metadata(at) {
        Ok(m) if m.is_dir() == src_is_dir => Ok(()),
        Ok(_) => Err(io::Error::new(
            io::ErrorKind::AlreadyExists,
            format!(
                "{} exists with a different file type than {}",
                at.display(),
                source.display()
            ),
        )),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            if src_is_dir {
                fs::create_dir_all(at)
            } else {
                if let Some(parent) = at.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::OpenOptions::new().write(true).create_new(true).open(at).map(drop)
            }
        }
        Err(e) => Err(e),
    }
}

fn env_pairs(entries: &[String]) -> Vec<(OsString, OsString)> {
    entries
        .iter()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (OsString::from(k), OsString::from(v)))
        .collect()
}

/// User-namespace depth of the current process (0 = initial namespace).
pub fn current_depth() -> u32 {
    probe::current_depth(Path::new("/proc"))
}

/// A prepared, not yet started container.
pub struct Container {
    command: Command,
    argv0: String,
    identity: IdentityMap,
}

impl fmt::Debug for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Container")
            .field("command", &self.command)
            .field("identity", &self.identity)
            .finish()
    }
}

impl Container {
    /// Validates `spec`, creates mount points and builds the command. Nothing
    /// runs until one of the start methods is called.
    pub fn prepare(spec: &ContainerSpec) -> Result<Self> {
        if spec.command.is_empty() {
            return Err(RuntimeError::EmptyCommand);
        }
        let rootfs = fs::canonicalize(&spec.rootfs)
            .ok()
            .filter(|p| p.is_dir())
            .ok_or_else(|| RuntimeError::RootfsMissing(spec.rootfs.clone()))?;

        // (source, mountpoint, required)
        let mut wanted: Vec<(PathBuf, PathBuf, bool)> = Vec::new();
        if spec.default_binds {
            for d in DEFAULT_BINDS {
                wanted.push((PathBuf::from(d), PathBuf::from(d), false));
            }
            if let Some(home) = std::env::var_os("HOME").filter(|h| !h.is_empty()) {
                let home = PathBuf::from(home);
                if home.is_absolute() && home != Path::new("/") && home.is_dir() {
                    wanted.push((home.clone(), home, false));
                }
            }
        }
        for d in &spec.site_binds {
            wanted.push((d.clone(), d.clone(), true));
        }
        for b in &spec.binds {
            wanted.push((b.source.clone(), b.target.clone(), true));
        }

        let mut binds = Vec::with_capacity(wanted.len());
        let mut bound: Vec<(PathBuf, PathBuf)> = Vec::new();
        for (source, target, required) in wanted {
            let source = match fs::canonicalize(&source) {
                Ok(s) => s,
                Err(_) if required => return Err(RuntimeError::BindSourceMissing(source)),
                Err(_) => continue,
            };
            let at = match mountpoint(&rootfs, &target) {
                Ok(at) => at,
                Err(e) if required => return Err(e),
                Err(e) => {
                    warn!("skipping default bind {}: {e}", target.display());
                    continue;
                }
            };
            if let Err(e) = ensure_mountpoint(&source, &at) {
                if required {
                    return Err(RuntimeError::Setup(e));
                }
                warn!("skipping default bind {}: {e}", target.display());
                continue;
            }
            debug!("bind {} -> {}", source.display(), at.display());
            binds.push((cpath(&source)?, cpath(&at)?));
            bound.push((container_path(&target).unwrap_or(target), source));
        }

        let image = ImageConfig::load(&rootfs)
            .map_err(RuntimeError::Setup)?
            .unwrap_or_default();
        let workdir = spec
            .workdir
            .clone()
            .or_else(|| image.workdir.clone())
            .unwrap_or_else(|| PathBuf::from("/"));
        let workdir = container_path(&workdir).ok_or_else(|| RuntimeError::WorkdirMissing(workdir.clone()))?;
        // the longest bind covering the workdir decides where it lives on the host
        let host_workdir = bound
            .iter()
            .filter(|(t, _)| workdir.starts_with(t))
            .max_by_key(|(t, _)| t.components().count())
            .map(|(t, s)| s.join(workdir.strip_prefix(t).unwrap()))
            .unwrap_or_else(|| rootfs.join(workdir.strip_prefix("/").unwrap()));
        if !host_workdir.is_dir() {
            return Err(RuntimeError::WorkdirMissing(workdir));
        }

        let identity = IdentityMap::current();
        let read_only = !spec.writable;
        let rootfs_c = cpath(&rootfs)?;
        let locked_flags = if read_only {
            sys::locked_flags(&rootfs_c).map_err(RuntimeError::Setup)?
        } else {
            0
        };
        let plan = sys::MountPlan {
            setgroups: cstring(b"/proc/self/setgroups")?,
            uid_map_path: cstring(b"/proc/self/uid_map")?,
            gid_map_path: cstring(b"/proc/self/gid_map")?,
            uid_map: identity.uid_map(),
            gid_map: identity.gid_map(),
            rootfs: rootfs_c,
            binds,
            read_only,
            locked_flags,
            workdir: cpath(&workdir)?,
            die_with_parent: spec.die_with_parent,
            // SAFETY: getpid cannot fail.
            parent_pid: unsafe { libc::getpid() },
        };

        let mut command = Command::new(&spec.command[0]);
        command.args(&spec.command[1..]);
        match spec.env_policy {
            EnvPolicy::InheritHost => {}
            EnvPolicy::ImageConfig => {
                command.env_clear();
                let vars: BTreeMap<_, _> = env_pairs(&image.env).into_iter().collect();
                if !vars.contains_key(OsStr::new("PATH")) {
                    command.env("PATH", DEFAULT_PATH);
                }
                command.envs(vars);
            }
            EnvPolicy::Merged => {
                command.envs(env_pairs(&image.env));
            }
        }
        command.env(DEPTH_ENV, (current_depth() + 1).to_string());
        // SAFETY: enter() only makes raw syscalls on data prepared above.
        unsafe {
            command.pre_exec(move || sys::enter(&plan));
        }

        Ok(Container {
            command,
            argv0: spec.command[0].to_string_lossy().into_owned(),
            identity,
        })
    }

    pub fn identity(&self) -> IdentityMap {
        self.identity
    }

    /// The underlying command, e.g. to redirect stdio before starting.
    pub fn command_mut(&mut self) -> &mut Command {
        &mut self.command
    }

    pub fn spawn(&mut self) -> Result<Child> {
        self.command.spawn().map_err(|e| self.spawn_error(e))
    }

    /// Runs to completion with inherited stdio.
    pub fn status(&mut self) -> Result<ExitStatus> {
        self.command.status().map_err(|e| self.spawn_error(e))
    }

    /// Runs to completion capturing stdout and stderr.
    pub fn output(&mut self) -> Result<Output> {
        self.command.output().map_err(|e| self.spawn_error(e))
    }

    fn spawn_error(&self, e: io::Error) -> RuntimeError {
        match e.raw_os_error() {
            Some(libc::ENOENT) => RuntimeError::ExecNotFound(self.argv0.clone()),
            Some(libc::EPERM | libc::EINVAL | libc::ENOSPC | libc::EUSERS | libc::EACCES) => {
                let report = probe_support();
                match report.reason {
                    Some(reason) if !report.user_namespaces => RuntimeError::NoUserNamespaces(reason),
                    _ => RuntimeError::Setup(e),
                }
            }
            _ => RuntimeError::Setup(e),
        }
    }
}

/// Runs `spec` with inherited stdio and returns the contained process's status.
pub fn run(spec: &ContainerSpec) -> Result<ExitStatus> {
    Container::prepare(spec)?.status()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_parsing() {
        assert_eq!(Bind::parse("/data").unwrap(), Bind::new("/data", "/data"));
        assert_eq!(Bind::parse("/a:/mnt/b").unwrap(), Bind::new("/a", "/mnt/b"));
        assert!(Bind::parse("/a:rel").is_err());
        assert!(Bind::parse(":/x").is_err());
        assert!(Bind::parse("rel").is_err());
    }

    #[test]
    fn env_policy_names_round_trip() {
        for p in EnvPolicy::ALL {
            assert_eq!(p.as_str().parse::<EnvPolicy>().unwrap(), p);
        }
        assert!("host".parse::<EnvPolicy>().is_err());
    }

    #[test]
    fn container_paths_are_normalized() {
        assert_eq!(container_path(Path::new("/a/./b/../c")), Some(PathBuf::from("/a/c")));
        assert_eq!(container_path(Path::new("/..")), None);
        assert_eq!(container_path(Path::new("rel")), None);
    }

    #[test]
    fn symlinked_mountpoints_are_refused() {
        let root = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink("/etc", root.path().join("etc")).unwrap();
        assert!(matches!(
            mountpoint(root.path(), Path::new("/etc/x")),
            Err(RuntimeError::BindEscape(_))
        ));
        assert_eq!(
            mountpoint(root.path(), Path::new("/mnt/x")).unwrap(),
            root.path().join("mnt/x")
        );
    }

    #[test]
    fn prepare_validates_spec() {
        let root = tempfile::tempdir().unwrap();
        let empty: Vec<&str> = vec![];
        assert!(matches!(
            Container::prepare(&ContainerSpec::new(root.path(), empty)),
            Err(RuntimeError::EmptyCommand)
        ));
        assert!(matches!(
            Container::prepare(&ContainerSpec::new(root.path().join("nope"), ["true"])),
            Err(RuntimeError::RootfsMissing(_))
        ));
        let spec = ContainerSpec::new(root.path(), ["true"])
            .default_binds(false)
            .bind(Bind::new(root.path().join("missing"), "/m"));
        assert!(matches!(
            Container::prepare(&spec),
            Err(RuntimeError::BindSourceMissing(_))
        ));
        let spec = ContainerSpec::new(root.path(), ["true"])
            .default_binds(false)
            .workdir("/nowhere");
        assert!(matches!(
            Container::prepare(&spec),
            Err(RuntimeError::WorkdirMissing(_))
        ));
    }

    #[test]
    fn identity_map_is_identity() {
        let id = IdentityMap::current();
        assert_eq!(id.host_uid, id.container_uid);
        assert_eq!(id.host_gid, id.container_gid);
        let line = String::from_utf8(id.uid_map()).unwrap();
        assert_eq!(line, format!("{0} {0} 1\n", id.host_uid));
    }
}
