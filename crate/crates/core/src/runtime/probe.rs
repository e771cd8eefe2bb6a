use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

/// Environment variable carrying the user-namespace depth into containers.
pub const DEPTH_ENV: &str = "AIRLIFT_USERNS_DEPTH";

const SYSCTL_USERNS_CLONE: &str = "kernel.unprivileged_userns_clone";
const SYSCTL_MAX_USERNS: &str = "user.max_user_namespaces";
const SYSCTL_APPARMOR: &str = "kernel.apparmor_restrict_unprivileged_userns";

/// What the running kernel offers for unprivileged containers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SupportReport {
    pub user_namespaces: bool,
    /// Why user namespaces are unavailable, naming the sysctl when one is responsible.
    pub reason: Option<String>,
    pub kernel_release: Option<String>,
    pub max_user_namespaces: Option<u64>,
    /// Lines accepted in a uid_map (5 before Linux 4.15, 340 after).
    pub max_uid_map_lines: u32,
    pub overlay_available: bool,
    /// 0 in the initial user namespace.
    pub nesting_depth: u32,
}

impl SupportReport {
    pub fn is_nested(&self) -> bool {
        self.nesting_depth > 0
    }
}

impl fmt::Display for SupportReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        writeln!(f, "user namespaces: {}", yes_no(self.user_namespaces))?;
        if let Some(r) = &self.reason {
            writeln!(f, "reason: {r}")?;
        }
        if let Some(k) = &self.kernel_release {
            writeln!(f, "kernel: {k}")?;
        }
        match self.max_user_namespaces {
            Some(n) => writeln!(f, "max user namespaces: {n}")?,
            None => writeln!(f, "max user namespaces: unknown")?,
        }
        writeln!(f, "max uid map lines: {}", self.max_uid_map_lines)?;
        writeln!(f, "overlay: {}", yes_no(self.overlay_available))?;
        write!(f, "nesting depth: {}", self.nesting_depth)?;
        if self.nesting_depth > 0 {
            write!(f, " (inside a user namespace)")?;
        }
        Ok(())
    }
}

fn read_trimmed(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn parse_release(release: &str) -> Option<(u32, u32)> {
    let mut parts = release.split(|c: char| !c.is_ascii_digit());
    let major = parts.next()?.parse().ok()?;
    let minor = parts.next()?.parse().ok()?;
    Some((major, minor))
}

/// True when `uid_map` is the initial namespace's identity map of all IDs.
fn is_initial_map(uid_map: &str) -> bool {
    let fields: Vec<&str> = uid_map.split_whitespace().collect();
    fields == ["0", "0", "4294967295"]
}

/// 0 in the initial user namespace; otherwise the depth our runtime recorded,
/// or 1 when some other tool created the namespace.
pub(super) fn current_depth(proc_root: &Path) -> u32 {
    match read_trimmed(&proc_root.join("self/uid_map")) {
        Some(m) if !is_initial_map(&m) => std::env::var(DEPTH_ENV)
            .ok()
            .and_then(|d| d.parse::<u32>().ok())
            .filter(|&d| d > 0)
            .unwrap_or(1),
        _ => 0,
    }
}

/// Inspects `/proc` and tries a throwaway user namespace.
pub fn probe_support() -> SupportReport {
    probe_at(Path::new("/proc"), try_unshare_user)
}

/// Like [`probe_support`] against an arbitrary proc tree; `attempt` performs
/// the live check and returns the errno on failure.
pub fn probe_at(proc_root: &Path, attempt: impl FnOnce() -> Result<(), i32>) -> SupportReport {
    let sys = proc_root.join("sys");
    let kernel_release = read_trimmed(&sys.join("kernel/osrelease"));
    let max_user_namespaces = read_trimmed(&sys.join("user/max_user_namespaces")).and_then(|s| s.parse::<u64>().ok());
    let userns_clone = read_trimmed(&sys.join("kernel/unprivileged_userns_clone"));
    let apparmor = read_trimmed(&sys.join("kernel/apparmor_restrict_unprivileged_userns"));
    let overlay_available = fs::read_to_string(proc_root.join("filesystems"))
        .map(|s| s.lines().any(|l| l.split_whitespace().last() == Some("overlay")))
        .unwrap_or(false);
    let max_uid_map_lines = match kernel_release.as_deref().and_then(parse_release) {
        Some(v) if v < (4, 15) => 5,
        _ => 340,
    };
    let nesting_depth = current_depth(proc_root);

    let mut reason = None;
    if let Some(v) = kernel_release.as_deref().and_then(parse_release) {
        if v < (3, 8) {
            reason = Some(format!("kernel {}.{} predates user namespaces (3.8)", v.0, v.1));
        }
    }
    if reason.is_none() && userns_clone.as_deref() == Some("0") {
        reason = Some(format!(
            "sysctl {SYSCTL_USERNS_CLONE} = 0; ask an administrator to set it to 1"
        ));
    }
    if reason.is_none() && max_user_namespaces == Some(0) {
        reason = Some(format!(
            "sysctl {SYSCTL_MAX_USERNS} = 0; ask an administrator to raise it"
        ));
    }
    if reason.is_none() {
        if let Err(errno) = attempt() {
            let err = std::io::Error::from_raw_os_error(errno);
            reason = Some(if apparmor.as_deref() == Some("1") {
                format!("creating a user namespace failed ({err}); sysctl {SYSCTL_APPARMOR} = 1")
            } else {
                format!("creating a user namespace failed ({err})")
            });
        }
    }

    SupportReport {
        user_namespaces: reason.is_none(),
        reason,
        kernel_release,
        max_user_namespaces,
        max_uid_map_lines,
        overlay_available,
        nesting_depth,
    }
}

/// Forks a child that only calls `unshare(CLONE_NEWUSER)` and exits.
fn try_unshare_user() -> Result<(), i32> {
    // SAFETY: the child makes only async-signal-safe calls before _exit.
    unsafe {
        let pid = libc::fork();
        if pid < 0 {
            return Err(*libc::__errno_location());
        }
        if pid == 0 {
            let rc = libc::unshare(libc::CLONE_NEWUSER);
            let code = if rc == 0 { 0 } else { *libc::__errno_location() };
            libc::_exit(code.clamp(0, 255));
        }
        let mut status = 0;
        loop {
            if libc::waitpid(pid, &mut status, 0) == pid {
                break;
            }
            if *libc::__errno_location() != libc::EINTR {
                return Err(*libc::__errno_location());
            }
        }
        if libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0 {
            Ok(())
        } else if libc::WIFEXITED(status) {
            Err(libc::WEXITSTATUS(status))
        } else {
            Err(libc::ECHILD)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_proc(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (rel, content) in files {
            let p = dir.path().join(rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, content).unwrap();
        }
        dir
    }

    #[test]
    fn disabled_sysctl_is_named() {
        let proc_dir = fake_proc(&[
            ("sys/kernel/osrelease", "5.10.0-amd64\n"),
            ("sys/kernel/unprivileged_userns_clone", "0\n"),
            ("sys/user/max_user_namespaces", "63000\n"),
            ("self/uid_map", "         0          0 4294967295\n"),
        ]);
        let report = probe_at(proc_dir.path(), || panic!("must not attempt"));
        assert!(!report.user_namespaces);
        assert!(report
            .reason
            .as_deref()
            .unwrap()
            .contains("kernel.unprivileged_userns_clone"));
        assert_eq!(report.nesting_depth, 0);
    }

    #[test]
    fn zero_namespace_limit_is_named() {
        let proc_dir = fake_proc(&[("sys/user/max_user_namespaces", "0\n")]);
        let report = probe_at(proc_dir.path(), || Ok(()));
        assert!(!report.user_namespaces);
        assert!(report.reason.unwrap().contains("user.max_user_namespaces"));
    }

    #[test]
    fn supporting_kernel_reports_available() {
        let proc_dir = fake_proc(&[
            ("sys/kernel/osrelease", "6.1.0\n"),
            ("sys/user/max_user_namespaces", "1000\n"),
            ("filesystems", "nodev\tsysfs\nnodev\toverlay\n"),
            ("self/uid_map", "0 0 4294967295\n"),
        ]);
        let report = probe_at(proc_dir.path(), || Ok(()));
        assert!(report.user_namespaces, "{report}");
        assert!(report.overlay_available);
        assert_eq!(report.max_uid_map_lines, 340);
        assert_eq!(report.max_user_namespaces, Some(1000));
    }

    #[test]
    fn failed_attempt_is_reported() {
        let proc_dir = fake_proc(&[("sys/kernel/osrelease", "4.4.0\n")]);
        let report = probe_at(proc_dir.path(), || Err(libc::EPERM));
        assert!(!report.user_namespaces);
        assert_eq!(report.max_uid_map_lines, 5);
        assert!(report.reason.unwrap().contains("failed"));
    }

    #[test]
    fn old_kernel_is_rejected() {
        let proc_dir = fake_proc(&[("sys/kernel/osrelease", "3.2.0\n")]);
        let report = probe_at(proc_dir.path(), || Ok(()));
        assert!(!report.user_namespaces);
        assert!(report.reason.unwrap().contains("3.8"));
    }

    #[test]
    fn non_identity_map_means_nested() {
        let proc_dir = fake_proc(&[("self/uid_map", "1000 1000 1\n")]);
        let report = probe_at(proc_dir.path(), || Ok(()));
        assert!(report.is_nested());
    }

    #[test]
    fn live_probe_does_not_panic() {
        let report = probe_support();
        assert!(report.kernel_release.is_some());
    }
}
