//! Namespace entry, run in the forked child before `exec`.
//!
//! Everything here executes between `fork` and `exec` in a possibly
//! multi-threaded parent, so it only makes raw syscalls on data prepared in
//! advance: no allocation, no locks.

use std::ffi::CString;
use std::io;
use std::ptr;

use libc::{c_ulong, c_void};

pub(super) struct MountPlan {
    pub setgroups: CString,
    pub uid_map_path: CString,
    pub gid_map_path: CString,
    pub uid_map: Vec<u8>,
    pub gid_map: Vec<u8>,
    pub rootfs: CString,
    /// (host source, absolute host path of the mount point inside rootfs)
    pub binds: Vec<(CString, CString)>,
    pub read_only: bool,
    /// Flags the kernel locks on the rootfs mount; a remount must repeat them.
    pub locked_flags: c_ulong,
    pub workdir: CString,
    pub die_with_parent: bool,
    pub parent_pid: libc::pid_t,
}

fn check(rc: libc::c_int) -> io::Result<()> {
    if rc == -1 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn write_proc(path: &CString, data: &[u8]) -> io::Result<()> {
    // SAFETY: path is NUL-terminated; data outlives the call.
    unsafe {
        let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CLOEXEC);
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let n = libc::write(fd, data.as_ptr() as *const c_void, data.len());
        let err = io::Error::last_os_error();
        libc::close(fd);
        if n < 0 || n as usize != data.len() {
            return Err(err);
        }
    }
    Ok(())
}

fn mount(source: Option<&CString>, target: &CString, flags: c_ulong) -> io::Result<()> {
    let src = source.map_or(ptr::null(), |s| s.as_ptr());
    // SAFETY: all pointers are NUL-terminated strings or null.
    check(unsafe { libc::mount(src, target.as_ptr(), ptr::null(), flags, ptr::null()) })
}

/// Creates the user and mount namespaces, maps the caller's IDs onto
/// themselves, assembles the mount tree and pivots into the rootfs.
pub(super) fn enter(plan: &MountPlan) -> io::Result<()> {
    // SAFETY: plain syscalls on prepared, NUL-terminated data.
    unsafe {
        check(libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNS))?;
    }
    match write_proc(&plan.setgroups, b"deny") {
        Ok(()) => {}
        // kernels before 3.19 have no setgroups file
        Err(e) if e.raw_os_error() == Some(libc::ENOENT) => {}
        Err(e) => return Err(e),
    }
    write_proc(&plan.uid_map_path, &plan.uid_map)?;
    write_proc(&plan.gid_map_path, &plan.gid_map)?;

    let slash = c"/";
    let dot = c".";
    // SAFETY: as above.
    unsafe {
        check(libc::mount(
            ptr::null(),
            slash.as_ptr(),
            ptr::null(),
            libc::MS_REC | libc::MS_PRIVATE,
            ptr::null(),
        ))?;
    }
    mount(Some(&plan.rootfs), &plan.rootfs, libc::MS_BIND | libc::MS_REC)?;
    for (src, dst) in &plan.binds {
        mount(Some(src), dst, libc::MS_BIND | libc::MS_REC)?;
    }
    if plan.read_only {
        mount(
            None,
            &plan.rootfs,
            libc::MS_REMOUNT | libc::MS_BIND | libc::MS_RDONLY | plan.locked_flags,
        )?;
    }

    // SAFETY: as above. pivot_root(".", ".") stacks the old root on top of
    // the new one; detaching "." then drops it.
    unsafe {
        check(libc::chdir(plan.rootfs.as_ptr()))?;
        check(libc::syscall(libc::SYS_pivot_root, dot.as_ptr(), dot.as_ptr()) as libc::c_int)?;
        check(libc::umount2(dot.as_ptr(), libc::MNT_DETACH))?;
        check(libc::chdir(slash.as_ptr()))?;
        check(libc::chdir(plan.workdir.as_ptr()))?;
        check(libc::prctl(
            libc::PR_SET_NO_NEW_PRIVS,
            1 as c_ulong,
            0 as c_ulong,
            0 as c_ulong,
            0 as c_ulong,
        ))?;
        if plan.die_with_parent {
            // after unshare: credential changes reset the death signal
            check(libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGTERM as c_ulong))?;
            if libc::getppid() != plan.parent_pid {
                return Err(io::Error::from_raw_os_error(libc::ESRCH));
            }
        }
    }
    Ok(())
}

/// Mount flags that an unprivileged bind remount of `path` must preserve.
pub(super) fn locked_flags(path: &CString) -> io::Result<c_ulong> {
    // SAFETY: statvfs writes into the zeroed struct we own.
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    check(unsafe { libc::statvfs(path.as_ptr(), &mut st) })?;
    let f = st.f_flag;
    let mut out: c_ulong = 0;
    for (st_flag, ms_flag) in [
        (libc::ST_NOSUID, libc::MS_NOSUID),
        (libc::ST_NODEV, libc::MS_NODEV),
        (libc::ST_NOEXEC, libc::MS_NOEXEC),
        (libc::ST_NOATIME, libc::MS_NOATIME),
        (libc::ST_NODIRATIME, libc::MS_NODIRATIME),
        (libc::ST_RELATIME, libc::MS_RELATIME),
    ] {
        if f & st_flag != 0 {
            out |= ms_flag;
        }
    }
    Ok(out)
}
