//! Jail construction: cgroup limits, chroot population, privilege drop,
//! and the final exec into the monitor binary.
//!
//! Everything privileged happens here, before control ever reaches
//! untrusted code, and each step emits one audit line.

use std::fmt;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Component, Path, PathBuf};

#[derive(Debug)]
pub enum JailError {
    /// Must start as root to build the jail.
    InsufficientPrivilege,
    /// Jail path escapes the chroot base (bad id or symlinked component).
    PathOutsideRoot(String),
    /// uid/gid 0 would keep us root after the drop.
    RootIdsForbidden,
    /// cgroup v2 unified hierarchy not present.
    CgroupUnavailable(PathBuf),
    /// A privileged step failed; names the step.
    Step { step: &'static str, error: io::Error },
    /// exec returned; carries errno.
    ExecFailed(i32),
}

impl fmt::Display for JailError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JailError::InsufficientPrivilege => write!(f, "jailer must run as root"),
            JailError::PathOutsideRoot(why) => write!(f, "jail path escapes root: {why}"),
            JailError::RootIdsForbidden => write!(f, "refusing to keep uid/gid 0"),
            JailError::CgroupUnavailable(p) => {
                write!(f, "cgroup v2 hierarchy not found at {}", p.display())
            }
            JailError::Step { step, error } => write!(f, "{step}: {error}"),
            JailError::ExecFailed(errno) => write!(f, "exec failed (errno {errno})"),
        }
    }
}

impl std::error::Error for JailError {}

fn step(name: &'static str) -> impl FnOnce(io::Error) -> JailError {
    move |error| JailError::Step { step: name, error }
}

/// Everything the jailer needs to confine one monitor instance.
#[derive(Debug, Clone)]
pub struct JailConfig {
    pub exec_file: PathBuf,
    pub chroot_base: PathBuf,
    pub uid: u32,
    pub gid: u32,
    pub cgroup_limits: Vec<(String, String)>,
    pub seccomp_level: u8,
    pub instance_id: String,
}

/// One line per privileged step, to standard error.
pub fn audit(step: &str, detail: &str) {
    eprintln!(
        "{}",
        serde_line(&[("step", step), ("detail", detail)])
    );
}

fn serde_line(fields: &[(&str, &str)]) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("\"{}\":\"{}\"", k, v.replace('"', "'")));
    }
    out.push('}');
    out
}

/// Instance ids become path components; keep them boring.
pub fn validate_instance_id(id: &str) -> Result<(), JailError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(JailError::PathOutsideRoot(format!(
            "instance id {id:?} is not a plain path component"
        )))
    }
}

/// `<chroot_base>/<exec file name>/<id>/root`
pub fn jail_root(config: &JailConfig) -> Result<PathBuf, JailError> {
    validate_instance_id(&config.instance_id)?;
    let exec_name = config
        .exec_file
        .file_name()
        .ok_or_else(|| JailError::PathOutsideRoot("exec file has no name".into()))?;
    if exec_name.as_bytes().contains(&b'/') || exec_name == ".." {
        return Err(JailError::PathOutsideRoot("exec file name escapes".into()));
    }
    Ok(config
        .chroot_base
        .join(exec_name)
        .join(&config.instance_id)
        .join("root"))
}

/// Rejects symlinked components under the chroot base: a planted symlink
/// must not redirect the jail outside its root.
pub fn check_no_symlink_escape(base: &Path, target: &Path) -> Result<(), JailError> {
    let mut current = PathBuf::new();
    for component in target.components() {
        match component {
            Component::ParentDir => {
                return Err(JailError::PathOutsideRoot("'..' in jail path".into()));
            }
            other => current.push(other.as_os_str()),
        }
        if current.starts_with(base) && current != *base {
            if let Ok(meta) = std::fs::symlink_metadata(&current) {
                if meta.file_type().is_symlink() {
                    return Err(JailError::PathOutsideRoot(format!(
                        "{} is a symlink",
                        current.display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// cgroup v2 unified hierarchy manipulation, rooted at an injectable path
/// so the file format is testable without privileges.
pub struct CgroupManager {
    root: PathBuf,
}

impl CgroupManager {
    pub fn new(root: &Path) -> CgroupManager {
        CgroupManager { root: root.to_path_buf() }
    }

    /// v2 only: the unified hierarchy exposes cgroup.controllers at its
    /// root. v1 is not supported.
    pub fn available(&self) -> bool {
        self.root.join("cgroup.controllers").exists()
    }

    /// Creates the per-instance group and applies `key=value` limits,
    /// e.g. `memory.max=268435456`.
    pub fn create(
        &self,
        name: &Path,
        limits: &[(String, String)],
    ) -> Result<PathBuf, JailError> {
        if !self.available() {
            return Err(JailError::CgroupUnavailable(self.root.clone()));
        }
        let group = self.root.join(name);
        std::fs::create_dir_all(&group).map_err(step("create cgroup"))?;
        for (key, value) in limits {
            std::fs::write(group.join(key), value).map_err(step("write cgroup limit"))?;
        }
        Ok(group)
    }

    /// Moves a pid into the group.
    pub fn add_pid(&self, group: &Path, pid: u32) -> Result<(), JailError> {
        std::fs::write(group.join("cgroup.procs"), pid.to_string())
            .map_err(step("join cgroup"))
    }
}

/// The argv the monitor is exec'd with inside the jail.
pub fn exec_argv(config: &JailConfig) -> Vec<String> {
    let exec_name = config
        .exec_file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    vec![
        format!("/{exec_name}"),
        "--api-sock".into(),
        format!("/run/{}.socket", config.instance_id),
        "--seccomp-level".into(),
        config.seccomp_level.to_string(),
        "--id".into(),
        config.instance_id.clone(),
    ]
}

fn mknod_chr(path: &Path, major: u32, minor: u32, uid: u32, gid: u32) -> io::Result<()> {
    let cpath = std::ffi::CString::new(path.as_os_str().as_bytes()).unwrap();
    // SAFETY: path is a NUL-terminated string we own.
    let rc = unsafe {
        libc::mknod(
            cpath.as_ptr(),
            libc::S_IFCHR | 0o600,
            libc::makedev(major, minor),
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: same path, plain chown.
    let rc = unsafe { libc::chown(cpath.as_ptr(), uid, gid) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Builds the confinement: cgroup, populated chroot (monitor binary plus
/// the device nodes it needs), then chroots into it. Runs as root.
pub fn build_jail(config: &JailConfig, cgroup_root: &Path) -> Result<PathBuf, JailError> {
    // SAFETY: geteuid takes nothing.
    if unsafe { libc::geteuid() } != 0 {
        return Err(JailError::InsufficientPrivilege);
    }
    if config.uid == 0 || config.gid == 0 {
        return Err(JailError::RootIdsForbidden);
    }

    let root = jail_root(config)?;
    check_no_symlink_escape(&config.chroot_base, &root)?;

    if !config.cgroup_limits.is_empty() {
        let manager = CgroupManager::new(cgroup_root);
        let name = root
            .parent()
            .and_then(|p| p.strip_prefix(&config.chroot_base).ok())
            .unwrap_or(Path::new("microvm"))
            .to_path_buf();
        let group = manager.create(&name, &config.cgroup_limits)?;
        manager.add_pid(&group, std::process::id())?;
        audit("cgroup", &format!("{} limits applied", group.display()));
    } else {
        audit("cgroup", "no limits requested");
    }

    std::fs::create_dir_all(&root).map_err(step("create jail root"))?;

    // The monitor binary, owned by the jailed user.
    let exec_name = config.exec_file.file_name().unwrap();
    let target = root.join(exec_name);
    std::fs::copy(&config.exec_file, &target).map_err(step("copy monitor binary"))?;
    let ctarget = std::ffi::CString::new(target.as_os_str().as_bytes()).unwrap();
    // SAFETY: NUL-terminated path string.
    unsafe {
        libc::chown(ctarget.as_ptr(), config.uid, config.gid);
        libc::chmod(ctarget.as_ptr(), 0o755);
    }
    audit("chroot-populate", &format!("{}", target.display()));

    // Device nodes the monitor needs inside the jail.
    std::fs::create_dir_all(root.join("dev/net")).map_err(step("create /dev"))?;
    let kvm = root.join("dev/kvm");
    if !kvm.exists() {
        mknod_chr(&kvm, 10, 232, config.uid, config.gid).map_err(step("mknod /dev/kvm"))?;
    }
    let tun = root.join("dev/net/tun");
    if !tun.exists() {
        mknod_chr(&tun, 10, 200, config.uid, config.gid).map_err(step("mknod /dev/net/tun"))?;
    }
    audit("device-nodes", "kvm, net/tun");

    // Writable /run for the control socket.
    let run = root.join("run");
    std::fs::create_dir_all(&run).map_err(step("create /run"))?;
    let crun = std::ffi::CString::new(run.as_os_str().as_bytes()).unwrap();
    // SAFETY: NUL-terminated path string.
    unsafe {
        libc::chown(crun.as_ptr(), config.uid, config.gid);
    }

    let croot = std::ffi::CString::new(root.as_os_str().as_bytes()).unwrap();
    // SAFETY: NUL-terminated path string; we are root.
    let rc = unsafe { libc::chroot(croot.as_ptr()) };
    if rc != 0 {
        return Err(step("chroot")(io::Error::last_os_error()));
    }
    std::env::set_current_dir("/").map_err(step("chdir to new root"))?;
    audit("chroot", &format!("{}", root.display()));
    Ok(root)
}

/// Drops privileges and replaces this process with the monitor. Only
/// returns on failure.
pub fn drop_and_exec(config: &JailConfig) -> JailError {
    // SAFETY: plain id syscalls, checked below.
    unsafe {
        if libc::setgroups(0, std::ptr::null()) != 0 {
            return step("clear supplementary groups")(io::Error::last_os_error());
        }
        if libc::setgid(config.gid) != 0 {
            return step("setgid")(io::Error::last_os_error());
        }
        if libc::setuid(config.uid) != 0 {
            return step("setuid")(io::Error::last_os_error());
        }
        // The drop must be irreversible.
        if libc::setuid(0) == 0 {
            return JailError::RootIdsForbidden;
        }
    }
    audit("drop-privileges", &format!("uid={} gid={}", config.uid, config.gid));

    let argv = exec_argv(config);
    audit("exec", &argv.join(" "));
    let cstrings: Vec<std::ffi::CString> = argv
        .iter()
        .map(|a| std::ffi::CString::new(a.as_str()).unwrap())
        .collect();
    let mut ptrs: Vec<*const libc::c_char> = cstrings.iter().map(|c| c.as_ptr()).collect();
    ptrs.push(std::ptr::null());
    // SAFETY: ptrs is a NULL-terminated array of NUL-terminated strings.
    unsafe {
        libc::execv(ptrs[0], ptrs.as_ptr());
    }
    JailError::ExecFailed(io::Error::last_os_error().raw_os_error().unwrap_or(0))
}
