//! Confinement probe exec'd in place of the monitor by jail tests.
//!
//! Exits 0 only when properly confined: the secret path from the
//! environment (a file that exists outside the jail) cannot be opened,
//! and the effective uid is not root. Ignores the monitor-style argv the
//! jailer passes.

use std::process::ExitCode;

fn main() -> ExitCode {
    let secret = std::env::var("JAIL_PROBE_SECRET").unwrap_or_else(|_| "/etc/hostname".into());
    // SAFETY: geteuid takes nothing.
    let uid = unsafe { libc::geteuid() };
    let cwd_root = std::env::current_dir()
        .map(|d| d == std::path::Path::new("/"))
        .unwrap_or(false);
    let escaped = std::fs::File::open(&secret).is_ok();

    eprintln!(
        "jail_probe: uid={uid} cwd_is_root={cwd_root} secret_reachable={escaped} ({secret})"
    );
    if !escaped && uid != 0 && cwd_root {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
