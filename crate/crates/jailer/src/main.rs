//! Jailer binary: builds the confinement as root, drops privileges, and
//! execs into the monitor. Exits nonzero if any step refuses.

mod jail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use jail::{audit, build_jail, drop_and_exec, JailConfig};

#[derive(Debug, Parser)]
#[command(name = "jailer", about = "Confine and launch the micro-VM monitor")]
struct Args {
    /// Monitor binary to copy into the jail and exec.
    #[arg(long = "exec-file")]
    exec_file: PathBuf,

    /// Base directory for per-instance chroots.
    #[arg(long = "chroot-base")]
    chroot_base: PathBuf,

    /// uid the monitor runs as (must be nonzero).
    #[arg(long = "uid")]
    uid: u32,

    /// gid the monitor runs as (must be nonzero).
    #[arg(long = "gid")]
    gid: u32,

    /// Instance id; becomes a path component of the jail.
    #[arg(long = "id")]
    id: String,

    /// Seccomp level handed to the monitor: 0 off, 1 syscalls, 2
    /// syscalls with argument checks.
    #[arg(long = "seccomp-level", default_value_t = 2, value_parser = clap::value_parser!(u8).range(0..=2))]
    seccomp_level: u8,

    /// cgroup v2 limit as key=value (repeatable), e.g.
    /// --cgroup memory.max=268435456.
    #[arg(long = "cgroup")]
    cgroup: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut limits = Vec::new();
    for pair in &args.cgroup {
        match pair.split_once('=') {
            Some((key, value)) => limits.push((key.to_string(), value.to_string())),
            None => {
                eprintln!("--cgroup takes key=value, got {pair:?}");
                return ExitCode::from(2);
            }
        }
    }

    let config = JailConfig {
        exec_file: args.exec_file,
        chroot_base: args.chroot_base,
        uid: args.uid,
        gid: args.gid,
        cgroup_limits: limits,
        seccomp_level: args.seccomp_level,
        instance_id: args.id,
    };

    if config.seccomp_level == 0 {
        audit("seccomp", "level 0: no filter will be installed");
    } else {
        audit("seccomp", &format!("level {} requested", config.seccomp_level));
    }

    if let Err(e) = build_jail(&config, std::path::Path::new("/sys/fs/cgroup")) {
        eprintln!("jailer: {e}");
        return ExitCode::FAILURE;
    }
    // Only returns on failure.
    let error = drop_and_exec(&config);
    eprintln!("jailer: {error}");
    ExitCode::FAILURE
}
