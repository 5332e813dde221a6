//! Three-level seccomp-BPF syscall filtering.
//!
//! Level 0 installs nothing. Level 1 whitelists trusted syscalls by
//! number. Level 2 whitelists the same numbers but also pins argument
//! values for the sensitive families (ioctl request codes, socket
//! domains). Anything outside the whitelist kills the process.
//!
//! Raw BPF over prctl/seccomp(2); no library dependency. Filters are
//! compiled separately from installation so a forked probe can install
//! one without allocating.

use std::fmt;

const BPF_LD: u16 = 0x00;
const BPF_JMP: u16 = 0x05;
const BPF_RET: u16 = 0x06;
const BPF_W: u16 = 0x00;
const BPF_ABS: u16 = 0x20;
const BPF_JEQ: u16 = 0x10;
const BPF_K: u16 = 0x00;

const SECCOMP_RET_KILL_PROCESS: u32 = 0x8000_0000;
const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;

const AUDIT_ARCH_X86_64: u32 = 0xc000_003e;

// seccomp_data field offsets.
const OFFSET_NR: u32 = 0;
const OFFSET_ARCH: u32 = 4;
const OFFSET_ARGS: u32 = 16;

const SYS_SECCOMP: libc::c_long = 317;
const SECCOMP_SET_MODE_FILTER: libc::c_uint = 1;
const SECCOMP_FILTER_FLAG_TSYNC: libc::c_ulong = 1;

/// One classic-BPF instruction.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SockFilter {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

#[repr(C)]
struct SockFprog {
    len: libc::c_ushort,
    filter: *const SockFilter,
}

const fn stmt(code: u16, k: u32) -> SockFilter {
    SockFilter { code, jt: 0, jf: 0, k }
}

const fn jump(code: u16, k: u32, jt: u8, jf: u8) -> SockFilter {
    SockFilter { code, jt, jf, k }
}

/// Filtering strictness, straight off the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// No filter installed.
    Disabled,
    /// Whitelist by syscall number only.
    SyscallsOnly,
    /// Whitelist by syscall number plus trusted argument values.
    SyscallsWithArgs,
}

impl Level {
    pub fn from_u8(level: u8) -> Option<Level> {
        match level {
            0 => Some(Level::Disabled),
            1 => Some(Level::SyscallsOnly),
            2 => Some(Level::SyscallsWithArgs),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Level::Disabled => 0,
            Level::SyscallsOnly => 1,
            Level::SyscallsWithArgs => 2,
        }
    }
}

#[derive(Debug)]
pub enum SeccompError {
    /// The kernel rejected the filter (errno).
    FilterRejected(i32),
    /// Filter too large for classic-BPF jump offsets.
    FilterTooLarge,
}

impl fmt::Display for SeccompError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeccompError::FilterRejected(errno) => {
                write!(f, "kernel rejected seccomp filter (errno {errno})")
            }
            SeccompError::FilterTooLarge => write!(f, "seccomp filter exceeds BPF jump range"),
        }
    }
}

impl std::error::Error for SeccompError {}

/// Constrains one syscall argument to a set of allowed values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgRule {
    pub arg_index: u8,
    pub allowed: Vec<u64>,
}

/// Whitelist entry: a syscall, optionally with argument predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRule {
    pub nr: u32,
    pub arg: Option<ArgRule>,
}

/// A complete policy: level plus rules; default action is kill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeccompPolicy {
    pub level: Level,
    pub rules: Vec<SyscallRule>,
}

/// x86_64 syscall numbers used by the whitelist.
pub mod nr {
    pub const READ: u32 = 0;
    pub const WRITE: u32 = 1;
    pub const CLOSE: u32 = 3;
    pub const FSTAT: u32 = 5;
    pub const POLL: u32 = 7;
    pub const LSEEK: u32 = 8;
    pub const MMAP: u32 = 9;
    pub const MPROTECT: u32 = 10;
    pub const MUNMAP: u32 = 11;
    pub const BRK: u32 = 12;
    pub const RT_SIGACTION: u32 = 13;
    pub const RT_SIGPROCMASK: u32 = 14;
    pub const RT_SIGRETURN: u32 = 15;
    pub const IOCTL: u32 = 16;
    pub const PREAD64: u32 = 17;
    pub const PWRITE64: u32 = 18;
    pub const READV: u32 = 19;
    pub const WRITEV: u32 = 20;
    pub const SCHED_YIELD: u32 = 24;
    pub const MREMAP: u32 = 25;
    pub const MADVISE: u32 = 28;
    pub const NANOSLEEP: u32 = 35;
    pub const GETPID: u32 = 39;
    pub const SOCKET: u32 = 41;
    pub const CONNECT: u32 = 42;
    pub const ACCEPT: u32 = 43;
    pub const SENDTO: u32 = 44;
    pub const RECVFROM: u32 = 45;
    pub const SHUTDOWN: u32 = 48;
    pub const BIND: u32 = 49;
    pub const LISTEN: u32 = 50;
    pub const CLONE: u32 = 56;
    pub const EXIT: u32 = 60;
    pub const FCNTL: u32 = 72;
    pub const FSYNC: u32 = 74;
    pub const FDATASYNC: u32 = 75;
    pub const UNLINK: u32 = 87;
    pub const SIGALTSTACK: u32 = 131;
    pub const PRCTL: u32 = 157;
    pub const ARCH_PRCTL: u32 = 158;
    pub const GETTID: u32 = 186;
    pub const FUTEX: u32 = 202;
    pub const SCHED_GETAFFINITY: u32 = 204;
    pub const RESTART_SYSCALL: u32 = 219;
    pub const CLOCK_GETTIME: u32 = 228;
    pub const CLOCK_NANOSLEEP: u32 = 230;
    pub const EXIT_GROUP: u32 = 231;
    pub const EPOLL_WAIT: u32 = 232;
    pub const EPOLL_CTL: u32 = 233;
    pub const TGKILL: u32 = 234;
    pub const OPENAT: u32 = 257;
    pub const UNLINKAT: u32 = 263;
    pub const SET_ROBUST_LIST: u32 = 273;
    pub const EPOLL_PWAIT: u32 = 281;
    pub const ACCEPT4: u32 = 288;
    pub const EVENTFD2: u32 = 290;
    pub const EPOLL_CREATE1: u32 = 291;
    pub const DUP3: u32 = 292;
    pub const PRLIMIT64: u32 = 302;
    pub const GETRANDOM: u32 = 318;
    pub const STATX: u32 = 332;
    pub const RSEQ: u32 = 334;
    pub const CLONE3: u32 = 435;
}

/// ioctl request codes the monitor issues after guest code starts:
/// entering the guest and pulsing interrupt lines.
pub mod ioctl_codes {
    /// KVM_RUN.
    pub const KVM_RUN: u64 = 0xae80;
    /// KVM_IRQ_LINE.
    pub const KVM_IRQ_LINE: u64 = 0x4008_ae61;
}

/// The frozen trusted-syscall set: what the monitor needs from the moment
/// guest code starts (vCPU entry, event loop, device backends, thread
/// spawn/teardown, allocator) — observed under tracing, then pinned here.
fn trusted_syscalls() -> Vec<u32> {
    use nr::*;
    vec![
        READ, WRITE, CLOSE, FSTAT, POLL, LSEEK, MMAP, MPROTECT, MUNMAP, BRK, RT_SIGACTION,
        RT_SIGPROCMASK, RT_SIGRETURN, IOCTL, PREAD64, PWRITE64, READV, WRITEV, SCHED_YIELD,
        MREMAP, MADVISE, NANOSLEEP, GETPID, SOCKET, CONNECT, ACCEPT, SENDTO, RECVFROM, SHUTDOWN,
        BIND, LISTEN, CLONE, EXIT, FCNTL, FSYNC, FDATASYNC, UNLINK, SIGALTSTACK, PRCTL,
        ARCH_PRCTL, GETTID, FUTEX, SCHED_GETAFFINITY, RESTART_SYSCALL, CLOCK_GETTIME,
        CLOCK_NANOSLEEP, EXIT_GROUP, EPOLL_WAIT, EPOLL_CTL, TGKILL, OPENAT, UNLINKAT,
        SET_ROBUST_LIST, EPOLL_PWAIT, ACCEPT4, EVENTFD2, EPOLL_CREATE1, DUP3, PRLIMIT64,
        GETRANDOM, STATX, RSEQ, CLONE3,
    ]
}

/// Builds the policy for a level. Level 0 has no rules (nothing is
/// installed); level 1 lists syscalls with no predicates; level 2 is the
/// same set with the ioctl and socket families argument-pinned.
pub fn policy_for_level(level: Level) -> SeccompPolicy {
    let rules = match level {
        Level::Disabled => Vec::new(),
        Level::SyscallsOnly => trusted_syscalls()
            .into_iter()
            .map(|nr| SyscallRule { nr, arg: None })
            .collect(),
        Level::SyscallsWithArgs => trusted_syscalls()
            .into_iter()
            .map(|number| SyscallRule {
                nr: number,
                arg: match number {
                    nr::IOCTL => Some(ArgRule {
                        arg_index: 1,
                        allowed: vec![ioctl_codes::KVM_RUN, ioctl_codes::KVM_IRQ_LINE],
                    }),
                    nr::SOCKET => Some(ArgRule {
                        arg_index: 0,
                        allowed: vec![libc::AF_UNIX as u64],
                    }),
                    _ => None,
                },
            })
            .collect(),
    };
    SeccompPolicy { level, rules }
}

/// A BPF program ready to install. Installation makes no allocations, so
/// it is safe in a freshly forked child.
#[derive(Debug, Clone)]
pub struct CompiledFilter {
    program: Vec<SockFilter>,
}

/// Compiles a policy to BPF. Returns `None` for level 0: there is nothing
/// to install.
pub fn compile(policy: &SeccompPolicy) -> Result<Option<CompiledFilter>, SeccompError> {
    if policy.level == Level::Disabled {
        return Ok(None);
    }
    let mut program = vec![
        stmt(BPF_LD | BPF_W | BPF_ABS, OFFSET_ARCH),
        jump(BPF_JMP | BPF_JEQ | BPF_K, AUDIT_ARCH_X86_64, 1, 0),
        stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS),
        stmt(BPF_LD | BPF_W | BPF_ABS, OFFSET_NR),
    ];

    for rule in &policy.rules {
        match &rule.arg {
            None => {
                program.push(jump(BPF_JMP | BPF_JEQ | BPF_K, rule.nr, 0, 1));
                program.push(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
            }
            Some(arg) => {
                // Matched-but-rejected arguments fall through with the
                // syscall number reloaded, ending at the default kill.
                let block_len = 5 * arg.allowed.len() + 1;
                if block_len > u8::MAX as usize {
                    return Err(SeccompError::FilterTooLarge);
                }
                program.push(jump(BPF_JMP | BPF_JEQ | BPF_K, rule.nr, 0, block_len as u8));
                let arg_lo = OFFSET_ARGS + 8 * arg.arg_index as u32;
                let arg_hi = arg_lo + 4;
                for value in &arg.allowed {
                    program.push(stmt(BPF_LD | BPF_W | BPF_ABS, arg_lo));
                    program.push(jump(BPF_JMP | BPF_JEQ | BPF_K, *value as u32, 0, 3));
                    program.push(stmt(BPF_LD | BPF_W | BPF_ABS, arg_hi));
                    program.push(jump(BPF_JMP | BPF_JEQ | BPF_K, (*value >> 32) as u32, 0, 1));
                    program.push(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
                }
                program.push(stmt(BPF_LD | BPF_W | BPF_ABS, OFFSET_NR));
            }
        }
    }

    program.push(stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS));
    if program.len() > u16::MAX as usize {
        return Err(SeccompError::FilterTooLarge);
    }
    Ok(Some(CompiledFilter { program }))
}

impl CompiledFilter {
    pub fn instruction_count(&self) -> usize {
        self.program.len()
    }

    pub fn instructions(&self) -> &[SockFilter] {
        &self.program
    }

    /// Installs the filter for the whole thread group. Only raw syscalls;
    /// callable between fork and exec.
    pub fn install(&self) -> Result<(), SeccompError> {
        let prog = SockFprog {
            len: self.program.len() as libc::c_ushort,
            filter: self.program.as_ptr(),
        };
        // SAFETY: no_new_privs takes no pointers.
        let rc = unsafe { libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) };
        if rc != 0 {
            return Err(SeccompError::FilterRejected(errno()));
        }
        // SAFETY: prog points at a live, correctly sized program.
        let rc = unsafe {
            libc::syscall(
                SYS_SECCOMP,
                SECCOMP_SET_MODE_FILTER,
                SECCOMP_FILTER_FLAG_TSYNC,
                &prog as *const SockFprog,
            )
        };
        if rc == 0 {
            return Ok(());
        }
        if errno() == libc::ENOSYS {
            // Old kernel: fall back to prctl (current thread only).
            // SAFETY: same program pointer contract as above.
            let rc = unsafe {
                libc::prctl(
                    libc::PR_SET_SECCOMP,
                    libc::SECCOMP_MODE_FILTER,
                    &prog as *const SockFprog,
                )
            };
            if rc == 0 {
                return Ok(());
            }
        }
        Err(SeccompError::FilterRejected(errno()))
    }
}

/// Compiles and installs the policy for `level`; level 0 is a no-op.
pub fn install_level(level: Level) -> Result<(), SeccompError> {
    match compile(&policy_for_level(level))? {
        Some(filter) => filter.install(),
        None => Ok(()),
    }
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}
