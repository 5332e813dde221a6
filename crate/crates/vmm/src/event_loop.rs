//! The VMM thread's readiness loop.
//!
//! A dispatch table maps opaque tokens to one of five handler kinds. The
//! host readiness facility (epoll, close-on-exec, edge-triggered) wakes the
//! loop; dispatch touches only the ready events, never the whole table.
//! Handlers must drain their source completely on every edge — there is no
//! second wake-up for data that was already readable.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};

/// Opaque registration id; unique per live registration and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token(pub u64);

/// Identifies a device registration: which MMIO slot, which backend fd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceId {
    pub slot: u32,
    pub tag: u32,
}

/// The closed set of handler kinds the loop dispatches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerKind {
    Exit,
    Stdin,
    DeviceHandler(DeviceId),
    VmmActionRequest,
    WriteMetrics,
}

/// Readiness interest for a registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interest {
    pub readable: bool,
    pub writable: bool,
}

impl Interest {
    pub const READABLE: Interest = Interest { readable: true, writable: false };
    pub const WRITABLE: Interest = Interest { readable: false, writable: true };
}

/// What fired for a dispatched event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Readiness {
    pub readable: bool,
    pub writable: bool,
    pub hangup: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum LoopError {
    /// The descriptor is already in the dispatch table.
    DuplicateRegistration(RawFd),
    /// No registration under this token.
    UnknownToken(Token),
    /// Host epoll failure (errno).
    Host(i32),
}

impl fmt::Display for LoopError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopError::DuplicateRegistration(fd) => {
                write!(f, "descriptor {fd} already registered")
            }
            LoopError::UnknownToken(t) => write!(f, "unknown token {}", t.0),
            LoopError::Host(errno) => write!(f, "epoll error (errno {errno})"),
        }
    }
}

impl std::error::Error for LoopError {}

/// Whether the loop keeps going after a handler ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Exit,
}

/// Table mutation requested from inside a handler; applied between
/// dispatch cycles, never mid-cycle.
enum DeferredOp {
    Register { token: Token, fd: RawFd, kind: HandlerKind, interest: Interest },
    Deregister { token: Token },
}

/// Handle handed to handlers for queueing table changes.
pub struct LoopCtl<'a> {
    next_token: &'a mut u64,
    pending: &'a mut Vec<DeferredOp>,
}

impl LoopCtl<'_> {
    /// Queues a registration; the token is live from the next cycle on.
    pub fn register(&mut self, fd: RawFd, kind: HandlerKind, interest: Interest) -> Token {
        let token = Token(*self.next_token);
        *self.next_token += 1;
        self.pending.push(DeferredOp::Register { token, fd, kind, interest });
        token
    }

    /// Queues removal of a registration.
    pub fn deregister(&mut self, token: Token) {
        self.pending.push(DeferredOp::Deregister { token });
    }
}

/// Receives dispatched events.
pub trait LoopHandler {
    fn handle(&mut self, ctl: &mut LoopCtl, token: Token, kind: HandlerKind, ready: Readiness)
        -> Flow;
}

struct Registration {
    fd: RawFd,
    kind: HandlerKind,
}

/// Dispatch table plus the epoll descriptor driving it.
pub struct EventLoop {
    epoll: OwnedFd,
    entries: HashMap<u64, Registration>,
    fd_tokens: HashMap<RawFd, Token>,
    next_token: u64,
    pending: Vec<DeferredOp>,
    /// Events dispatched to handlers, total.
    pub dispatched_events: u64,
    /// Events whose token had no table entry; dropped with this count.
    pub unknown_token_events: u64,
}

const MAX_EVENTS: usize = 64;

impl EventLoop {
    pub fn new() -> io::Result<EventLoop> {
        // SAFETY: epoll_create1 returns a fresh descriptor or -1. The
        // close-on-exec flag keeps it out of exec'd children.
        let fd = unsafe { libc::epoll_create1(libc::EPOLL_CLOEXEC) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(EventLoop {
            // SAFETY: fd is valid and unowned.
            epoll: unsafe { OwnedFd::from_raw_fd(fd) },
            entries: HashMap::new(),
            fd_tokens: HashMap::new(),
            next_token: 0,
            pending: Vec::new(),
            dispatched_events: 0,
            unknown_token_events: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kind_of(&self, token: Token) -> Option<HandlerKind> {
        self.entries.get(&token.0).map(|r| r.kind)
    }

    fn epoll_ctl(&self, op: libc::c_int, fd: RawFd, token: u64, interest: Interest)
        -> Result<(), LoopError>
    {
        let mut events = libc::EPOLLET as u32;
        if interest.readable {
            events |= libc::EPOLLIN as u32;
        }
        if interest.writable {
            events |= libc::EPOLLOUT as u32;
        }
        let mut event = libc::epoll_event { events, u64: token };
        // SAFETY: event is initialized; fd validity is the caller's contract.
        let rc = unsafe { libc::epoll_ctl(self.epoll.as_raw_fd(), op, fd, &mut event) };
        if rc < 0 {
            return Err(LoopError::Host(io::Error::last_os_error().raw_os_error().unwrap_or(0)));
        }
        Ok(())
    }

    /// Arms `fd` edge-triggered and maps the new token to `kind`.
    /// Callable between cycles; handlers use [`LoopCtl::register`].
    pub fn register(&mut self, fd: RawFd, kind: HandlerKind, interest: Interest)
        -> Result<Token, LoopError>
    {
        if self.fd_tokens.contains_key(&fd) {
            return Err(LoopError::DuplicateRegistration(fd));
        }
        let token = Token(self.next_token);
        self.next_token += 1;
        self.epoll_ctl(libc::EPOLL_CTL_ADD, fd, token.0, interest)?;
        self.entries.insert(token.0, Registration { fd, kind });
        self.fd_tokens.insert(fd, token);
        Ok(token)
    }

    /// Inverse of `register`.
    pub fn deregister(&mut self, token: Token) -> Result<(), LoopError> {
        let reg = self
            .entries
            .remove(&token.0)
            .ok_or(LoopError::UnknownToken(token))?;
        self.fd_tokens.remove(&reg.fd);
        // SAFETY: the fd was registered with this epoll instance. It may
        // already be closed; either way the table entry is gone.
        unsafe {
            libc::epoll_ctl(
                self.epoll.as_raw_fd(),
                libc::EPOLL_CTL_DEL,
                reg.fd,
                std::ptr::null_mut(),
            );
        }
        Ok(())
    }

    fn apply_pending(&mut self) {
        let ops = std::mem::take(&mut self.pending);
        for op in ops {
            match op {
                DeferredOp::Register { token, fd, kind, interest } => {
                    if self.fd_tokens.contains_key(&fd) {
                        continue;
                    }
                    if self.epoll_ctl(libc::EPOLL_CTL_ADD, fd, token.0, interest).is_ok() {
                        self.entries.insert(token.0, Registration { fd, kind });
                        self.fd_tokens.insert(fd, token);
                    }
                }
                DeferredOp::Deregister { token } => {
                    let _ = self.deregister(token);
                }
            }
        }
    }

    /// One dispatch cycle: wait up to `timeout_ms` (-1 blocks), invoke the
    /// handler once per ready event, then apply queued table changes.
    /// Returns the number of ready events and whether a handler exited.
    pub fn run_once(
        &mut self,
        timeout_ms: i32,
        handler: &mut dyn LoopHandler,
    ) -> Result<(usize, Flow), LoopError> {
        let mut events = [libc::epoll_event { events: 0, u64: 0 }; MAX_EVENTS];
        // SAFETY: events buffer sized MAX_EVENTS; epoll_wait fills at most that.
        let n = unsafe {
            libc::epoll_wait(
                self.epoll.as_raw_fd(),
                events.as_mut_ptr(),
                MAX_EVENTS as libc::c_int,
                timeout_ms,
            )
        };
        if n < 0 {
            let errno = io::Error::last_os_error().raw_os_error().unwrap_or(0);
            if errno == libc::EINTR {
                return Ok((0, Flow::Continue));
            }
            return Err(LoopError::Host(errno));
        }

        // Resolve tokens first so dispatch cost is O(ready events).
        let mut batch = Vec::with_capacity(n as usize);
        for event in events.iter().take(n as usize) {
            let token = Token(event.u64);
            match self.entries.get(&token.0) {
                Some(reg) => {
                    let ready = Readiness {
                        readable: event.events & libc::EPOLLIN as u32 != 0,
                        writable: event.events & libc::EPOLLOUT as u32 != 0,
                        hangup: event.events
                            & (libc::EPOLLHUP as u32 | libc::EPOLLERR as u32)
                            != 0,
                    };
                    batch.push((token, reg.kind, ready));
                }
                None => self.unknown_token_events += 1,
            }
        }

        let mut flow = Flow::Continue;
        for (token, kind, ready) in batch {
            self.dispatched_events += 1;
            let mut ctl = LoopCtl {
                next_token: &mut self.next_token,
                pending: &mut self.pending,
            };
            if handler.handle(&mut ctl, token, kind, ready) == Flow::Exit {
                flow = Flow::Exit;
                break;
            }
        }
        self.apply_pending();
        Ok((n as usize, flow))
    }

    /// Blocks dispatching events until a handler returns [`Flow::Exit`].
    pub fn run(&mut self, handler: &mut dyn LoopHandler) -> Result<(), LoopError> {
        loop {
            let (_, flow) = self.run_once(-1, handler)?;
            if flow == Flow::Exit {
                return Ok(());
            }
        }
    }
}
