//! Virtio network device bridged to a host tap interface.
//!
//! Two queues: guest receive (0) and transmit (1). Transmit chains are
//! written to the tap one frame at a time, minus the 12-byte virtio-net
//! header; received tap frames get a zeroed header prepended. Frames are
//! never reordered within a queue; a tap that will not accept a frame
//! defers it rather than dropping it, while a guest with no receive
//! buffers drops incoming frames and counts them.

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};

use crate::virtio::mmio::QueueCtx;
use crate::virtio::{
    BackendFdUpdate, DeviceError, VirtioDevice, VirtioDeviceType, BACKEND_EVENT_WRITABLE,
    VIRTIO_F_VERSION_1,
};

/// Virtio-net header: the no-merge-buffers, no-offload variant.
pub const NET_HDR_LEN: usize = 12;
const QUEUE_SIZE: u16 = 256;
const RX_QUEUE: usize = 0;
const TX_QUEUE: usize = 1;
const MAX_FRAME: usize = 65536;

const VIRTIO_NET_F_MAC: u64 = 1 << 5;

/// Backend event tags used in the dispatch table.
pub const NET_TAG_RX: u32 = 0;
pub const NET_TAG_TX_WRITABLE: u32 = NET_TAG_RX | BACKEND_EVENT_WRITABLE;

#[derive(Debug, Default, Clone, Copy)]
pub struct NetCounters {
    pub tx_frames: u64,
    pub tx_deferred: u64,
    pub rx_frames: u64,
    pub rx_dropped: u64,
    pub tx_errors: u64,
}

/// Nonblocking frame-oriented host backend: a tap device in production, a
/// datagram socketpair end in tests.
pub struct NetBackend {
    fd: OwnedFd,
}

impl NetBackend {
    /// Opens the named host tap interface.
    pub fn open_tap(name: &str) -> io::Result<NetBackend> {
        const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
        const IFF_TAP: libc::c_short = 0x0002;
        const IFF_NO_PI: libc::c_short = 0x1000;

        #[repr(C)]
        struct IfReq {
            name: [u8; libc::IFNAMSIZ],
            flags: libc::c_short,
            pad: [u8; 22],
        }

        if name.len() >= libc::IFNAMSIZ {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "tap name too long"));
        }
        // SAFETY: standard open of the tun control node.
        let raw = unsafe {
            libc::open(
                c"/dev/net/tun".as_ptr(),
                libc::O_RDWR | libc::O_NONBLOCK | libc::O_CLOEXEC,
            )
        };
        if raw < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: raw is a fresh descriptor we own.
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };

        let mut req = IfReq {
            name: [0; libc::IFNAMSIZ],
            flags: IFF_TAP | IFF_NO_PI,
            pad: [0; 22],
        };
        req.name[..name.len()].copy_from_slice(name.as_bytes());
        // SAFETY: req is a properly sized ifreq for TUNSETIFF.
        let rc = unsafe { libc::ioctl(fd.as_raw_fd(), TUNSETIFF, &req) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(NetBackend { fd })
    }

    /// Wraps an existing frame-oriented descriptor (tests use a datagram
    /// socketpair, which preserves frame boundaries like a tap).
    pub fn from_fd(fd: OwnedFd) -> io::Result<NetBackend> {
        crate::sys::set_nonblocking(fd.as_raw_fd())?;
        Ok(NetBackend { fd })
    }

    fn read_frame(&self, buf: &mut [u8]) -> io::Result<usize> {
        // SAFETY: buf bounds passed explicitly.
        let n = unsafe {
            libc::read(self.fd.as_raw_fd(), buf.as_mut_ptr() as *mut libc::c_void, buf.len())
        };
        if n < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(n as usize)
    }

    fn write_frame(&self, buf: &[u8]) -> io::Result<usize> {
        // SAFETY: buf bounds passed explicitly.
        let n = unsafe {
            libc::write(self.fd.as_raw_fd(), buf.as_ptr() as *const libc::c_void, buf.len())
        };
        if n < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(n as usize)
    }
}

impl AsRawFd for NetBackend {
    fn as_raw_fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }
}

pub struct NetDevice {
    backend: NetBackend,
    mac: Option<[u8; 6]>,
    deferred_tx: Option<(u16, Vec<u8>)>,
    fd_updates: Vec<BackendFdUpdate>,
    counters: NetCounters,
}

impl NetDevice {
    pub fn new(backend: NetBackend, mac: Option<[u8; 6]>) -> NetDevice {
        let watch = BackendFdUpdate::Watch {
            fd: backend.as_raw_fd(),
            tag: NET_TAG_RX,
            writable: true,
        };
        NetDevice {
            backend,
            mac,
            deferred_tx: None,
            fd_updates: vec![watch],
            counters: NetCounters::default(),
        }
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    pub fn backend_fd(&self) -> RawFd {
        self.backend.as_raw_fd()
    }

    pub fn has_deferred_tx(&self) -> bool {
        self.deferred_tx.is_some()
    }

    /// Writes the deferred frame if the tap accepts it now; completion of
    /// its chain happens only after the bytes are out.
    fn flush_deferred(&mut self, ctx: &mut QueueCtx) -> Result<bool, DeviceError> {
        let Some((head, frame)) = self.deferred_tx.take() else {
            return Ok(true);
        };
        match self.backend.write_frame(&frame) {
            Ok(_) => {
                self.counters.tx_frames += 1;
                ctx.complete(TX_QUEUE, head, 0)?;
                Ok(true)
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                self.deferred_tx = Some((head, frame));
                Ok(false)
            }
            Err(_) => {
                self.counters.tx_errors += 1;
                ctx.complete(TX_QUEUE, head, 0)?;
                Ok(true)
            }
        }
    }

    fn process_tx(&mut self, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        if !self.flush_deferred(ctx)? {
            return Ok(());
        }
        while let Some(chain) = ctx.pop(TX_QUEUE)? {
            let payload = chain.read_all(ctx.mem);
            if payload.len() < NET_HDR_LEN {
                self.counters.tx_errors += 1;
                ctx.complete(TX_QUEUE, chain.head_index, 0)?;
                continue;
            }
            let frame = &payload[NET_HDR_LEN..];
            match self.backend.write_frame(frame) {
                Ok(_) => {
                    self.counters.tx_frames += 1;
                    ctx.complete(TX_QUEUE, chain.head_index, 0)?;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    // Park the frame; the chain stays outstanding until the
                    // tap drains and we get a writable edge.
                    self.counters.tx_deferred += 1;
                    self.deferred_tx = Some((chain.head_index, frame.to_vec()));
                    break;
                }
                Err(_) => {
                    self.counters.tx_errors += 1;
                    ctx.complete(TX_QUEUE, chain.head_index, 0)?;
                }
            }
        }
        Ok(())
    }

    /// Drains the tap: one frame per receive chain, header prepended.
    /// Frames arriving with no buffer available are dropped and counted —
    /// the tap must be drained fully under edge-triggered readiness.
    fn process_rx(&mut self, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        let mut frame = vec![0u8; MAX_FRAME];
        loop {
            let len = match self.backend.read_frame(&mut frame) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => return Err(DeviceError::Backend(e)),
            };
            match ctx.pop(RX_QUEUE)? {
                Some(chain) => {
                    let mut packet = Vec::with_capacity(NET_HDR_LEN + len);
                    packet.extend_from_slice(&[0u8; NET_HDR_LEN]);
                    packet.extend_from_slice(&frame[..len]);
                    let written = chain.write_all(ctx.mem, &packet);
                    self.counters.rx_frames += 1;
                    ctx.complete(RX_QUEUE, chain.head_index, written as u32)?;
                }
                None => {
                    self.counters.rx_dropped += 1;
                }
            }
        }
        Ok(())
    }
}

impl VirtioDevice for NetDevice {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn device_type(&self) -> VirtioDeviceType {
        VirtioDeviceType::Net
    }

    fn queue_max_sizes(&self) -> Vec<u16> {
        vec![QUEUE_SIZE, QUEUE_SIZE]
    }

    fn device_features(&self) -> u64 {
        let mut features = VIRTIO_F_VERSION_1;
        if self.mac.is_some() {
            features |= VIRTIO_NET_F_MAC;
        }
        features
    }

    fn read_config(&self, offset: u64, data: &mut [u8]) {
        let mac = self.mac.unwrap_or_default();
        for (i, b) in data.iter_mut().enumerate() {
            *b = mac.get(offset as usize + i).copied().unwrap_or(0);
        }
    }

    fn on_queue_notify(&mut self, queue: usize, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        match queue {
            RX_QUEUE => self.process_rx(ctx),
            TX_QUEUE => self.process_tx(ctx),
            _ => Ok(()),
        }
    }

    fn on_backend_event(&mut self, tag: u32, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        if tag & BACKEND_EVENT_WRITABLE != 0 {
            self.process_tx(ctx)
        } else {
            self.process_rx(ctx)
        }
    }

    fn take_backend_updates(&mut self) -> Vec<BackendFdUpdate> {
        std::mem::take(&mut self.fd_updates)
    }
}

/// Creates a connected nonblocking datagram socketpair; frame boundaries
/// are preserved, which is what the device expects from a tap.
pub fn frame_socketpair() -> io::Result<(OwnedFd, OwnedFd)> {
    let mut fds = [0; 2];
    // SAFETY: fds receives two descriptors on success.
    let rc = unsafe {
        libc::socketpair(
            libc::AF_UNIX,
            libc::SOCK_DGRAM | libc::SOCK_NONBLOCK | libc::SOCK_CLOEXEC,
            0,
            fds.as_mut_ptr(),
        )
    };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: both descriptors are fresh and owned by us.
    unsafe { Ok((OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1]))) }
}
