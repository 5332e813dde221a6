//! Virtio vsock device multiplexing guest sockets onto host unix sockets.
//!
//! Many guest connections funnel through one host socket path root:
//!
//! * guest connects to host port `P` → the device connects to `<root>_P`;
//! * a host process connects to `<root>` and sends `CONNECT <port>\n` to
//!   reach a guest listener; the device answers `OK <port>\n` once the
//!   guest accepts.
//!
//! Stream data rides RW packets with standard 44-byte headers on the rx/tx
//! queues; flow control honours the peer's advertised credit.

use std::collections::{HashMap, VecDeque};
use std::io::{self, ErrorKind, Read, Write};
use std::num::Wrapping;
use std::os::fd::AsRawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};

use crate::virtio::mmio::QueueCtx;
use crate::virtio::{
    BackendFdUpdate, DeviceError, VirtioDevice, VirtioDeviceType, VIRTIO_F_VERSION_1,
};

/// Well-known context id of the host.
pub const HOST_CID: u64 = 2;
/// Guest context ids start above the reserved ones.
pub const MIN_GUEST_CID: u32 = 3;

pub const VSOCK_HDR_LEN: usize = 44;
const QUEUE_SIZE: u16 = 256;
const RX_QUEUE: usize = 0;
const TX_QUEUE: usize = 1;

const TYPE_STREAM: u16 = 1;

// Packet operations.
pub const OP_REQUEST: u16 = 1;
pub const OP_RESPONSE: u16 = 2;
pub const OP_RST: u16 = 3;
pub const OP_SHUTDOWN: u16 = 4;
pub const OP_RW: u16 = 5;
pub const OP_CREDIT_UPDATE: u16 = 6;
pub const OP_CREDIT_REQUEST: u16 = 7;

const SHUTDOWN_ALL_FLAGS: u32 = 0x3;

/// Our advertised receive budget per connection.
const LOCAL_BUF_ALLOC: u32 = 256 * 1024;
/// Listener readiness tag in the dispatch table.
pub const VSOCK_TAG_LISTENER: u32 = 0;

/// On-the-wire packet header, little-endian throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VsockPacketHeader {
    pub src_cid: u64,
    pub dst_cid: u64,
    pub src_port: u32,
    pub dst_port: u32,
    pub len: u32,
    pub type_: u16,
    pub op: u16,
    pub flags: u32,
    pub buf_alloc: u32,
    pub fwd_cnt: u32,
}

impl VsockPacketHeader {
    pub fn to_bytes(&self) -> [u8; VSOCK_HDR_LEN] {
        let mut out = [0u8; VSOCK_HDR_LEN];
        out[0..8].copy_from_slice(&self.src_cid.to_le_bytes());
        out[8..16].copy_from_slice(&self.dst_cid.to_le_bytes());
        out[16..20].copy_from_slice(&self.src_port.to_le_bytes());
        out[20..24].copy_from_slice(&self.dst_port.to_le_bytes());
        out[24..28].copy_from_slice(&self.len.to_le_bytes());
        out[28..30].copy_from_slice(&self.type_.to_le_bytes());
        out[30..32].copy_from_slice(&self.op.to_le_bytes());
        out[32..36].copy_from_slice(&self.flags.to_le_bytes());
        out[36..40].copy_from_slice(&self.buf_alloc.to_le_bytes());
        out[40..44].copy_from_slice(&self.fwd_cnt.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<VsockPacketHeader> {
        if bytes.len() < VSOCK_HDR_LEN {
            return None;
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        Some(VsockPacketHeader {
            src_cid: u64_at(0),
            dst_cid: u64_at(8),
            src_port: u32_at(16),
            dst_port: u32_at(20),
            len: u32_at(24),
            type_: u16_at(28),
            op: u16_at(30),
            flags: u32_at(32),
            buf_alloc: u32_at(36),
            fwd_cnt: u32_at(40),
        })
    }
}

/// Connection key: (guest-side port, host-side port).
type ConnKey = (u32, u32);

struct Connection {
    stream: UnixStream,
    tag: u32,
    /// Bytes we have sent to the guest on this connection.
    tx_cnt: Wrapping<u32>,
    /// Bytes received from the guest and written toward the host.
    fwd_cnt: Wrapping<u32>,
    /// Peer (guest) credit state.
    peer_buf_alloc: u32,
    peer_fwd_cnt: Wrapping<u32>,
    /// Output not yet accepted by the host socket.
    outbuf: VecDeque<u8>,
}

impl Connection {
    fn peer_credit(&self) -> u32 {
        self.peer_buf_alloc
            .wrapping_sub((self.tx_cnt - self.peer_fwd_cnt).0)
    }
}

/// A host connection still negotiating `CONNECT <port>` or waiting for the
/// guest to accept.
struct PendingHost {
    stream: UnixStream,
    buffer: Vec<u8>,
    /// Set once `CONNECT` was read and the REQUEST went to the guest.
    ports: Option<ConnKey>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct VsockCounters {
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub connections_opened: u64,
    pub connections_refused: u64,
    pub protocol_errors: u64,
}

pub struct VsockDevice {
    guest_cid: u32,
    socket_root: PathBuf,
    listener: UnixListener,
    connections: HashMap<ConnKey, Connection>,
    pending_hosts: HashMap<u32, PendingHost>,
    /// Packets queued toward the guest, waiting for rx chains.
    rx_pending: VecDeque<(VsockPacketHeader, Vec<u8>)>,
    fd_updates: Vec<BackendFdUpdate>,
    next_tag: u32,
    next_host_port: u32,
    counters: VsockCounters,
}

impl VsockDevice {
    /// Binds the host listener at `socket_root` and serves context id
    /// `guest_cid` (must be ≥ 3; 0-2 are reserved).
    pub fn new(guest_cid: u32, socket_root: &Path) -> io::Result<VsockDevice> {
        if guest_cid < MIN_GUEST_CID {
            return Err(io::Error::new(ErrorKind::InvalidInput, "guest cid reserved"));
        }
        let _ = std::fs::remove_file(socket_root);
        let listener = UnixListener::bind(socket_root)?;
        listener.set_nonblocking(true)?;
        let listener_fd = listener.as_raw_fd();
        Ok(VsockDevice {
            guest_cid,
            socket_root: socket_root.to_path_buf(),
            listener,
            connections: HashMap::new(),
            pending_hosts: HashMap::new(),
            rx_pending: VecDeque::new(),
            fd_updates: vec![BackendFdUpdate::Watch {
                fd: listener_fd,
                tag: VSOCK_TAG_LISTENER,
                writable: false,
            }],
            next_tag: 1,
            next_host_port: 0x8000_0000,
            counters: VsockCounters::default(),
        })
    }

    pub fn guest_cid(&self) -> u32 {
        self.guest_cid
    }

    pub fn counters(&self) -> VsockCounters {
        self.counters
    }

    pub fn connection_count(&self) -> usize {
        self.connections.len()
    }

    fn header(&self, ports: ConnKey, op: u16, len: u32, fwd_cnt: u32) -> VsockPacketHeader {
        VsockPacketHeader {
            src_cid: HOST_CID,
            dst_cid: self.guest_cid as u64,
            src_port: ports.1,
            dst_port: ports.0,
            len,
            type_: TYPE_STREAM,
            op,
            flags: if op == OP_SHUTDOWN { SHUTDOWN_ALL_FLAGS } else { 0 },
            buf_alloc: LOCAL_BUF_ALLOC,
            fwd_cnt,
        }
    }

    fn queue_to_guest(&mut self, header: VsockPacketHeader, payload: Vec<u8>) {
        self.rx_pending.push_back((header, payload));
    }

    /// Moves queued packets into available rx chains.
    fn deliver_pending(&mut self, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        while !self.rx_pending.is_empty() {
            if !ctx.queue_ready(RX_QUEUE) {
                break;
            }
            let Some(chain) = ctx.pop(RX_QUEUE)? else {
                break;
            };
            let (header, payload) = self.rx_pending.pop_front().unwrap();
            let mut packet = Vec::with_capacity(VSOCK_HDR_LEN + payload.len());
            packet.extend_from_slice(&header.to_bytes());
            packet.extend_from_slice(&payload);
            let written = chain.write_all(ctx.mem, &packet);
            self.counters.rx_packets += 1;
            ctx.complete(RX_QUEUE, chain.head_index, written as u32)?;
        }
        Ok(())
    }

    /// Pulls readable host data into RW packets, respecting guest credit.
    fn pump_connection(&mut self, key: ConnKey) {
        // Flush anything the host socket refused earlier.
        loop {
            let Some(conn) = self.connections.get_mut(&key) else {
                return;
            };
            if conn.outbuf.is_empty() {
                break;
            }
            let (front, _) = conn.outbuf.as_slices();
            let result = conn.stream.write(front);
            match result {
                Ok(0) => break,
                Ok(n) => {
                    conn.outbuf.drain(..n);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => {
                    self.drop_connection(key, true);
                    return;
                }
            }
        }

        loop {
            let Some(conn) = self.connections.get_mut(&key) else {
                return;
            };
            let credit = conn.peer_credit().min(4096) as usize;
            if credit == 0 {
                break;
            }
            let mut buf = vec![0u8; credit];
            match conn.stream.read(&mut buf) {
                Ok(0) => {
                    // Host closed: orderly shutdown toward the guest.
                    let fwd = conn.fwd_cnt.0;
                    let header = self.header(key, OP_SHUTDOWN, 0, fwd);
                    self.queue_to_guest(header, Vec::new());
                    self.drop_connection(key, false);
                    return;
                }
                Ok(n) => {
                    buf.truncate(n);
                    conn.tx_cnt += Wrapping(n as u32);
                    let fwd = conn.fwd_cnt.0;
                    let header = self.header(key, OP_RW, n as u32, fwd);
                    self.queue_to_guest(header, buf);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => {
                    self.drop_connection(key, true);
                    return;
                }
            }
        }
    }

    fn drop_connection(&mut self, key: ConnKey, send_rst: bool) {
        if let Some(conn) = self.connections.remove(&key) {
            self.fd_updates.push(BackendFdUpdate::Unwatch { tag: conn.tag });
            if send_rst {
                let fwd = conn.fwd_cnt.0;
                let header = self.header(key, OP_RST, 0, fwd);
                self.queue_to_guest(header, Vec::new());
            }
        }
    }

    fn register_connection(&mut self, key: ConnKey, stream: UnixStream) -> io::Result<u32> {
        stream.set_nonblocking(true)?;
        let tag = self.next_tag;
        self.next_tag += 1;
        self.fd_updates.push(BackendFdUpdate::Watch {
            fd: stream.as_raw_fd(),
            tag,
            writable: false,
        });
        self.connections.insert(
            key,
            Connection {
                stream,
                tag,
                tx_cnt: Wrapping(0),
                fwd_cnt: Wrapping(0),
                peer_buf_alloc: 0,
                peer_fwd_cnt: Wrapping(0),
                outbuf: VecDeque::new(),
            },
        );
        self.counters.connections_opened += 1;
        Ok(tag)
    }

    /// Guest-initiated connect: dial `<root>_<port>` on the host.
    fn guest_connect(&mut self, header: &VsockPacketHeader) {
        let key = (header.src_port, header.dst_port);
        let path = PathBuf::from(format!(
            "{}_{}",
            self.socket_root.display(),
            header.dst_port
        ));
        match UnixStream::connect(&path) {
            Ok(stream) => {
                if let Ok(tag) = self.register_connection(key, stream) {
                    let _ = tag;
                    if let Some(conn) = self.connections.get_mut(&key) {
                        conn.peer_buf_alloc = header.buf_alloc;
                        conn.peer_fwd_cnt = Wrapping(header.fwd_cnt);
                    }
                    let response = self.header(key, OP_RESPONSE, 0, 0);
                    self.queue_to_guest(response, Vec::new());
                    return;
                }
                self.counters.connections_refused += 1;
                let rst = self.header(key, OP_RST, 0, 0);
                self.queue_to_guest(rst, Vec::new());
            }
            Err(_) => {
                // Connection refused surfaces as a reset packet.
                self.counters.connections_refused += 1;
                let rst = self.header(key, OP_RST, 0, 0);
                self.queue_to_guest(rst, Vec::new());
            }
        }
    }

    fn handle_guest_packet(&mut self, header: VsockPacketHeader, payload: &[u8]) {
        if header.type_ != TYPE_STREAM {
            self.counters.protocol_errors += 1;
            return;
        }
        let key = (header.src_port, header.dst_port);
        match header.op {
            OP_REQUEST => self.guest_connect(&header),
            OP_RESPONSE => self.host_side_accepted(&header),
            OP_RW => {
                if let Some(conn) = self.connections.get_mut(&key) {
                    conn.peer_buf_alloc = header.buf_alloc;
                    conn.peer_fwd_cnt = Wrapping(header.fwd_cnt);
                    conn.fwd_cnt += Wrapping(payload.len() as u32);
                    conn.outbuf.extend(payload);
                    self.pump_connection(key);
                } else {
                    self.counters.protocol_errors += 1;
                    let rst = self.header(key, OP_RST, 0, 0);
                    self.queue_to_guest(rst, Vec::new());
                }
            }
            OP_SHUTDOWN => {
                if let Some(conn) = self.connections.get_mut(&key) {
                    let _ = conn.stream.shutdown(std::net::Shutdown::Write);
                    if header.flags & SHUTDOWN_ALL_FLAGS == SHUTDOWN_ALL_FLAGS {
                        self.drop_connection(key, true);
                    }
                }
            }
            OP_RST => self.drop_connection(key, false),
            OP_CREDIT_REQUEST => {
                let fwd = self
                    .connections
                    .get(&key)
                    .map(|c| c.fwd_cnt.0)
                    .unwrap_or(0);
                let update = self.header(key, OP_CREDIT_UPDATE, 0, fwd);
                self.queue_to_guest(update, Vec::new());
            }
            OP_CREDIT_UPDATE => {
                if let Some(conn) = self.connections.get_mut(&key) {
                    conn.peer_buf_alloc = header.buf_alloc;
                    conn.peer_fwd_cnt = Wrapping(header.fwd_cnt);
                    self.pump_connection(key);
                }
            }
            _ => self.counters.protocol_errors += 1,
        }
    }

    /// Guest accepted a host-initiated connection: promote the pending
    /// socket and acknowledge on the wire.
    fn host_side_accepted(&mut self, header: &VsockPacketHeader) {
        let key = (header.src_port, header.dst_port);
        let tag = self
            .pending_hosts
            .iter()
            .find(|(_, p)| p.ports == Some(key))
            .map(|(tag, _)| *tag);
        let Some(tag) = tag else {
            self.counters.protocol_errors += 1;
            return;
        };
        let mut pending = self.pending_hosts.remove(&tag).unwrap();
        let _ = writeln!(pending.stream, "OK {}", key.0);
        self.fd_updates.push(BackendFdUpdate::Unwatch { tag });
        if self.register_connection(key, pending.stream).is_ok() {
            if let Some(conn) = self.connections.get_mut(&key) {
                conn.peer_buf_alloc = header.buf_alloc;
                conn.peer_fwd_cnt = Wrapping(header.fwd_cnt);
            }
        }
    }

    fn accept_host_connections(&mut self) {
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(true).is_err() {
                        continue;
                    }
                    let tag = self.next_tag;
                    self.next_tag += 1;
                    self.fd_updates.push(BackendFdUpdate::Watch {
                        fd: stream.as_raw_fd(),
                        tag,
                        writable: false,
                    });
                    self.pending_hosts.insert(
                        tag,
                        PendingHost {
                            stream,
                            buffer: Vec::new(),
                            ports: None,
                        },
                    );
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => break,
            }
        }
    }

    /// Reads `CONNECT <port>` lines from a not-yet-established host socket.
    fn pump_pending_host(&mut self, tag: u32) {
        let Some(pending) = self.pending_hosts.get_mut(&tag) else {
            return;
        };
        if pending.ports.is_some() {
            // Waiting on the guest; nothing to read yet.
            return;
        }
        let mut buf = [0u8; 256];
        loop {
            match pending.stream.read(&mut buf) {
                Ok(0) => {
                    self.pending_hosts.remove(&tag);
                    self.fd_updates.push(BackendFdUpdate::Unwatch { tag });
                    return;
                }
                Ok(n) => {
                    pending.buffer.extend_from_slice(&buf[..n]);
                    if pending.buffer.len() > 256 {
                        self.pending_hosts.remove(&tag);
                        self.fd_updates.push(BackendFdUpdate::Unwatch { tag });
                        self.counters.protocol_errors += 1;
                        return;
                    }
                    if let Some(pos) = pending.buffer.iter().position(|b| *b == b'\n') {
                        let line = String::from_utf8_lossy(&pending.buffer[..pos]).into_owned();
                        pending.buffer.drain(..=pos);
                        let Some(port) = line
                            .trim()
                            .strip_prefix("CONNECT ")
                            .and_then(|p| p.parse::<u32>().ok())
                        else {
                            self.pending_hosts.remove(&tag);
                            self.fd_updates.push(BackendFdUpdate::Unwatch { tag });
                            self.counters.protocol_errors += 1;
                            return;
                        };
                        let host_port = self.next_host_port;
                        self.next_host_port += 1;
                        let key = (port, host_port);
                        self.pending_hosts.get_mut(&tag).unwrap().ports = Some(key);
                        let request = VsockPacketHeader {
                            src_cid: HOST_CID,
                            dst_cid: self.guest_cid as u64,
                            src_port: host_port,
                            dst_port: port,
                            len: 0,
                            type_: TYPE_STREAM,
                            op: OP_REQUEST,
                            flags: 0,
                            buf_alloc: LOCAL_BUF_ALLOC,
                            fwd_cnt: 0,
                        };
                        self.queue_to_guest(request, Vec::new());
                        return;
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => return,
                Err(_) => {
                    self.pending_hosts.remove(&tag);
                    self.fd_updates.push(BackendFdUpdate::Unwatch { tag });
                    return;
                }
            }
        }
    }

    fn connection_key_by_tag(&self, tag: u32) -> Option<ConnKey> {
        self.connections
            .iter()
            .find(|(_, c)| c.tag == tag)
            .map(|(k, _)| *k)
    }
}

impl VirtioDevice for VsockDevice {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn device_type(&self) -> VirtioDeviceType {
        VirtioDeviceType::Vsock
    }

    fn queue_max_sizes(&self) -> Vec<u16> {
        vec![QUEUE_SIZE, QUEUE_SIZE, QUEUE_SIZE]
    }

    fn device_features(&self) -> u64 {
        VIRTIO_F_VERSION_1
    }

    fn read_config(&self, offset: u64, data: &mut [u8]) {
        let cid = (self.guest_cid as u64).to_le_bytes();
        for (i, b) in data.iter_mut().enumerate() {
            *b = cid.get(offset as usize + i).copied().unwrap_or(0);
        }
    }

    fn on_queue_notify(&mut self, queue: usize, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        match queue {
            TX_QUEUE => {
                while let Some(chain) = ctx.pop(TX_QUEUE)? {
                    self.counters.tx_packets += 1;
                    let bytes = chain.read_all(ctx.mem);
                    match VsockPacketHeader::parse(&bytes) {
                        Some(header) => {
                            let len = header.len as usize;
                            let payload_end = (VSOCK_HDR_LEN + len).min(bytes.len());
                            let payload = &bytes[VSOCK_HDR_LEN..payload_end];
                            self.handle_guest_packet(header, payload);
                        }
                        None => self.counters.protocol_errors += 1,
                    }
                    ctx.complete(TX_QUEUE, chain.head_index, 0)?;
                }
                self.deliver_pending(ctx)
            }
            RX_QUEUE => {
                // Fresh buffers: deliver backlog, then resume credit- or
                // buffer-stalled host reads.
                self.deliver_pending(ctx)?;
                let keys: Vec<ConnKey> = self.connections.keys().copied().collect();
                for key in keys {
                    self.pump_connection(key);
                }
                self.deliver_pending(ctx)
            }
            _ => Ok(()),
        }
    }

    fn on_backend_event(&mut self, tag: u32, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        if tag == VSOCK_TAG_LISTENER {
            self.accept_host_connections();
        } else if self.pending_hosts.contains_key(&tag) {
            self.pump_pending_host(tag);
        } else if let Some(key) = self.connection_key_by_tag(tag) {
            self.pump_connection(key);
        }
        self.deliver_pending(ctx)
    }

    fn take_backend_updates(&mut self) -> Vec<BackendFdUpdate> {
        std::mem::take(&mut self.fd_updates)
    }
}
