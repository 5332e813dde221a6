//! Shared machinery for integration tests: an independent split-ring
//! driver/interpreter pair, synthetic kernel images, tiny guest programs,
//! and an in-process machine harness.
//!
//! The ring code here deliberately re-implements the split-queue layout
//! from first principles, byte by byte, so the device-side implementation
//! is checked against something that shares none of its code.

#![allow(dead_code)]

use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};

use vmm::api::server::{ActionResult, ApiRequest};
use vmm::api::{InstanceState, VmmAction};
use vmm::event_loop::EventLoop;
use vmm::guest_memory::{GuestAddress, GuestMemoryMap};
use vmm::metrics::Metrics;
use vmm::sys::EventFd;
use vmm::vmm::{Vmm, VmmOptions};

// ── deterministic PRNG ─────────────────────────────────────────────

/// xorshift64*; reproducible from a printed seed, no dependencies.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed.max(1))
    }

    pub fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        self.next() % bound.max(1)
    }

    pub fn chance(&mut self, percent: u64) -> bool {
        self.below(100) < percent
    }
}

// ── split-ring driver model and oracle ─────────────────────────────

pub const DESC_F_NEXT: u16 = 0x1;
pub const DESC_F_WRITE: u16 = 0x2;

/// Ring placement used by both the driver model and the oracle.
#[derive(Clone, Copy)]
pub struct RingLayout {
    pub qsize: u16,
    pub desc_table: u64,
    pub avail: u64,
    pub used: u64,
}

impl RingLayout {
    pub fn standard(qsize: u16) -> RingLayout {
        RingLayout {
            qsize,
            desc_table: 0x1000,
            avail: 0x2000,
            used: 0x3000,
        }
    }

    pub fn used_ring_len(&self) -> usize {
        4 + 8 * self.qsize as usize
    }
}

/// Guest-side driver model: owns descriptor allocation and publishes
/// chains by writing raw ring bytes.
pub struct DriverModel {
    pub layout: RingLayout,
    free_desc: Vec<u16>,
    avail_idx: u16,
}

impl DriverModel {
    pub fn new(layout: RingLayout) -> DriverModel {
        DriverModel {
            layout,
            free_desc: (0..layout.qsize).rev().collect(),
            avail_idx: 0,
        }
    }

    pub fn free_descriptors(&self) -> usize {
        self.free_desc.len()
    }

    /// Publishes a chain of `(addr, len, writable)` segments; returns the
    /// head index, or `None` if the table is full.
    pub fn publish(
        &mut self,
        mem: &GuestMemoryMap,
        segments: &[(u64, u32, bool)],
    ) -> Option<u16> {
        if segments.is_empty() || self.free_desc.len() < segments.len() {
            return None;
        }
        let indices: Vec<u16> = (0..segments.len())
            .map(|_| self.free_desc.pop().unwrap())
            .collect();
        for (i, (addr, len, writable)) in segments.iter().enumerate() {
            let slot = self.layout.desc_table + 16 * indices[i] as u64;
            let last = i == segments.len() - 1;
            let mut flags = if *writable { DESC_F_WRITE } else { 0 };
            if !last {
                flags |= DESC_F_NEXT;
            }
            let next = if last { 0 } else { indices[i + 1] };
            mem.write_u64(GuestAddress(slot), *addr).unwrap();
            mem.write_u32(GuestAddress(slot + 8), *len).unwrap();
            mem.write_u16(GuestAddress(slot + 12), flags).unwrap();
            mem.write_u16(GuestAddress(slot + 14), next).unwrap();
        }
        let head = indices[0];
        let ring_slot = self.avail_idx % self.layout.qsize;
        mem.write_u16(
            GuestAddress(self.layout.avail + 4 + 2 * ring_slot as u64),
            head,
        )
        .unwrap();
        self.avail_idx = self.avail_idx.wrapping_add(1);
        mem.write_u16(GuestAddress(self.layout.avail + 2), self.avail_idx)
            .unwrap();
        Some(head)
    }

    /// Returns a completed chain's descriptors to the free list.
    pub fn recycle(&mut self, mem: &GuestMemoryMap, head: u16) {
        let mut index = head;
        loop {
            self.free_desc.push(index);
            let slot = self.layout.desc_table + 16 * index as u64;
            let flags = mem.read_u16(GuestAddress(slot + 12)).unwrap();
            if flags & DESC_F_NEXT == 0 {
                break;
            }
            index = mem.read_u16(GuestAddress(slot + 14)).unwrap();
        }
    }
}

/// Brute-force interpreter of the split-ring layout: walks the raw bytes
/// of the descriptor table and available ring itself and keeps its own
/// used-ring image for comparison with the implementation's.
pub struct RingOracle {
    pub layout: RingLayout,
    next_avail: u16,
    next_used: u16,
    used_image: Vec<u8>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct OracleChain {
    pub head: u16,
    pub segments: Vec<(u64, u32, bool)>,
}

impl RingOracle {
    pub fn new(layout: RingLayout) -> RingOracle {
        RingOracle {
            layout,
            next_avail: 0,
            next_used: 0,
            used_image: vec![0; layout.used_ring_len()],
        }
    }

    fn read_u16(&self, mem: &GuestMemoryMap, addr: u64) -> u16 {
        let b = mem.read_bytes(GuestAddress(addr), 2).unwrap();
        u16::from_le_bytes([b[0], b[1]])
    }

    /// Interprets the next available chain, if the guest published one.
    pub fn pop(&mut self, mem: &GuestMemoryMap) -> Option<OracleChain> {
        let published = self.read_u16(mem, self.layout.avail + 2);
        if self.next_avail == published {
            return None;
        }
        let slot = self.next_avail % self.layout.qsize;
        let head = self.read_u16(mem, self.layout.avail + 4 + 2 * slot as u64);
        self.next_avail = self.next_avail.wrapping_add(1);

        let mut segments = Vec::new();
        let mut index = head;
        loop {
            let base = self.layout.desc_table + 16 * index as u64;
            let bytes = mem.read_bytes(GuestAddress(base), 16).unwrap();
            let addr = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
            let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
            let flags = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
            let next = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
            segments.push((addr, len, flags & DESC_F_WRITE != 0));
            if flags & DESC_F_NEXT == 0 {
                break;
            }
            index = next;
        }
        Some(OracleChain { head, segments })
    }

    /// Records a completion in the oracle's own used-ring image: element
    /// first, then the index, exactly as a correct device must.
    pub fn complete(&mut self, head: u16, written: u32) {
        let slot = (self.next_used % self.layout.qsize) as usize;
        let off = 4 + 8 * slot;
        self.used_image[off..off + 4].copy_from_slice(&(head as u32).to_le_bytes());
        self.used_image[off + 4..off + 8].copy_from_slice(&written.to_le_bytes());
        self.next_used = self.next_used.wrapping_add(1);
        self.used_image[2..4].copy_from_slice(&self.next_used.to_le_bytes());
    }

    /// The raw bytes a correct device must have produced in the used ring.
    pub fn expected_used_bytes(&self) -> &[u8] {
        &self.used_image
    }

    pub fn completions(&self) -> u16 {
        self.next_used
    }
}

// ── synthetic kernels and guest programs ───────────────────────────

/// Builds a parseable bzImage: `setup_sects` real-mode sectors followed
/// by `pm_code` as the protected-mode payload.
pub fn synthetic_bzimage(setup_sects: u8, pm_code: &[u8]) -> Vec<u8> {
    let effective = if setup_sects == 0 { 4 } else { setup_sects as usize };
    let mut image = vec![0u8; (effective + 1) * 512];
    image[0x1f1] = setup_sects;
    image[0x201] = 0x66; // header end displacement
    image[0x1fe..0x200].copy_from_slice(&0xAA55u16.to_le_bytes());
    image[0x202..0x206].copy_from_slice(&0x5372_6448u32.to_le_bytes()); // "HdrS"
    image[0x206..0x208].copy_from_slice(&0x020fu16.to_le_bytes());
    image[0x211] = 0x01; // LOADED_HIGH
    image[0x236..0x238].copy_from_slice(&0x0001u16.to_le_bytes()); // XLF_KERNEL_64
    image.extend_from_slice(pm_code);
    image
}

/// 64-bit machine code that prints `HI\n` on the serial port and then
/// triple-faults (the IDT is empty), which reaches the monitor as a
/// shutdown exit.
pub fn banner_guest_code() -> Vec<u8> {
    vec![
        0x66, 0xba, 0xf8, 0x03, // mov dx, 0x3f8
        0xb0, b'H', // mov al, 'H'
        0xee, // out dx, al
        0xb0, b'I', // mov al, 'I'
        0xee, // out dx, al
        0xb0, b'\n', // mov al, '\n'
        0xee, // out dx, al
        0x0f, 0x0b, // ud2 -> triple fault -> shutdown exit
    ]
}

/// Banner, then poll the keyboard data port until the Delete make code
/// appears, answer with the CPU reset command, and spin. Exercises the
/// full Ctrl+Alt+Del circle without a Linux kernel.
pub fn ctrl_alt_del_guest_code() -> Vec<u8> {
    vec![
        0x66, 0xba, 0xf8, 0x03, // mov dx, 0x3f8
        0xb0, b'H', 0xee, // out 'H'
        0xb0, b'I', 0xee, // out 'I'
        0xb0, b'\n', 0xee, // out '\n'
        0x66, 0xba, 0x60, 0x00, // mov dx, 0x60
        // poll:
        0xec, // in al, dx
        0x3c, 0x53, // cmp al, 0x53 (Delete make code)
        0x75, 0xfb, // jne poll
        0x66, 0xba, 0x64, 0x00, // mov dx, 0x64
        0xb0, 0xfe, // mov al, 0xfe (pulse CPU reset)
        0xee, // out dx, al
        0xf4, // hlt
    ]
}

/// Pads guest code to a protected-mode payload entered at +0x200.
pub fn pm_payload(guest_code: &[u8]) -> Vec<u8> {
    let mut pm = vec![0u8; 0x200];
    pm.extend_from_slice(guest_code);
    pm.resize(pm.len().max(0x1000), 0);
    pm
}

/// Writes a bootable synthetic kernel to a temp file.
pub fn write_kernel_fixture(guest_code: &[u8]) -> tempfile::NamedTempFile {
    let image = synthetic_bzimage(4, &pm_payload(guest_code));
    let file = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(file.path(), &image).unwrap();
    file
}

// ── host gating ────────────────────────────────────────────────────

pub fn kvm_available() -> bool {
    vmm::kvm::Hypervisor::open().is_ok()
}

/// One VM per process: tests that boot in-process must take this lock so
/// parallel test threads do not contend for the VM permit.
pub fn vm_serial_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

// ── MMIO transport driving (guest-visible registers only) ──────────

pub mod regs {
    pub use vmm::virtio::mmio::{
        REG_DRIVER_FEATURES, REG_DRIVER_FEATURES_SEL, REG_QUEUE_AVAIL_LOW, REG_QUEUE_DESC_LOW,
        REG_QUEUE_NUM, REG_QUEUE_READY, REG_QUEUE_SEL, REG_QUEUE_USED_LOW,
        REG_STATUS, STATUS_ACKNOWLEDGE, STATUS_DRIVER, STATUS_DRIVER_OK, STATUS_FEATURES_OK,
    };
}

/// Performs the virtio driver handshake on a transport and activates one
/// queue per layout, acting purely through guest-visible registers.
pub fn bring_up_transport(
    transport: &mut vmm::virtio::MmioTransport,
    mem: &GuestMemoryMap,
    irq: &vmm::virtio::IrqAllocator,
    layouts: &[RingLayout],
    offered_features: u64,
) {
    use regs::*;
    let write = |t: &mut vmm::virtio::MmioTransport, off: u64, val: u32| {
        t.write(off, &val.to_le_bytes(), mem, irq)
    };
    write(transport, REG_STATUS, STATUS_ACKNOWLEDGE);
    write(transport, REG_STATUS, STATUS_ACKNOWLEDGE | STATUS_DRIVER);
    write(transport, REG_DRIVER_FEATURES_SEL, 0);
    write(transport, REG_DRIVER_FEATURES, offered_features as u32);
    write(transport, REG_DRIVER_FEATURES_SEL, 1);
    write(transport, REG_DRIVER_FEATURES, (offered_features >> 32) as u32);
    write(
        transport,
        REG_STATUS,
        STATUS_ACKNOWLEDGE | STATUS_DRIVER | STATUS_FEATURES_OK,
    );
    for (i, layout) in layouts.iter().enumerate() {
        write(transport, REG_QUEUE_SEL, i as u32);
        write(transport, REG_QUEUE_NUM, layout.qsize as u32);
        write(transport, REG_QUEUE_DESC_LOW, layout.desc_table as u32);
        write(transport, REG_QUEUE_AVAIL_LOW, layout.avail as u32);
        write(transport, REG_QUEUE_USED_LOW, layout.used as u32);
        write(transport, REG_QUEUE_READY, 1);
    }
    write(
        transport,
        REG_STATUS,
        STATUS_ACKNOWLEDGE | STATUS_DRIVER | STATUS_FEATURES_OK | STATUS_DRIVER_OK,
    );
    assert!(transport.is_activated(), "driver handshake failed");
}

// ── minimal HTTP/1.1 client over a unix socket ─────────────────────

/// One request/response round trip; returns (status, body).
pub fn http_request(
    socket: &std::path::Path,
    method: &str,
    path: &str,
    body: Option<&str>,
) -> std::io::Result<(u16, String)> {
    use std::io::{Read, Write};
    let mut stream = std::os::unix::net::UnixStream::connect(socket)?;
    let body = body.unwrap_or("");
    let request = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes())?;

    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        if let Some(end) = find_header_end(&buffer) {
            let header = String::from_utf8_lossy(&buffer[..end]).into_owned();
            let content_length = header
                .lines()
                .find_map(|l| {
                    let (name, value) = l.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse::<usize>().ok())?
                })
                .unwrap_or(0);
            let total = end + 4 + content_length;
            while buffer.len() < total {
                let n = stream.read(&mut chunk)?;
                if n == 0 {
                    break;
                }
                buffer.extend_from_slice(&chunk[..n]);
            }
            let status: u16 = header
                .lines()
                .next()
                .and_then(|l| l.split(' ').nth(1))
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let body = String::from_utf8_lossy(&buffer[end + 4..total.min(buffer.len())])
                .into_owned();
            return Ok((status, body));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed mid-response",
            ));
        }
        buffer.extend_from_slice(&chunk[..n]);
    }
}

fn find_header_end(buffer: &[u8]) -> Option<usize> {
    buffer.windows(4).position(|w| w == b"\r\n\r\n")
}

// ── shared serial sink ─────────────────────────────────────────────

#[derive(Clone, Default)]
pub struct SharedSink(pub Arc<Mutex<Vec<u8>>>);

impl SharedSink {
    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }

    pub fn wait_for(&self, needle: &[u8], timeout: std::time::Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            let contents = self.contents();
            if contents
                .windows(needle.len().max(1))
                .any(|w| w == needle)
            {
                return true;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        false
    }
}

impl std::io::Write for SharedSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

// ── in-process machine harness ─────────────────────────────────────

/// A full monitor (VMM loop on its own thread) driven through the same
/// channel the API server uses.
pub struct TestMachine {
    pub action_tx: Sender<ApiRequest>,
    pub wakeup: EventFd,
    pub state: Arc<Mutex<InstanceState>>,
    pub serial: SharedSink,
    pub metrics: Arc<Metrics>,
    loop_thread: Option<std::thread::JoinHandle<Vmm>>,
    next_id: u64,
}

impl TestMachine {
    pub fn start() -> TestMachine {
        let (action_tx, action_rx) = mpsc::channel();
        let wakeup = EventFd::new().unwrap();
        let state = Arc::new(Mutex::new(InstanceState::Uninitialized));
        let serial = SharedSink::default();

        let mut el = EventLoop::new().unwrap();
        let options = VmmOptions {
            serial_sink: Some(Box::new(serial.clone())),
            ..VmmOptions::default()
        };
        let mut vmm = Vmm::new(
            options,
            action_rx,
            wakeup.try_clone().unwrap(),
            state.clone(),
            &mut el,
        )
        .unwrap();
        let metrics = vmm.metrics().clone();
        let loop_thread = std::thread::Builder::new()
            .name("vmm-loop".into())
            .spawn(move || {
                let _ = el.run(&mut vmm);
                vmm
            })
            .unwrap();

        TestMachine {
            action_tx,
            wakeup,
            state,
            serial,
            metrics,
            loop_thread: Some(loop_thread),
            next_id: 0,
        }
    }

    /// Sends one action and blocks for its result.
    pub fn send(&mut self, action: VmmAction) -> ActionResult {
        let id = self.next_id;
        self.next_id += 1;
        let (reply_tx, reply_rx) = mpsc::sync_channel(1);
        self.action_tx
            .send(ApiRequest { id, action, responder: reply_tx })
            .expect("vmm loop alive");
        self.wakeup.write(1).unwrap();
        let result = reply_rx.recv().expect("vmm answered");
        assert_eq!(result.id, id);
        result
    }

    pub fn state(&self) -> InstanceState {
        *self.state.lock().unwrap()
    }

    /// Waits for the VMM loop to exit (guest shutdown) and returns the
    /// final VMM state for inspection.
    pub fn join(mut self, timeout: std::time::Duration) -> Option<Vmm> {
        let thread = self.loop_thread.take()?;
        let deadline = std::time::Instant::now() + timeout;
        while !thread.is_finished() {
            if std::time::Instant::now() > deadline {
                return None;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        thread.join().ok()
    }
}

/// Counts live threads of this process via procfs.
pub fn process_thread_count() -> usize {
    std::fs::read_dir("/proc/self/task").map(|d| d.count()).unwrap_or(0)
}

/// Resident set size in bytes via procfs.
pub fn process_rss_bytes() -> u64 {
    let status = std::fs::read_to_string("/proc/self/status").unwrap_or_default();
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmRSS:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches(" kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}
