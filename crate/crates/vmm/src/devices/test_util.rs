//! Test harness driving a virtio device through the real MMIO transport:
//! performs the driver handshake, lays out rings in guest memory, publishes
//! descriptor chains and fires notify like a guest driver would.

use std::io;
use std::sync::{Arc, Mutex};

use crate::guest_memory::{GuestAddress, GuestMemoryMap};
use crate::virtio::mmio::{
    MmioTransport, REG_DRIVER_FEATURES, REG_DRIVER_FEATURES_SEL, REG_QUEUE_AVAIL_LOW,
    REG_QUEUE_DESC_LOW, REG_QUEUE_NOTIFY, REG_QUEUE_NUM, REG_QUEUE_READY, REG_QUEUE_SEL,
    REG_QUEUE_USED_LOW, REG_STATUS, STATUS_ACKNOWLEDGE, STATUS_DRIVER, STATUS_DRIVER_OK,
    STATUS_FEATURES_OK,
};
use crate::virtio::{IrqAllocator, IrqTrigger, VirtioDevice};

pub const TEST_QUEUE_SIZE: u16 = 16;
const RING_AREA: u64 = 0x1000;
const PER_QUEUE_SPAN: u64 = 0x3000;
const BUFFER_AREA: u64 = 0x10_0000;

pub struct PulseRecorder(pub Mutex<Vec<u32>>);

impl IrqTrigger for PulseRecorder {
    fn pulse(&self, line: u32) -> io::Result<()> {
        self.0.lock().unwrap().push(line);
        Ok(())
    }
}

pub struct VirtioHarness {
    pub mem: GuestMemoryMap,
    pub transport: MmioTransport,
    pub irq: IrqAllocator,
    pulses: Arc<PulseRecorder>,
    num_queues: usize,
    next_buffer: u64,
    next_desc: Vec<u16>,
    published: Vec<u16>,
}

impl VirtioHarness {
    /// Wraps `device` in a transport, negotiates all offered features and
    /// activates `num_queues` queues of size [`TEST_QUEUE_SIZE`].
    pub fn new(device: Box<dyn VirtioDevice>, num_queues: usize) -> VirtioHarness {
        let mem = GuestMemoryMap::new(&[(GuestAddress(0), 8 << 20)]).unwrap();
        let pulses = Arc::new(PulseRecorder(Mutex::new(Vec::new())));
        let mut irq = IrqAllocator::new(pulses.clone());
        irq.allocate_irq(0).unwrap();
        let offered = device.device_features();
        let mut transport = MmioTransport::new(GuestAddress(0xd000_0000), 0, 5, device);

        let write =
            |t: &mut MmioTransport, off: u64, val: u32| t.write(off, &val.to_le_bytes(), &mem, &irq);
        write(&mut transport, REG_STATUS, STATUS_ACKNOWLEDGE);
        write(&mut transport, REG_STATUS, STATUS_ACKNOWLEDGE | STATUS_DRIVER);
        write(&mut transport, REG_DRIVER_FEATURES_SEL, 0);
        write(&mut transport, REG_DRIVER_FEATURES, offered as u32);
        write(&mut transport, REG_DRIVER_FEATURES_SEL, 1);
        write(&mut transport, REG_DRIVER_FEATURES, (offered >> 32) as u32);
        write(
            &mut transport,
            REG_STATUS,
            STATUS_ACKNOWLEDGE | STATUS_DRIVER | STATUS_FEATURES_OK,
        );
        for q in 0..num_queues {
            let (desc, avail, used) = Self::ring_addrs(q);
            write(&mut transport, REG_QUEUE_SEL, q as u32);
            write(&mut transport, REG_QUEUE_NUM, TEST_QUEUE_SIZE as u32);
            write(&mut transport, REG_QUEUE_DESC_LOW, desc as u32);
            write(&mut transport, REG_QUEUE_AVAIL_LOW, avail as u32);
            write(&mut transport, REG_QUEUE_USED_LOW, used as u32);
            write(&mut transport, REG_QUEUE_READY, 1);
        }
        write(
            &mut transport,
            REG_STATUS,
            STATUS_ACKNOWLEDGE | STATUS_DRIVER | STATUS_FEATURES_OK | STATUS_DRIVER_OK,
        );
        assert!(transport.is_activated(), "handshake failed");

        VirtioHarness {
            mem,
            transport,
            irq,
            pulses,
            num_queues,
            next_buffer: BUFFER_AREA,
            next_desc: vec![0; num_queues],
            published: vec![0; num_queues],
        }
    }

    fn ring_addrs(queue: usize) -> (u64, u64, u64) {
        let base = RING_AREA + queue as u64 * PER_QUEUE_SPAN;
        (base, base + 0x1000, base + 0x2000)
    }

    /// Bump-allocates a guest buffer.
    pub fn alloc(&mut self, len: u64) -> u64 {
        let addr = self.next_buffer;
        self.next_buffer += (len + 0xf) & !0xf;
        addr
    }

    pub fn write_guest(&self, addr: u64, data: &[u8]) {
        self.mem.write_bytes(GuestAddress(addr), data).unwrap();
    }

    pub fn read_guest(&self, addr: u64, len: usize) -> Vec<u8> {
        self.mem.read_bytes(GuestAddress(addr), len).unwrap()
    }

    /// Publishes one chain on `queue`. Descriptors are given as
    /// `(addr, len, flags, next)` with `next` relative to the chain start.
    pub fn publish_chain(&mut self, queue: usize, descs: &[(u64, u32, u16, u16)]) {
        let (desc_table, avail, _) = Self::ring_addrs(queue);
        let base = self.next_desc[queue];
        assert!(base + descs.len() as u16 <= TEST_QUEUE_SIZE, "desc table full");
        for (i, (addr, len, flags, next)) in descs.iter().enumerate() {
            let slot = desc_table + 16 * (base + i as u16) as u64;
            self.mem.write_u64(GuestAddress(slot), *addr).unwrap();
            self.mem.write_u32(GuestAddress(slot + 8), *len).unwrap();
            self.mem.write_u16(GuestAddress(slot + 12), *flags).unwrap();
            self.mem
                .write_u16(GuestAddress(slot + 14), base + *next)
                .unwrap();
        }
        self.next_desc[queue] = base + descs.len() as u16;

        let slot = self.published[queue] % TEST_QUEUE_SIZE;
        self.mem
            .write_u16(GuestAddress(avail + 4 + 2 * slot as u64), base)
            .unwrap();
        self.published[queue] = self.published[queue].wrapping_add(1);
        self.mem
            .write_u16(GuestAddress(avail + 2), self.published[queue])
            .unwrap();
    }

    /// Fires the notify register for `queue`.
    pub fn notify(&mut self, queue: usize) {
        assert!(queue < self.num_queues);
        self.transport.write(
            REG_QUEUE_NOTIFY,
            &(queue as u32).to_le_bytes(),
            &self.mem,
            &self.irq,
        );
    }

    /// Delivers a backend readiness event to the device.
    pub fn backend_event(&mut self, tag: u32) {
        self.transport.backend_event(tag, &self.mem, &self.irq);
    }

    /// Guest-visible used index of `queue`.
    pub fn used_idx(&self, queue: usize) -> u16 {
        let (_, _, used) = Self::ring_addrs(queue);
        self.mem.read_u16(GuestAddress(used + 2)).unwrap()
    }

    /// The `(id, len)` of used entry `n` (0-based publication order).
    pub fn used_entry(&self, queue: usize, n: u16) -> (u32, u32) {
        let (_, _, used) = Self::ring_addrs(queue);
        let slot = n % TEST_QUEUE_SIZE;
        let addr = used + 4 + 8 * slot as u64;
        (
            self.mem.read_u32(GuestAddress(addr)).unwrap(),
            self.mem.read_u32(GuestAddress(addr + 4)).unwrap(),
        )
    }

    /// Length written for the most recent completion, if any.
    pub fn last_used_len(&self, queue: usize) -> Option<u32> {
        let idx = self.used_idx(queue);
        (idx > 0).then(|| self.used_entry(queue, idx - 1).1)
    }

    pub fn irq_pulses(&self) -> Vec<u32> {
        self.pulses.0.lock().unwrap().clone()
    }
}
