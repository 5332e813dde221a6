//! Virtio MMIO transport, register layout version 2 (legacy-free).
//!
//! Each device gets a 4 KiB register window in guest physical space. The
//! guest driver drives the status handshake, configures the split rings,
//! and kicks queues through the notify register; the device answers with
//! used-ring entries and an edge-pulsed interrupt line.

use crate::guest_memory::{GuestAddress, GuestMemoryMap};
use crate::virtio::irq::IrqAllocator;
use crate::virtio::queue::{DescriptorChain, QueueError, Virtqueue};
use crate::virtio::{DeviceError, VirtioDevice};

/// Register window size per device.
pub const MMIO_WINDOW_SIZE: u64 = 0x1000;
/// Base of the contiguous MMIO device window area, above guest RAM.
pub const MMIO_AREA_BASE: u64 = 0xd000_0000;

/// "virt" in little-endian, the transport magic.
pub const MMIO_MAGIC: u32 = 0x7472_6976;
/// Register layout version (2 = modern, legacy-free).
pub const MMIO_VERSION: u32 = 2;
const VENDOR_ID: u32 = 0;

// Register offsets (guest-visible ABI).
pub const REG_MAGIC: u64 = 0x00;
pub const REG_VERSION: u64 = 0x04;
pub const REG_DEVICE_ID: u64 = 0x08;
pub const REG_VENDOR_ID: u64 = 0x0c;
pub const REG_DEVICE_FEATURES: u64 = 0x10;
pub const REG_DEVICE_FEATURES_SEL: u64 = 0x14;
pub const REG_DRIVER_FEATURES: u64 = 0x20;
pub const REG_DRIVER_FEATURES_SEL: u64 = 0x24;
pub const REG_QUEUE_SEL: u64 = 0x30;
pub const REG_QUEUE_NUM_MAX: u64 = 0x34;
pub const REG_QUEUE_NUM: u64 = 0x38;
pub const REG_QUEUE_READY: u64 = 0x44;
pub const REG_QUEUE_NOTIFY: u64 = 0x50;
pub const REG_INTERRUPT_STATUS: u64 = 0x60;
pub const REG_INTERRUPT_ACK: u64 = 0x64;
pub const REG_STATUS: u64 = 0x70;
pub const REG_QUEUE_DESC_LOW: u64 = 0x80;
pub const REG_QUEUE_DESC_HIGH: u64 = 0x84;
pub const REG_QUEUE_AVAIL_LOW: u64 = 0x90;
pub const REG_QUEUE_AVAIL_HIGH: u64 = 0x94;
pub const REG_QUEUE_USED_LOW: u64 = 0xa0;
pub const REG_QUEUE_USED_HIGH: u64 = 0xa4;
pub const REG_CONFIG_GENERATION: u64 = 0xfc;
pub const REG_CONFIG_SPACE: u64 = 0x100;

// Device status bits.
pub const STATUS_ACKNOWLEDGE: u32 = 1;
pub const STATUS_DRIVER: u32 = 2;
pub const STATUS_DRIVER_OK: u32 = 4;
pub const STATUS_FEATURES_OK: u32 = 8;
pub const STATUS_DEVICE_NEEDS_RESET: u32 = 64;
pub const STATUS_FAILED: u32 = 128;

/// Interrupt-status bit: used ring has new entries.
pub const INT_USED_RING: u32 = 1;

/// Feature bit all modern drivers must accept.
pub const VIRTIO_F_VERSION_1: u64 = 1 << 32;

/// Counters for guest accesses the transport ignores rather than faults on.
#[derive(Debug, Default, Clone, Copy)]
pub struct MmioDiagnostics {
    pub unknown_register_accesses: u64,
    pub invalid_status_writes: u64,
    pub notifies_while_not_ready: u64,
    pub rejected_feature_sets: u64,
}

/// Per-queue view handed to a device while it processes work. Completions
/// recorded here decide whether an interrupt is raised afterwards.
pub struct QueueCtx<'a> {
    pub mem: &'a GuestMemoryMap,
    queues: &'a mut [Virtqueue],
    completed: Vec<usize>,
}

impl<'a> QueueCtx<'a> {
    pub fn queue(&mut self, index: usize) -> &mut Virtqueue {
        &mut self.queues[index]
    }

    pub fn queue_ready(&self, index: usize) -> bool {
        self.queues.get(index).map(Virtqueue::is_ready).unwrap_or(false)
    }

    pub fn pop(&mut self, index: usize) -> Result<Option<DescriptorChain>, QueueError> {
        self.queues[index].pop_chain(self.mem)
    }

    /// Publishes a completion and remembers the queue for interrupt delivery.
    pub fn complete(&mut self, index: usize, head: u16, written: u32) -> Result<(), QueueError> {
        self.queues[index].add_used(self.mem, head, written)?;
        self.completed.push(index);
        Ok(())
    }
}

/// One virtio device bound to an MMIO window and an interrupt line.
pub struct MmioTransport {
    base: GuestAddress,
    device_instance: u32,
    irq_line: u32,
    device: Box<dyn VirtioDevice>,
    queues: Vec<Virtqueue>,
    device_status: u32,
    device_features_sel: u32,
    driver_features_sel: u32,
    driver_features: u64,
    queue_sel: u32,
    interrupt_status: u32,
    config_generation: u32,
    diag: MmioDiagnostics,
}

impl MmioTransport {
    pub fn new(
        base: GuestAddress,
        device_instance: u32,
        irq_line: u32,
        device: Box<dyn VirtioDevice>,
    ) -> MmioTransport {
        let queues = device
            .queue_max_sizes()
            .iter()
            .map(|max| Virtqueue::new(*max))
            .collect();
        MmioTransport {
            base,
            device_instance,
            irq_line,
            device,
            queues,
            device_status: 0,
            device_features_sel: 0,
            driver_features_sel: 0,
            driver_features: 0,
            queue_sel: 0,
            interrupt_status: 0,
            config_generation: 0,
            diag: MmioDiagnostics::default(),
        }
    }

    pub fn base(&self) -> GuestAddress {
        self.base
    }

    pub fn irq_line(&self) -> u32 {
        self.irq_line
    }

    pub fn device_instance(&self) -> u32 {
        self.device_instance
    }

    pub fn device(&self) -> &dyn VirtioDevice {
        self.device.as_ref()
    }

    pub fn device_mut(&mut self) -> &mut dyn VirtioDevice {
        self.device.as_mut()
    }

    pub fn device_status(&self) -> u32 {
        self.device_status
    }

    pub fn interrupt_status(&self) -> u32 {
        self.interrupt_status
    }

    pub fn diagnostics(&self) -> MmioDiagnostics {
        self.diag
    }

    pub fn is_activated(&self) -> bool {
        self.device_status & STATUS_DRIVER_OK != 0 && self.device_status & STATUS_FAILED == 0
    }

    /// Kernel command-line fragment announcing this device window.
    pub fn cmdline_fragment(&self) -> String {
        format!(
            "virtio_mmio.device=4K@{:#x}:{}",
            self.base.0, self.irq_line
        )
    }

    fn selected_queue(&mut self) -> Option<&mut Virtqueue> {
        let idx = self.queue_sel as usize;
        self.queues.get_mut(idx)
    }

    /// Handles a guest read of `data.len()` bytes at `offset` in the window.
    pub fn read(&mut self, offset: u64, data: &mut [u8]) {
        if offset >= REG_CONFIG_SPACE {
            self.device.read_config(offset - REG_CONFIG_SPACE, data);
            return;
        }
        if data.len() != 4 {
            self.diag.unknown_register_accesses += 1;
            data.fill(0);
            return;
        }
        let value: u32 = match offset {
            REG_MAGIC => MMIO_MAGIC,
            REG_VERSION => MMIO_VERSION,
            REG_DEVICE_ID => self.device.device_type() as u32,
            REG_VENDOR_ID => VENDOR_ID,
            REG_DEVICE_FEATURES => {
                let shift = 32 * self.device_features_sel;
                if shift >= 64 {
                    0
                } else {
                    (self.device.device_features() >> shift) as u32
                }
            }
            REG_QUEUE_NUM_MAX => self
                .queues
                .get(self.queue_sel as usize)
                .map(|q| q.max_size() as u32)
                .unwrap_or(0),
            REG_QUEUE_READY => self
                .queues
                .get(self.queue_sel as usize)
                .map(|q| q.is_ready() as u32)
                .unwrap_or(0),
            REG_INTERRUPT_STATUS => self.interrupt_status,
            REG_STATUS => self.device_status,
            REG_CONFIG_GENERATION => self.config_generation,
            _ => {
                self.diag.unknown_register_accesses += 1;
                0
            }
        };
        data.copy_from_slice(&value.to_le_bytes());
    }

    /// Handles a guest write at `offset`; queue notifications run the device.
    pub fn write(
        &mut self,
        offset: u64,
        data: &[u8],
        mem: &GuestMemoryMap,
        irq: &IrqAllocator,
    ) {
        if offset >= REG_CONFIG_SPACE {
            self.device.write_config(offset - REG_CONFIG_SPACE, data);
            return;
        }
        if data.len() != 4 {
            self.diag.unknown_register_accesses += 1;
            return;
        }
        let value = u32::from_le_bytes(data.try_into().unwrap());
        match offset {
            REG_DEVICE_FEATURES_SEL => self.device_features_sel = value,
            REG_DRIVER_FEATURES => {
                let shift = 32 * self.driver_features_sel;
                if shift < 64 {
                    let mask = !(0xffff_ffffu64 << shift);
                    self.driver_features =
                        (self.driver_features & mask) | ((value as u64) << shift);
                }
            }
            REG_DRIVER_FEATURES_SEL => self.driver_features_sel = value,
            REG_QUEUE_SEL => self.queue_sel = value,
            REG_QUEUE_NUM => {
                if let Some(q) = self.selected_queue() {
                    q.set_size(value as u16);
                }
            }
            REG_QUEUE_READY => {
                if let Some(q) = self.selected_queue() {
                    if value == 1 {
                        if !q.activate(mem) {
                            self.diag.unknown_register_accesses += 1;
                        }
                    } else {
                        q.deactivate();
                    }
                }
            }
            REG_QUEUE_NOTIFY => self.queue_notify(value as usize, mem, irq),
            REG_INTERRUPT_ACK => self.interrupt_status &= !value,
            REG_STATUS => self.status_write(value),
            REG_QUEUE_DESC_LOW => self.set_ring_addr(RingAddr::Desc, false, value),
            REG_QUEUE_DESC_HIGH => self.set_ring_addr(RingAddr::Desc, true, value),
            REG_QUEUE_AVAIL_LOW => self.set_ring_addr(RingAddr::Avail, false, value),
            REG_QUEUE_AVAIL_HIGH => self.set_ring_addr(RingAddr::Avail, true, value),
            REG_QUEUE_USED_LOW => self.set_ring_addr(RingAddr::Used, false, value),
            REG_QUEUE_USED_HIGH => self.set_ring_addr(RingAddr::Used, true, value),
            _ => self.diag.unknown_register_accesses += 1,
        }
    }

    fn status_write(&mut self, value: u32) {
        if value == 0 {
            self.reset();
            return;
        }
        // The driver only ever adds bits, in handshake order.
        if value & self.device_status != self.device_status {
            self.diag.invalid_status_writes += 1;
            return;
        }
        let added = value & !self.device_status;
        if added & STATUS_DRIVER != 0 && value & STATUS_ACKNOWLEDGE == 0
            || added & STATUS_FEATURES_OK != 0 && value & STATUS_DRIVER == 0
            || added & STATUS_DRIVER_OK != 0 && value & STATUS_FEATURES_OK == 0
        {
            self.diag.invalid_status_writes += 1;
            return;
        }
        if added & STATUS_FEATURES_OK != 0 {
            let offered = self.device.device_features();
            let ok = self.driver_features & !offered == 0
                && self.driver_features & VIRTIO_F_VERSION_1 != 0;
            if !ok {
                // Leave FEATURES_OK unlatched; the driver reads status back
                // and sees the negotiation failed.
                self.diag.rejected_feature_sets += 1;
                self.device_status = value & !STATUS_FEATURES_OK;
                return;
            }
            self.device.set_driver_features(self.driver_features);
        }
        if added & STATUS_DRIVER_OK != 0 {
            self.device.activate();
        }
        self.device_status = value;
    }

    /// Full device reset: status 0, queues down, interrupts cleared.
    pub fn reset(&mut self) {
        self.device_status = 0;
        self.interrupt_status = 0;
        self.driver_features = 0;
        self.queue_sel = 0;
        for q in &mut self.queues {
            q.reset();
        }
        self.device.reset();
    }

    fn queue_notify(&mut self, index: usize, mem: &GuestMemoryMap, irq: &IrqAllocator) {
        if !self.is_activated() || !self.queues.get(index).map(Virtqueue::is_ready).unwrap_or(false)
        {
            self.diag.notifies_while_not_ready += 1;
            return;
        }
        let mut ctx = QueueCtx {
            mem,
            queues: &mut self.queues,
            completed: Vec::new(),
        };
        let result = self.device.on_queue_notify(index, &mut ctx);
        let completed = std::mem::take(&mut ctx.completed);
        self.finish_device_op(result, completed, mem, irq);
    }

    /// Delivers a backend readiness event (tap readable, host socket data)
    /// to the device. `tag` is device-defined.
    pub fn backend_event(&mut self, tag: u32, mem: &GuestMemoryMap, irq: &IrqAllocator) {
        if !self.is_activated() {
            return;
        }
        let mut ctx = QueueCtx {
            mem,
            queues: &mut self.queues,
            completed: Vec::new(),
        };
        let result = self.device.on_backend_event(tag, &mut ctx);
        let completed = std::mem::take(&mut ctx.completed);
        self.finish_device_op(result, completed, mem, irq);
    }

    fn finish_device_op(
        &mut self,
        result: Result<(), DeviceError>,
        completed: Vec<usize>,
        mem: &GuestMemoryMap,
        irq: &IrqAllocator,
    ) {
        let mut raise = false;
        for index in completed {
            if !self.queues[index].interrupts_suppressed(mem) {
                raise = true;
            }
        }
        if let Err(DeviceError::Queue(_)) = result {
            // A broken ring is unrecoverable until the driver resets us.
            self.device_status |= STATUS_DEVICE_NEEDS_RESET | STATUS_FAILED;
            for q in &mut self.queues {
                q.deactivate();
            }
            return;
        }
        if raise {
            self.interrupt_status |= INT_USED_RING;
            let _ = irq.assert_irq(self.device_instance);
        }
    }
}

enum RingAddr {
    Desc,
    Avail,
    Used,
}

impl MmioTransport {
    fn set_ring_addr(&mut self, which: RingAddr, high: bool, value: u32) {
        let Some(q) = self.selected_queue() else {
            return;
        };
        let update = |current: GuestAddress| -> GuestAddress {
            let cur = current.0;
            if high {
                GuestAddress((cur & 0xffff_ffff) | ((value as u64) << 32))
            } else {
                GuestAddress((cur & !0xffff_ffff) | value as u64)
            }
        };
        match which {
            RingAddr::Desc => {
                let addr = update(q.desc_table_addr());
                q.set_desc_table(addr);
            }
            RingAddr::Avail => {
                let addr = update(q.avail_ring_addr());
                q.set_avail_ring(addr);
            }
            RingAddr::Used => {
                let addr = update(q.used_ring_addr());
                q.set_used_ring(addr);
            }
        }
    }
}

/// Routes MMIO exits to the device window that owns the address.
pub struct MmioBus {
    transports: Vec<MmioTransport>,
}

impl Default for MmioBus {
    fn default() -> Self {
        Self::new()
    }
}

impl MmioBus {
    pub fn new() -> MmioBus {
        MmioBus {
            transports: Vec::new(),
        }
    }

    /// Adds a transport; windows must be disjoint.
    pub fn add(&mut self, transport: MmioTransport) -> Result<(), &'static str> {
        let new_start = transport.base.0;
        let new_end = new_start + MMIO_WINDOW_SIZE;
        for t in &self.transports {
            let start = t.base.0;
            let end = start + MMIO_WINDOW_SIZE;
            if new_start < end && start < new_end {
                return Err("MMIO windows overlap");
            }
        }
        self.transports.push(transport);
        Ok(())
    }

    pub fn transports(&self) -> &[MmioTransport] {
        &self.transports
    }

    pub fn transports_mut(&mut self) -> &mut [MmioTransport] {
        &mut self.transports
    }

    fn route(&mut self, addr: u64) -> Option<(&mut MmioTransport, u64)> {
        self.transports.iter_mut().find_map(|t| {
            let start = t.base.0;
            (addr >= start && addr < start + MMIO_WINDOW_SIZE).then(|| (t, addr - start))
        })
    }

    /// Dispatches an MMIO read exit. Unclaimed addresses read as zero.
    pub fn read(&mut self, addr: u64, data: &mut [u8]) -> bool {
        match self.route(addr) {
            Some((t, offset)) => {
                t.read(offset, data);
                true
            }
            None => {
                data.fill(0);
                false
            }
        }
    }

    /// Dispatches an MMIO write exit. Unclaimed addresses are ignored.
    pub fn write(
        &mut self,
        addr: u64,
        data: &[u8],
        mem: &GuestMemoryMap,
        irq: &IrqAllocator,
    ) -> bool {
        match self.route(addr) {
            Some((t, offset)) => {
                t.write(offset, data, mem, irq);
                true
            }
            None => false,
        }
    }
}
