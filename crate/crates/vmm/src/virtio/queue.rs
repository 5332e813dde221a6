//! Split-virtqueue state machine viewed through guest memory.
//!
//! The guest driver owns the descriptor table and available ring; the device
//! owns the used ring. Ring indices are free-running 16-bit counters; ring
//! slots are indexed modulo the queue size.

use std::collections::HashSet;
use std::fmt;
use std::num::Wrapping;

use crate::guest_memory::{GuestAddress, GuestMemoryMap};

/// Descriptor continues into `next`.
pub const DESC_F_NEXT: u16 = 0x1;
/// Buffer is device-writable.
pub const DESC_F_WRITE: u16 = 0x2;

/// Driver asks the device to skip used-buffer interrupts.
const AVAIL_F_NO_INTERRUPT: u16 = 0x1;

const DESC_ENTRY_SIZE: u64 = 16;

/// Queue sizes are powers of two up to this bound.
pub const MAX_QUEUE_SIZE: u16 = 256;

#[derive(Debug, PartialEq, Eq)]
pub enum QueueError {
    /// The queue is not ready (rings unconfigured or device reset).
    NotReady,
    /// Descriptor chain violates the ring contract.
    MalformedChain(&'static str),
    /// Completion for a head that was never popped, or completed twice.
    UnknownHead(u16),
}

impl fmt::Display for QueueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueueError::NotReady => write!(f, "virtqueue is not ready"),
            QueueError::MalformedChain(why) => write!(f, "malformed descriptor chain: {why}"),
            QueueError::UnknownHead(head) => {
                write!(f, "completion for unknown descriptor head {head}")
            }
        }
    }
}

impl std::error::Error for QueueError {}

/// A guest buffer descriptor as stored in the descriptor table.
#[derive(Debug, Clone, Copy)]
pub struct Descriptor {
    pub addr: GuestAddress,
    pub len: u32,
    pub flags: u16,
    pub next: u16,
}

impl Descriptor {
    pub fn has_next(&self) -> bool {
        self.flags & DESC_F_NEXT != 0
    }

    pub fn is_writable(&self) -> bool {
        self.flags & DESC_F_WRITE != 0
    }
}

/// One resolved buffer segment of a descriptor chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainSegment {
    pub addr: GuestAddress,
    pub len: u32,
    pub writable: bool,
}

/// A descriptor chain popped from the available ring, fully resolved and
/// validated against guest memory.
#[derive(Debug, Clone)]
pub struct DescriptorChain {
    pub head_index: u16,
    pub segments: Vec<ChainSegment>,
}

impl DescriptorChain {
    pub fn readable(&self) -> impl Iterator<Item = &ChainSegment> {
        self.segments.iter().filter(|s| !s.writable)
    }

    pub fn writable(&self) -> impl Iterator<Item = &ChainSegment> {
        self.segments.iter().filter(|s| s.writable)
    }

    /// Total bytes across device-readable segments.
    pub fn readable_len(&self) -> u64 {
        self.readable().map(|s| s.len as u64).sum()
    }

    /// Total bytes across device-writable segments.
    pub fn writable_len(&self) -> u64 {
        self.writable().map(|s| s.len as u64).sum()
    }

    /// Copies all device-readable bytes into one buffer, in table order.
    pub fn read_all(&self, mem: &GuestMemoryMap) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.readable_len() as usize);
        for seg in self.readable() {
            // Segments were bounds-checked when the chain was resolved.
            let bytes = mem
                .read_bytes(seg.addr, seg.len as usize)
                .expect("validated segment");
            out.extend_from_slice(&bytes);
        }
        out
    }

    /// Scatters `data` across device-writable segments, returning the number
    /// of bytes actually written (capped by writable capacity).
    pub fn write_all(&self, mem: &GuestMemoryMap, data: &[u8]) -> usize {
        let mut written = 0;
        for seg in self.writable() {
            if written == data.len() {
                break;
            }
            let take = (seg.len as usize).min(data.len() - written);
            mem.write_bytes(seg.addr, &data[written..written + take])
                .expect("validated segment");
            written += take;
        }
        written
    }
}

/// Device-side state of one split virtqueue.
#[derive(Debug)]
pub struct Virtqueue {
    max_size: u16,
    size: u16,
    ready: bool,
    desc_table: GuestAddress,
    avail_ring: GuestAddress,
    used_ring: GuestAddress,
    next_avail: Wrapping<u16>,
    next_used: Wrapping<u16>,
    in_flight: HashSet<u16>,
}

impl Virtqueue {
    pub fn new(max_size: u16) -> Virtqueue {
        Virtqueue {
            max_size,
            size: max_size,
            ready: false,
            desc_table: GuestAddress(0),
            avail_ring: GuestAddress(0),
            used_ring: GuestAddress(0),
            next_avail: Wrapping(0),
            next_used: Wrapping(0),
            in_flight: HashSet::new(),
        }
    }

    pub fn max_size(&self) -> u16 {
        self.max_size
    }

    pub fn size(&self) -> u16 {
        self.size
    }

    pub fn set_size(&mut self, size: u16) {
        self.size = size;
    }

    pub fn set_desc_table(&mut self, addr: GuestAddress) {
        self.desc_table = addr;
    }

    pub fn set_avail_ring(&mut self, addr: GuestAddress) {
        self.avail_ring = addr;
    }

    pub fn set_used_ring(&mut self, addr: GuestAddress) {
        self.used_ring = addr;
    }

    pub fn desc_table_addr(&self) -> GuestAddress {
        self.desc_table
    }

    pub fn avail_ring_addr(&self) -> GuestAddress {
        self.avail_ring
    }

    pub fn used_ring_addr(&self) -> GuestAddress {
        self.used_ring
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    /// Number of completions published so far (free-running).
    pub fn used_count(&self) -> u16 {
        self.next_used.0
    }

    /// Validates the configured geometry against guest memory and marks the
    /// queue live. Returns false (queue stays down) on bad geometry.
    pub fn activate(&mut self, mem: &GuestMemoryMap) -> bool {
        if !self.geometry_valid(mem) {
            return false;
        }
        self.ready = true;
        true
    }

    pub fn deactivate(&mut self) {
        self.ready = false;
    }

    /// Back to power-on state; forgets ring addresses and indices.
    pub fn reset(&mut self) {
        self.size = self.max_size;
        self.ready = false;
        self.desc_table = GuestAddress(0);
        self.avail_ring = GuestAddress(0);
        self.used_ring = GuestAddress(0);
        self.next_avail = Wrapping(0);
        self.next_used = Wrapping(0);
        self.in_flight.clear();
    }

    fn geometry_valid(&self, mem: &GuestMemoryMap) -> bool {
        let size = self.size as u64;
        if self.size == 0 || self.size > self.max_size || !self.size.is_power_of_two() {
            return false;
        }
        mem.check_range(self.desc_table, (DESC_ENTRY_SIZE * size) as usize)
            .is_ok()
            && mem.check_range(self.avail_ring, (4 + 2 * size) as usize).is_ok()
            && mem.check_range(self.used_ring, (4 + 8 * size) as usize).is_ok()
    }

    /// Index the guest has published up to (avail ring idx field).
    fn guest_avail_idx(&self, mem: &GuestMemoryMap) -> u16 {
        mem.read_u16(GuestAddress(self.avail_ring.0 + 2)).unwrap_or(0)
    }

    /// True when the driver asked to suppress used-buffer interrupts.
    pub fn interrupts_suppressed(&self, mem: &GuestMemoryMap) -> bool {
        if !self.ready {
            return false;
        }
        let flags = mem.read_u16(self.avail_ring).unwrap_or(0);
        flags & AVAIL_F_NO_INTERRUPT != 0
    }

    fn read_descriptor(&self, mem: &GuestMemoryMap, index: u16) -> Result<Descriptor, QueueError> {
        let base = GuestAddress(self.desc_table.0 + DESC_ENTRY_SIZE * index as u64);
        let addr = mem
            .read_u64(base)
            .map_err(|_| QueueError::MalformedChain("descriptor table out of bounds"))?;
        let len = mem.read_u32(GuestAddress(base.0 + 8)).unwrap_or(0);
        let flags = mem.read_u16(GuestAddress(base.0 + 12)).unwrap_or(0);
        let next = mem.read_u16(GuestAddress(base.0 + 14)).unwrap_or(0);
        Ok(Descriptor {
            addr: GuestAddress(addr),
            len,
            flags,
            next,
        })
    }

    /// Pops the next available descriptor chain, or `None` when the guest
    /// has published nothing new. Chains are resolved segment by segment
    /// and validated; a broken chain poisons the device, not the VMM.
    pub fn pop_chain(
        &mut self,
        mem: &GuestMemoryMap,
    ) -> Result<Option<DescriptorChain>, QueueError> {
        if !self.ready {
            return Err(QueueError::NotReady);
        }
        if self.next_avail.0 == self.guest_avail_idx(mem) {
            return Ok(None);
        }
        let slot = self.next_avail.0 % self.size;
        let head = mem
            .read_u16(GuestAddress(self.avail_ring.0 + 4 + 2 * slot as u64))
            .map_err(|_| QueueError::MalformedChain("available ring out of bounds"))?;
        if head >= self.size {
            return Err(QueueError::MalformedChain("head index out of range"));
        }

        let mut segments = Vec::new();
        let mut index = head;
        loop {
            if segments.len() >= self.size as usize {
                return Err(QueueError::MalformedChain("chain longer than queue size"));
            }
            let desc = self.read_descriptor(mem, index)?;
            if desc.len == 0 {
                return Err(QueueError::MalformedChain("zero-length descriptor"));
            }
            if mem.check_range(desc.addr, desc.len as usize).is_err() {
                return Err(QueueError::MalformedChain("buffer outside guest memory"));
            }
            segments.push(ChainSegment {
                addr: desc.addr,
                len: desc.len,
                writable: desc.is_writable(),
            });
            if !desc.has_next() {
                break;
            }
            if desc.next >= self.size {
                return Err(QueueError::MalformedChain("next index out of range"));
            }
            if desc.next == index {
                return Err(QueueError::MalformedChain("self-referencing descriptor"));
            }
            index = desc.next;
        }

        self.next_avail += Wrapping(1);
        self.in_flight.insert(head);
        Ok(Some(DescriptorChain {
            head_index: head,
            segments,
        }))
    }

    /// Publishes a completion: writes the used element for `head`, then
    /// advances the guest-visible used index. The element is written before
    /// the index so the guest never observes an unwritten slot.
    pub fn add_used(
        &mut self,
        mem: &GuestMemoryMap,
        head: u16,
        written_len: u32,
    ) -> Result<(), QueueError> {
        if !self.ready {
            return Err(QueueError::NotReady);
        }
        if !self.in_flight.remove(&head) {
            return Err(QueueError::UnknownHead(head));
        }
        let slot = self.next_used.0 % self.size;
        let elem_addr = GuestAddress(self.used_ring.0 + 4 + 8 * slot as u64);
        mem.write_u32(elem_addr, head as u32)
            .map_err(|_| QueueError::MalformedChain("used ring out of bounds"))?;
        mem.write_u32(GuestAddress(elem_addr.0 + 4), written_len)
            .map_err(|_| QueueError::MalformedChain("used ring out of bounds"))?;
        self.next_used += Wrapping(1);
        mem.write_u16(GuestAddress(self.used_ring.0 + 2), self.next_used.0)
            .map_err(|_| QueueError::MalformedChain("used ring out of bounds"))?;
        Ok(())
    }
}
