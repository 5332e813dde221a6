//! Guest physical address space.
//!
//! The guest sees a flat physical address space assembled from ordered,
//! non-overlapping regions, each backed by an anonymous host mapping. All
//! accessors are bounds-checked and all-or-nothing: a failed access never
//! writes a partial range. Multi-byte values are little-endian.

use std::fmt;

/// A guest-physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GuestAddress(pub u64);

impl GuestAddress {
    /// Checked addition; guest address arithmetic must never wrap.
    pub fn checked_add(self, offset: u64) -> Option<GuestAddress> {
        self.0.checked_add(offset).map(GuestAddress)
    }

    pub fn offset(self) -> u64 {
        self.0
    }
}

impl fmt::Display for GuestAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Width of a scalar access, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    W1 = 1,
    W2 = 2,
    W4 = 4,
    W8 = 8,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        self as usize
    }

    pub fn from_bytes(n: usize) -> Option<ScalarWidth> {
        match n {
            1 => Some(ScalarWidth::W1),
            2 => Some(ScalarWidth::W2),
            4 => Some(ScalarWidth::W4),
            8 => Some(ScalarWidth::W8),
            _ => None,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum MemoryError {
    /// Two regions in the requested layout overlap.
    OverlappingRegions,
    /// A region with zero length was requested.
    ZeroSizeRegion,
    /// The layout was empty, or a region end overflows the address space.
    InvalidLayout,
    /// The access does not start inside any mapped region.
    OutOfBounds { addr: u64, len: usize },
    /// The access starts inside a region but runs past its end.
    CrossesRegionBoundary { addr: u64, len: usize },
}

impl fmt::Display for MemoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryError::OverlappingRegions => write!(f, "memory regions overlap"),
            MemoryError::ZeroSizeRegion => write!(f, "memory region has zero size"),
            MemoryError::InvalidLayout => write!(f, "invalid memory layout"),
            MemoryError::OutOfBounds { addr, len } => {
                write!(f, "access of {len} bytes at {addr:#x} is outside guest memory")
            }
            MemoryError::CrossesRegionBoundary { addr, len } => {
                write!(f, "access of {len} bytes at {addr:#x} crosses a region boundary")
            }
        }
    }
}

impl std::error::Error for MemoryError {}

type Result<T> = std::result::Result<T, MemoryError>;

/// One contiguous region of guest RAM, backed by an anonymous host mapping.
///
/// The backing mapping is created zero-filled and never moves, so its host
/// address can be handed to the hypervisor as a memory slot.
#[derive(Debug)]
pub struct MemoryRegion {
    guest_base: GuestAddress,
    size: u64,
    host: *mut u8,
}

// Accessors copy raw bytes through a stable mapping. Concurrent access to
// overlapping ranges is a guest-visible race, not host UB at this level;
// the guest owns the consequences.
unsafe impl Send for MemoryRegion {}
unsafe impl Sync for MemoryRegion {}

impl MemoryRegion {
    fn new(guest_base: GuestAddress, size: u64) -> Result<MemoryRegion> {
        if size == 0 {
            return Err(MemoryError::ZeroSizeRegion);
        }
        guest_base
            .checked_add(size)
            .ok_or(MemoryError::InvalidLayout)?;
        // SAFETY: anonymous private mapping, checked for failure below.
        let host = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                size as usize,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if host == libc::MAP_FAILED {
            return Err(MemoryError::InvalidLayout);
        }
        Ok(MemoryRegion {
            guest_base,
            size,
            host: host as *mut u8,
        })
    }

    pub fn guest_base(&self) -> GuestAddress {
        self.guest_base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// End of the region, one past the last valid address.
    pub fn end(&self) -> u64 {
        self.guest_base.0 + self.size
    }

    /// Host virtual address of the backing mapping, for hypervisor slots.
    pub fn host_addr(&self) -> u64 {
        self.host as u64
    }

    fn contains(&self, addr: u64) -> bool {
        addr >= self.guest_base.0 && addr < self.end()
    }
}

impl Drop for MemoryRegion {
    fn drop(&mut self) {
        // SAFETY: host/size came from a successful mmap in `new`.
        unsafe {
            libc::munmap(self.host as *mut libc::c_void, self.size as usize);
        }
    }
}

/// The guest physical address space: sorted, disjoint regions.
#[derive(Debug)]
pub struct GuestMemoryMap {
    regions: Vec<MemoryRegion>,
}

/// Start of the legacy I/O memory hole; RAM below this is the low region.
pub const IO_HOLE_START: u64 = 0xA_0000;
/// First address above the I/O memory hole; the high RAM region starts here.
pub const HIMEM_START: u64 = 0x10_0000;

impl GuestMemoryMap {
    /// Builds a map from `(base, size)` pairs. Regions are sorted; overlap
    /// or zero size is rejected and every region starts out zero-filled.
    pub fn new(layout: &[(GuestAddress, u64)]) -> Result<GuestMemoryMap> {
        if layout.is_empty() {
            return Err(MemoryError::InvalidLayout);
        }
        let mut sorted: Vec<(GuestAddress, u64)> = layout.to_vec();
        sorted.sort_by_key(|(base, _)| *base);
        for pair in sorted.windows(2) {
            let (base_a, size_a) = pair[0];
            if size_a == 0 {
                return Err(MemoryError::ZeroSizeRegion);
            }
            let end_a = base_a
                .checked_add(size_a)
                .ok_or(MemoryError::InvalidLayout)?;
            if end_a.0 > pair[1].0 .0 {
                return Err(MemoryError::OverlappingRegions);
            }
        }
        let mut regions = Vec::with_capacity(sorted.len());
        for (base, size) in sorted {
            regions.push(MemoryRegion::new(base, size)?);
        }
        Ok(GuestMemoryMap { regions })
    }

    /// Standard x86 layout for `ram_size` bytes of guest RAM: everything
    /// below the I/O hole plus the range from 1 MiB up to `ram_size`. The
    /// hole itself is never backed, so stray accesses there fault.
    pub fn with_ram_size(ram_size: u64) -> Result<GuestMemoryMap> {
        if ram_size <= IO_HOLE_START {
            return GuestMemoryMap::new(&[(GuestAddress(0), ram_size)]);
        }
        if ram_size <= HIMEM_START {
            return GuestMemoryMap::new(&[(GuestAddress(0), IO_HOLE_START)]);
        }
        GuestMemoryMap::new(&[
            (GuestAddress(0), IO_HOLE_START),
            (GuestAddress(HIMEM_START), ram_size - HIMEM_START),
        ])
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    /// One past the highest mapped guest address.
    pub fn last_addr(&self) -> u64 {
        self.regions.last().map(|r| r.end()).unwrap_or(0)
    }

    /// The region containing `addr`, if any.
    pub fn find_region(&self, addr: GuestAddress) -> Option<&MemoryRegion> {
        let idx = self
            .regions
            .partition_point(|r| r.end() <= addr.0)
            .min(self.regions.len().saturating_sub(1));
        let region = self.regions.get(idx)?;
        region.contains(addr.0).then_some(region)
    }

    /// Validates that `[addr, addr + len)` lies within exactly one region
    /// and returns the host pointer for it. Zero-length accesses only need
    /// a valid start address.
    fn host_range(&self, addr: GuestAddress, len: usize) -> Result<*mut u8> {
        let region = self.find_region(addr).ok_or(MemoryError::OutOfBounds {
            addr: addr.0,
            len,
        })?;
        let end = addr
            .checked_add(len as u64)
            .ok_or(MemoryError::OutOfBounds { addr: addr.0, len })?;
        if end.0 > region.end() {
            return Err(MemoryError::CrossesRegionBoundary { addr: addr.0, len });
        }
        let offset = (addr.0 - region.guest_base.0) as usize;
        // SAFETY: offset + len is within the region mapping by the checks above.
        Ok(unsafe { region.host.add(offset) })
    }

    /// Validates `[addr, addr + len)` without touching the bytes.
    pub fn check_range(&self, addr: GuestAddress, len: usize) -> Result<()> {
        self.host_range(addr, len).map(|_| ())
    }

    /// Copies `data` into guest memory. All-or-nothing: on error nothing
    /// is written.
    pub fn write_bytes(&self, addr: GuestAddress, data: &[u8]) -> Result<()> {
        if data.is_empty() {
            self.host_range(addr, 0)?;
            return Ok(());
        }
        let dst = self.host_range(addr, data.len())?;
        // SAFETY: host_range validated [dst, dst + len).
        unsafe {
            std::ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
        }
        Ok(())
    }

    /// Fills `buf` from guest memory; mirror of `write_bytes`.
    pub fn read_into(&self, addr: GuestAddress, buf: &mut [u8]) -> Result<()> {
        if buf.is_empty() {
            self.host_range(addr, 0)?;
            return Ok(());
        }
        let src = self.host_range(addr, buf.len())?;
        // SAFETY: host_range validated [src, src + len).
        unsafe {
            std::ptr::copy_nonoverlapping(src, buf.as_mut_ptr(), buf.len());
        }
        Ok(())
    }

    pub fn read_bytes(&self, addr: GuestAddress, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.read_into(addr, &mut buf)?;
        Ok(buf)
    }

    /// Reads a little-endian scalar of the given width.
    pub fn read_scalar(&self, addr: GuestAddress, width: ScalarWidth) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_into(addr, &mut buf[..width.bytes()])?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Writes a little-endian scalar of the given width; the value is
    /// truncated to the width.
    pub fn write_scalar(&self, addr: GuestAddress, width: ScalarWidth, value: u64) -> Result<()> {
        let bytes = value.to_le_bytes();
        self.write_bytes(addr, &bytes[..width.bytes()])
    }

    pub fn read_u16(&self, addr: GuestAddress) -> Result<u16> {
        Ok(self.read_scalar(addr, ScalarWidth::W2)? as u16)
    }

    pub fn read_u32(&self, addr: GuestAddress) -> Result<u32> {
        Ok(self.read_scalar(addr, ScalarWidth::W4)? as u32)
    }

    pub fn read_u64(&self, addr: GuestAddress) -> Result<u64> {
        self.read_scalar(addr, ScalarWidth::W8)
    }

    pub fn write_u16(&self, addr: GuestAddress, value: u16) -> Result<()> {
        self.write_scalar(addr, ScalarWidth::W2, value as u64)
    }

    pub fn write_u32(&self, addr: GuestAddress, value: u32) -> Result<()> {
        self.write_scalar(addr, ScalarWidth::W4, value as u64)
    }

    pub fn write_u64(&self, addr: GuestAddress, value: u64) -> Result<()> {
        self.write_scalar(addr, ScalarWidth::W8, value)
    }
}
