//! File-backed virtio block device.
//!
//! One request queue. Each chain carries a 16-byte header (type, sector),
//! data segments, and a final device-writable status byte. Requests run
//! synchronously against the backing file; a bad request gets an error
//! status, never a device abort.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::Path;

use crate::virtio::mmio::QueueCtx;
use crate::virtio::{DeviceError, DescriptorChain, VirtioDevice, VirtioDeviceType, VIRTIO_F_VERSION_1};

pub const SECTOR_SIZE: u64 = 512;
const QUEUE_SIZE: u16 = 256;

// Request types.
const REQ_IN: u32 = 0;
const REQ_OUT: u32 = 1;
const REQ_FLUSH: u32 = 4;

// Status bytes.
pub const STATUS_OK: u8 = 0;
pub const STATUS_IOERR: u8 = 1;
pub const STATUS_UNSUPPORTED: u8 = 2;

// Feature bits.
const VIRTIO_BLK_F_RO: u64 = 1 << 5;
const VIRTIO_BLK_F_FLUSH: u64 = 1 << 9;

#[derive(Debug, Default, Clone, Copy)]
pub struct BlockCounters {
    pub reads: u64,
    pub writes: u64,
    pub flushes: u64,
    pub request_errors: u64,
}

pub struct BlockDevice {
    backing: File,
    read_only: bool,
    capacity_sectors: u64,
    counters: BlockCounters,
}

impl BlockDevice {
    /// Opens `path` as the backing image; capacity is its length in whole
    /// 512-byte sectors.
    pub fn open(path: &Path, read_only: bool) -> io::Result<BlockDevice> {
        let backing = OpenOptions::new()
            .read(true)
            .write(!read_only)
            .open(path)?;
        let capacity_sectors = backing.metadata()?.len() / SECTOR_SIZE;
        Ok(BlockDevice {
            backing,
            read_only,
            capacity_sectors,
            counters: BlockCounters::default(),
        })
    }

    pub fn capacity_sectors(&self) -> u64 {
        self.capacity_sectors
    }

    pub fn read_only(&self) -> bool {
        self.read_only
    }

    pub fn counters(&self) -> BlockCounters {
        self.counters
    }

    /// Flushes the backing file to stable storage.
    pub fn sync(&self) -> io::Result<()> {
        self.backing.sync_all()
    }

    /// Executes one request chain: returns (status, bytes the device wrote
    /// into the chain, including the status byte).
    fn execute(&mut self, ctx: &QueueCtx, chain: &DescriptorChain) -> (u8, u32) {
        let Some(parsed) = parse_request(chain) else {
            self.counters.request_errors += 1;
            return (STATUS_UNSUPPORTED, 0);
        };
        let header = ctx
            .mem
            .read_bytes(parsed.header_addr, 16)
            .expect("validated segment");
        let req_type = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let sector = u64::from_le_bytes(header[8..16].try_into().unwrap());

        let (status, data_written) = match req_type {
            REQ_IN => self.do_read(ctx, chain, sector),
            REQ_OUT => self.do_write(ctx, chain, sector),
            REQ_FLUSH => {
                let status = match self.backing.sync_all() {
                    Ok(()) => {
                        self.counters.flushes += 1;
                        STATUS_OK
                    }
                    Err(_) => STATUS_IOERR,
                };
                (status, 0)
            }
            _ => {
                self.counters.request_errors += 1;
                (STATUS_UNSUPPORTED, 0)
            }
        };

        let _ = ctx.mem.write_bytes(parsed.status_addr, &[status]);
        (status, data_written + 1)
    }

    fn do_read(&mut self, ctx: &QueueCtx, chain: &DescriptorChain, sector: u64) -> (u8, u32) {
        let segments: Vec<_> = chain
            .writable()
            .take(chain.writable().count().saturating_sub(1))
            .copied()
            .collect();
        let total: u64 = segments.iter().map(|s| s.len as u64).sum();
        if !self.range_ok(sector, total) {
            self.counters.request_errors += 1;
            return (STATUS_IOERR, 0);
        }
        let mut offset = sector * SECTOR_SIZE;
        let mut written = 0u32;
        for seg in segments {
            let mut buf = vec![0u8; seg.len as usize];
            if self.backing.read_exact_at(&mut buf, offset).is_err() {
                self.counters.request_errors += 1;
                return (STATUS_IOERR, written);
            }
            let _ = ctx.mem.write_bytes(seg.addr, &buf);
            offset += seg.len as u64;
            written += seg.len;
        }
        self.counters.reads += 1;
        (STATUS_OK, written)
    }

    fn do_write(&mut self, ctx: &QueueCtx, chain: &DescriptorChain, sector: u64) -> (u8, u32) {
        if self.read_only {
            self.counters.request_errors += 1;
            return (STATUS_UNSUPPORTED, 0);
        }
        let segments: Vec<_> = chain.readable().skip(1).copied().collect();
        let total: u64 = segments.iter().map(|s| s.len as u64).sum();
        if !self.range_ok(sector, total) {
            self.counters.request_errors += 1;
            return (STATUS_IOERR, 0);
        }
        let mut offset = sector * SECTOR_SIZE;
        for seg in segments {
            let buf = ctx
                .mem
                .read_bytes(seg.addr, seg.len as usize)
                .expect("validated segment");
            if self.backing.write_all_at(&buf, offset).is_err() {
                self.counters.request_errors += 1;
                return (STATUS_IOERR, 0);
            }
            offset += seg.len as u64;
        }
        self.counters.writes += 1;
        (STATUS_OK, 0)
    }

    fn range_ok(&self, sector: u64, len: u64) -> bool {
        sector
            .checked_mul(SECTOR_SIZE)
            .and_then(|base| base.checked_add(len))
            .map(|end| end <= self.capacity_sectors * SECTOR_SIZE)
            .unwrap_or(false)
    }
}

struct ParsedRequest {
    header_addr: crate::guest_memory::GuestAddress,
    status_addr: crate::guest_memory::GuestAddress,
}

/// Checks the canonical request shape: a readable first segment of at
/// least 16 bytes and a writable final segment for the status byte.
fn parse_request(chain: &DescriptorChain) -> Option<ParsedRequest> {
    let first = chain.segments.first()?;
    let last = chain.segments.last()?;
    if first.writable || first.len < 16 || !last.writable || chain.segments.len() < 2 {
        return None;
    }
    // Status goes into the last byte of the final segment.
    let status_addr =
        crate::guest_memory::GuestAddress(last.addr.0 + (last.len as u64) - 1);
    Some(ParsedRequest {
        header_addr: first.addr,
        status_addr,
    })
}

impl VirtioDevice for BlockDevice {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn device_type(&self) -> VirtioDeviceType {
        VirtioDeviceType::Block
    }

    fn queue_max_sizes(&self) -> Vec<u16> {
        vec![QUEUE_SIZE]
    }

    fn device_features(&self) -> u64 {
        let mut features = VIRTIO_F_VERSION_1 | VIRTIO_BLK_F_FLUSH;
        if self.read_only {
            features |= VIRTIO_BLK_F_RO;
        }
        features
    }

    fn read_config(&self, offset: u64, data: &mut [u8]) {
        let config = self.capacity_sectors.to_le_bytes();
        for (i, b) in data.iter_mut().enumerate() {
            *b = config
                .get(offset as usize + i)
                .copied()
                .unwrap_or(0);
        }
    }

    fn on_queue_notify(&mut self, queue: usize, ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        while let Some(chain) = ctx.pop(queue)? {
            let (_, written) = self.execute(ctx, &chain);
            ctx.complete(queue, chain.head_index, written)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::test_util::VirtioHarness;
    use crate::virtio::queue::{DESC_F_NEXT, DESC_F_WRITE};

    fn image_with(bytes: &[u8], sectors: u64) -> tempfile::NamedTempFile {
        let file = tempfile::NamedTempFile::new().unwrap();
        file.as_file()
            .set_len(sectors * SECTOR_SIZE)
            .unwrap();
        file.as_file().write_all_at(bytes, 0).unwrap();
        file
    }

    /// Builds a three-segment request chain and returns the guest addresses
    /// of (header, data, status).
    fn push_request(
        h: &mut VirtioHarness,
        req_type: u32,
        sector: u64,
        data_len: u32,
        device_writes_data: bool,
    ) -> (u64, u64, u64) {
        let header_addr = h.alloc(16);
        let data_addr = h.alloc(data_len as u64);
        let status_addr = h.alloc(1);
        let mut header = [0u8; 16];
        header[0..4].copy_from_slice(&req_type.to_le_bytes());
        header[8..16].copy_from_slice(&sector.to_le_bytes());
        h.write_guest(header_addr, &header);

        let data_flags = if device_writes_data { DESC_F_WRITE | DESC_F_NEXT } else { DESC_F_NEXT };
        let descs = if data_len > 0 {
            vec![
                (header_addr, 16, DESC_F_NEXT, 1),
                (data_addr, data_len, data_flags, 2),
                (status_addr, 1, DESC_F_WRITE, 0),
            ]
        } else {
            vec![
                (header_addr, 16, DESC_F_NEXT, 1),
                (status_addr, 1, DESC_F_WRITE, 0),
            ]
        };
        h.publish_chain(0, &descs);
        (header_addr, data_addr, status_addr)
    }

    #[test]
    fn read_returns_image_bytes() {
        let file = image_with(&[0xDE, 0xAD, 0xBE, 0xEF], 16);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, data_addr, status_addr) = push_request(&mut h, REQ_IN, 0, 512, true);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_OK);
        assert_eq!(&h.read_guest(data_addr, 4), &[0xDE, 0xAD, 0xBE, 0xEF]);
        // Used length covers data plus the status byte.
        assert_eq!(h.last_used_len(0), Some(513));
    }

    #[test]
    fn write_persists_to_backing_file() {
        let file = image_with(&[], 16);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, data_addr, status_addr) = push_request(&mut h, REQ_OUT, 2, 512, false);
        h.write_guest(data_addr, &[0x5A; 512]);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_OK);

        let mut on_disk = vec![0u8; 512];
        file.as_file().read_exact_at(&mut on_disk, 2 * 512).unwrap();
        assert_eq!(on_disk, vec![0x5A; 512]);
    }

    #[test]
    fn write_to_read_only_device_refused() {
        let file = image_with(&[0xAA], 16);
        let dev = BlockDevice::open(file.path(), true).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, data_addr, status_addr) = push_request(&mut h, REQ_OUT, 0, 512, false);
        h.write_guest(data_addr, &[0x11; 512]);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_UNSUPPORTED);
        let mut on_disk = vec![0u8; 1];
        file.as_file().read_exact_at(&mut on_disk, 0).unwrap();
        assert_eq!(on_disk[0], 0xAA);
    }

    #[test]
    fn flush_reports_ok_after_sync() {
        let file = image_with(&[], 8);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, _, status_addr) = push_request(&mut h, REQ_FLUSH, 0, 0, false);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_OK);
    }

    #[test]
    fn out_of_range_request_gets_io_error() {
        let file = image_with(&[], 4);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, _, status_addr) = push_request(&mut h, REQ_IN, 4, 512, true);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_IOERR);
    }

    #[test]
    fn unknown_request_type_unsupported() {
        let file = image_with(&[], 4);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        let mut h = VirtioHarness::new(Box::new(dev), 1);
        let (_, _, status_addr) = push_request(&mut h, 9, 0, 0, false);
        h.notify(0);
        assert_eq!(h.read_guest(status_addr, 1)[0], STATUS_UNSUPPORTED);
    }

    #[test]
    fn capacity_in_config_space() {
        let file = image_with(&[], 100);
        let dev = BlockDevice::open(file.path(), false).unwrap();
        assert_eq!(dev.capacity_sectors(), 100);
        let mut buf = [0u8; 8];
        dev.read_config(0, &mut buf);
        assert_eq!(u64::from_le_bytes(buf), 100);
    }

    #[test]
    fn capacity_rounds_down_partial_sector() {
        let file = image_with(&[], 0);
        file.as_file().set_len(1000).unwrap();
        let dev = BlockDevice::open(file.path(), false).unwrap();
        assert_eq!(dev.capacity_sectors(), 1);
    }
}
