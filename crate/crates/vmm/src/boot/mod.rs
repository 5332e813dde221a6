//! Direct 64-bit Linux boot.
//!
//! No BIOS, no bootloader: the protected-mode kernel is copied to 1 MiB and
//! entered straight at its 64-bit entry point (+0x200), skipping real mode
//! and decompression. Everything the kernel expects from a bootloader — the
//! boot-parameter page, command line, an initramfs reference, an e820 map,
//! identity page tables and a flat GDT — is written into guest memory first.

pub mod bzimage;

use std::fmt;

use crate::guest_memory::{GuestAddress, GuestMemoryMap, MemoryError};
pub use bzimage::{parse_bzimage, BzImageError, BzImageInfo, ENTRY_OFFSET_64};

/// Where the protected-mode kernel is loaded.
pub const KERNEL_LOAD_ADDR: u64 = 0x10_0000;
/// Boot-parameter ("zero") page.
pub const ZERO_PAGE_ADDR: u64 = 0x7000;
/// Kernel command line.
pub const CMDLINE_ADDR: u64 = 0x2_0000;
/// Flat GDT used for the 64-bit entry.
pub const GDT_ADDR: u64 = 0x1000;
/// Zeroed IDT next to the GDT.
pub const IDT_ADDR: u64 = 0x1040;
/// Root of the identity page tables (PML4).
pub const PAGE_TABLE_ROOT: u64 = 0x9000;
/// Initial stack pointer for the entry trampoline.
pub const BOOT_STACK_POINTER: u64 = 0x8ff0;
/// Command line is capped at one page, NUL included.
pub const CMDLINE_MAX: usize = 4096;

const PDPT_ADDR: u64 = 0xa000;
const PD_ADDR: u64 = 0xb000;

// Zero-page field offsets (x86 boot protocol).
const ZP_E820_ENTRIES: u64 = 0x1e8;
const ZP_SETUP_HEADER: u64 = 0x1f1;
const ZP_TYPE_OF_LOADER: u64 = 0x210;
const ZP_LOADFLAGS: u64 = 0x211;
const ZP_RAMDISK_IMAGE: u64 = 0x218;
const ZP_RAMDISK_SIZE: u64 = 0x21c;
const ZP_CMD_LINE_PTR: u64 = 0x228;
const ZP_CMDLINE_SIZE: u64 = 0x238;
const ZP_E820_TABLE: u64 = 0x2d0;
const E820_MAX_ENTRIES: usize = 128;

const LOADER_TYPE_UNDEFINED: u8 = 0xff;
const LOADFLAG_LOADED_HIGH: u8 = 0x01;

/// Built-in empty initramfs: a newc cpio archive holding only the trailer
/// record. Handing the kernel this instead of nothing keeps it from probing
/// for an external initrd.
pub const DEFAULT_INITRAMFS: &[u8] = b"070701\
00000000000000000000000000000000\
00000001000000000000000000000000\
000000000000000000000000\
0000000B\
00000000\
TRAILER!!!\0\0\0\0";

/// Recorded length of [`DEFAULT_INITRAMFS`].
pub const DEFAULT_INITRAMFS_LEN: usize = 124;

/// Memory-map entry kinds handed to the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum E820Kind {
    Usable = 1,
    Reserved = 2,
}

#[derive(Debug, PartialEq, Eq)]
pub enum BootError {
    /// Kernel (plus initramfs) does not fit in guest RAM.
    ImageTooLarge,
    /// Command line longer than the one-page cap.
    CmdlineTooLong,
    Image(BzImageError),
    Memory(MemoryError),
}

impl fmt::Display for BootError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BootError::ImageTooLarge => write!(f, "kernel image does not fit in guest memory"),
            BootError::CmdlineTooLong => {
                write!(f, "command line exceeds {CMDLINE_MAX} bytes")
            }
            BootError::Image(e) => write!(f, "{e}"),
            BootError::Memory(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BootError {}

impl From<BzImageError> for BootError {
    fn from(e: BzImageError) -> Self {
        BootError::Image(e)
    }
}

impl From<MemoryError> for BootError {
    fn from(e: MemoryError) -> Self {
        BootError::Memory(e)
    }
}

/// Resolved placement of every boot artifact in guest memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootLayout {
    pub kernel_load: GuestAddress,
    pub zero_page: GuestAddress,
    pub cmdline_addr: GuestAddress,
    /// Present only when the caller supplies an initramfs; the built-in
    /// empty archive otherwise lands right after the kernel at load time.
    pub initramfs_addr: Option<GuestAddress>,
    pub page_table_root: GuestAddress,
    pub gdt_addr: GuestAddress,
}

fn align_up(value: u64, alignment: u64) -> u64 {
    (value + alignment - 1) & !(alignment - 1)
}

/// Plans the memory layout for a parsed kernel, a command line of
/// `cmdline_len` bytes and an optional initramfs of `initramfs_len` bytes
/// (zero = none supplied), inside `guest_ram` bytes of RAM.
pub fn plan_layout(
    info: &BzImageInfo,
    cmdline_len: usize,
    initramfs_len: u64,
    guest_ram: u64,
) -> Result<BootLayout, BootError> {
    if cmdline_len + 1 > CMDLINE_MAX {
        return Err(BootError::CmdlineTooLong);
    }
    let kernel_end = KERNEL_LOAD_ADDR + info.protected_mode_len as u64;
    // Room after the kernel for at least the built-in initramfs page.
    let initramfs_base = align_up(kernel_end, 4096);
    let initramfs_reserve = if initramfs_len > 0 { initramfs_len } else { 4096 };
    if initramfs_base
        .checked_add(initramfs_reserve)
        .map(|end| end > guest_ram)
        .unwrap_or(true)
    {
        return Err(BootError::ImageTooLarge);
    }
    Ok(BootLayout {
        kernel_load: GuestAddress(KERNEL_LOAD_ADDR),
        zero_page: GuestAddress(ZERO_PAGE_ADDR),
        cmdline_addr: GuestAddress(CMDLINE_ADDR),
        initramfs_addr: (initramfs_len > 0).then_some(GuestAddress(initramfs_base)),
        page_table_root: GuestAddress(PAGE_TABLE_ROOT),
        gdt_addr: GuestAddress(GDT_ADDR),
    })
}

/// Builds the e820 map for `guest_ram` bytes of RAM: usable low memory up
/// to the EBDA, reserved through the I/O hole, usable from 1 MiB up.
pub fn build_e820(guest_ram: u64) -> Vec<(u64, u64, E820Kind)> {
    vec![
        (0, 0x9_FC00, E820Kind::Usable),
        (0x9_FC00, 0x10_0000 - 0x9_FC00, E820Kind::Reserved),
        (0x10_0000, guest_ram - 0x10_0000, E820Kind::Usable),
    ]
}

/// Copies the kernel, command line, initramfs, boot-parameter page, page
/// tables and GDT into guest memory and returns the 64-bit entry point.
///
/// When `initramfs` is `None` the built-in empty archive is written after
/// the kernel and referenced from the zero page. Loading is idempotent:
/// running it twice leaves guest memory byte-identical.
pub fn load_guest(
    mem: &GuestMemoryMap,
    image: &[u8],
    info: &BzImageInfo,
    layout: &BootLayout,
    cmdline: &str,
    initramfs: Option<&[u8]>,
) -> Result<GuestAddress, BootError> {
    if cmdline.len() + 1 > CMDLINE_MAX {
        return Err(BootError::CmdlineTooLong);
    }

    // Protected-mode kernel at 1 MiB.
    mem.write_bytes(layout.kernel_load, &image[info.protected_mode_offset..])?;

    // NUL-terminated command line.
    mem.write_bytes(layout.cmdline_addr, cmdline.as_bytes())?;
    mem.write_bytes(
        GuestAddress(layout.cmdline_addr.0 + cmdline.len() as u64),
        &[0],
    )?;

    // Initramfs: caller-supplied at the planned address, or the built-in
    // empty archive right after the kernel.
    let kernel_end = layout.kernel_load.0 + (image.len() - info.protected_mode_offset) as u64;
    let (initramfs_addr, initramfs_bytes) = match (initramfs, layout.initramfs_addr) {
        (Some(bytes), Some(addr)) => (addr, bytes),
        (Some(bytes), None) => (GuestAddress(align_up(kernel_end, 4096)), bytes),
        (None, _) => (GuestAddress(align_up(kernel_end, 4096)), DEFAULT_INITRAMFS),
    };
    mem.write_bytes(initramfs_addr, initramfs_bytes)?;

    write_zero_page(
        mem,
        info,
        layout,
        cmdline.len(),
        initramfs_addr,
        initramfs_bytes.len(),
    )?;
    write_page_tables(mem)?;
    write_gdt_idt(mem)?;

    Ok(GuestAddress(layout.kernel_load.0 + ENTRY_OFFSET_64))
}

fn write_zero_page(
    mem: &GuestMemoryMap,
    info: &BzImageInfo,
    layout: &BootLayout,
    cmdline_len: usize,
    initramfs_addr: GuestAddress,
    initramfs_len: usize,
) -> Result<(), BootError> {
    let mut page = vec![0u8; 4096];

    // Carry the kernel's own setup header through, then override the
    // bootloader-owned fields.
    let hdr_start = ZP_SETUP_HEADER as usize;
    let hdr_end = (hdr_start + info.setup_header.len()).min(page.len());
    page[hdr_start..hdr_end].copy_from_slice(&info.setup_header[..hdr_end - hdr_start]);

    page[ZP_TYPE_OF_LOADER as usize] = LOADER_TYPE_UNDEFINED;
    page[ZP_LOADFLAGS as usize] |= LOADFLAG_LOADED_HIGH;

    let put_u32 = |page: &mut [u8], off: u64, value: u32| {
        page[off as usize..off as usize + 4].copy_from_slice(&value.to_le_bytes());
    };
    put_u32(&mut page, ZP_CMD_LINE_PTR, layout.cmdline_addr.0 as u32);
    put_u32(&mut page, ZP_CMDLINE_SIZE, cmdline_len as u32);
    put_u32(&mut page, ZP_RAMDISK_IMAGE, initramfs_addr.0 as u32);
    put_u32(&mut page, ZP_RAMDISK_SIZE, initramfs_len as u32);

    let entries = build_e820(mem.last_addr());
    assert!(entries.len() <= E820_MAX_ENTRIES);
    page[ZP_E820_ENTRIES as usize] = entries.len() as u8;
    for (i, (base, size, kind)) in entries.iter().enumerate() {
        let off = ZP_E820_TABLE as usize + i * 20;
        page[off..off + 8].copy_from_slice(&base.to_le_bytes());
        page[off + 8..off + 16].copy_from_slice(&size.to_le_bytes());
        page[off + 16..off + 20].copy_from_slice(&(*kind as u32).to_le_bytes());
    }

    mem.write_bytes(layout.zero_page, &page)?;
    Ok(())
}

/// Four-level identity map of the first 1 GiB using 2 MiB pages: one PML4
/// entry, one PDPT entry, one page directory of 512 large-page entries.
fn write_page_tables(mem: &GuestMemoryMap) -> Result<(), BootError> {
    const PRESENT_RW: u64 = 0x3;
    const LARGE_PAGE: u64 = 0x80;

    mem.write_u64(GuestAddress(PAGE_TABLE_ROOT), PDPT_ADDR | PRESENT_RW)?;
    mem.write_u64(GuestAddress(PDPT_ADDR), PD_ADDR | PRESENT_RW)?;
    let mut pd = Vec::with_capacity(512 * 8);
    for i in 0..512u64 {
        pd.extend_from_slice(&((i << 21) | PRESENT_RW | LARGE_PAGE).to_le_bytes());
    }
    mem.write_bytes(GuestAddress(PD_ADDR), &pd)?;
    Ok(())
}

fn gdt_entry(flags: u16, base: u32, limit: u32) -> u64 {
    ((base as u64 & 0xff00_0000) << 32)
        | ((flags as u64 & 0x0000_f0ff) << 40)
        | ((limit as u64 & 0x000f_0000) << 32)
        | ((base as u64 & 0x00ff_ffff) << 16)
        | (limit as u64 & 0x0000_ffff)
}

/// Flat 64-bit GDT: null, code (selector 0x8), data (0x10), TSS (0x18),
/// plus a zeroed IDT.
fn write_gdt_idt(mem: &GuestMemoryMap) -> Result<(), BootError> {
    let table = [
        0,
        gdt_entry(0xa09b, 0, 0xfffff), // 64-bit code
        gdt_entry(0xc093, 0, 0xfffff), // data
        gdt_entry(0x808b, 0, 0xfffff), // TSS
    ];
    let mut bytes = Vec::with_capacity(32);
    for entry in table {
        bytes.extend_from_slice(&entry.to_le_bytes());
    }
    mem.write_bytes(GuestAddress(GDT_ADDR), &bytes)?;
    mem.write_u64(GuestAddress(IDT_ADDR), 0)?;
    Ok(())
}

/// Segment selectors matching the GDT written by `write_gdt_idt`.
pub const CODE_SELECTOR: u16 = 0x8;
pub const DATA_SELECTOR: u16 = 0x10;
pub const TSS_SELECTOR: u16 = 0x18;
