//! bzImage setup-header parsing.
//!
//! A bzImage is real-mode setup code (the boot sector plus `setup_sects`
//! sectors) followed by the protected-mode kernel. The setup header lives at
//! fixed file offsets; we only need enough of it to find the protected-mode
//! payload, verify the protocol is 64-bit capable, and copy the header into
//! the boot-parameter page later.

use std::fmt;

/// File offset of `setup_sects`.
const SETUP_SECTS_OFFSET: usize = 0x1f1;
/// File offset of the 0xAA55 legacy boot flag.
const BOOT_FLAG_OFFSET: usize = 0x1fe;
/// File offset of the "HdrS" header magic.
const HDR_MAGIC_OFFSET: usize = 0x202;
/// File offset of the 16-bit boot protocol version.
const VERSION_OFFSET: usize = 0x206;
/// File offset of the jump instruction; its displacement byte bounds the header.
const JUMP_OFFSET: usize = 0x201;
/// File offset of `loadflags`.
const LOADFLAGS_OFFSET: usize = 0x211;
/// File offset of `xloadflags` (protocol 2.12+).
const XLOADFLAGS_OFFSET: usize = 0x236;

const BOOT_FLAG: u16 = 0xAA55;
const HDR_MAGIC: u32 = 0x5372_6448; // "HdrS"
/// Kernel is loaded high (1 MiB); clear means a zImage we cannot boot.
const LOADED_HIGH: u8 = 0x01;
/// xloadflags bit: kernel has the 64-bit entry point at +0x200.
const XLF_KERNEL_64: u16 = 0x01;
/// First protocol version carrying the fields we rely on (cmdline_size).
const MIN_VERSION: u16 = 0x0206;
/// First protocol version where xloadflags is meaningful.
const XLOADFLAGS_VERSION: u16 = 0x020c;

/// Offset of the 64-bit entry point within the loaded protected-mode image.
pub const ENTRY_OFFSET_64: u64 = 0x200;

#[derive(Debug, PartialEq, Eq)]
pub enum BzImageError {
    /// Boot flag or "HdrS" magic missing.
    BadMagic,
    /// Protocol too old, or the image is not 64-bit capable.
    UnsupportedProtocolVersion(u16),
    /// File ends before the protected-mode payload.
    Truncated,
}

impl fmt::Display for BzImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BzImageError::BadMagic => write!(f, "missing bzImage header magic"),
            BzImageError::UnsupportedProtocolVersion(v) => {
                write!(f, "boot protocol {:#06x} lacks 64-bit entry support", v)
            }
            BzImageError::Truncated => write!(f, "bzImage truncated"),
        }
    }
}

impl std::error::Error for BzImageError {}

/// Parsed view of a bzImage.
#[derive(Debug, Clone)]
pub struct BzImageInfo {
    /// Number of real-mode setup sectors after the boot sector.
    pub setup_sector_count: u16,
    /// File offset where the protected-mode kernel begins.
    pub protected_mode_offset: usize,
    /// Length of the protected-mode kernel in bytes.
    pub protected_mode_len: usize,
    /// Boot protocol version from the header.
    pub header_version: u16,
    /// Raw setup-header bytes `[0x1f1, header end)`, copied into the zero page.
    pub setup_header: Vec<u8>,
}

impl BzImageInfo {
    pub fn entry_offset_64(&self) -> u64 {
        ENTRY_OFFSET_64
    }
}

fn read_u16(image: &[u8], offset: usize) -> Option<u16> {
    let bytes = image.get(offset..offset + 2)?;
    Some(u16::from_le_bytes(bytes.try_into().unwrap()))
}

fn read_u32(image: &[u8], offset: usize) -> Option<u32> {
    let bytes = image.get(offset..offset + 4)?;
    Some(u32::from_le_bytes(bytes.try_into().unwrap()))
}

/// Parses the setup header and locates the protected-mode payload.
pub fn parse_bzimage(image: &[u8]) -> Result<BzImageInfo, BzImageError> {
    let boot_flag = read_u16(image, BOOT_FLAG_OFFSET).ok_or(BzImageError::Truncated)?;
    let magic = read_u32(image, HDR_MAGIC_OFFSET).ok_or(BzImageError::Truncated)?;
    if boot_flag != BOOT_FLAG || magic != HDR_MAGIC {
        return Err(BzImageError::BadMagic);
    }

    let version = read_u16(image, VERSION_OFFSET).ok_or(BzImageError::Truncated)?;
    if version < MIN_VERSION {
        return Err(BzImageError::UnsupportedProtocolVersion(version));
    }
    let loadflags = *image.get(LOADFLAGS_OFFSET).ok_or(BzImageError::Truncated)?;
    if loadflags & LOADED_HIGH == 0 {
        // zImage: protected-mode code expects to live at 0x10000.
        return Err(BzImageError::UnsupportedProtocolVersion(version));
    }
    if version >= XLOADFLAGS_VERSION {
        let xloadflags = read_u16(image, XLOADFLAGS_OFFSET).ok_or(BzImageError::Truncated)?;
        if xloadflags & XLF_KERNEL_64 == 0 {
            return Err(BzImageError::UnsupportedProtocolVersion(version));
        }
    }

    let mut setup_sects = image[SETUP_SECTS_OFFSET] as u16;
    if setup_sects == 0 {
        // Protocol quirk: zero means the historical default of four.
        setup_sects = 4;
    }
    let protected_mode_offset = (setup_sects as usize + 1) * 512;
    if image.len() <= protected_mode_offset {
        return Err(BzImageError::Truncated);
    }

    // Header ends at 0x202 plus the jump displacement byte.
    let header_end = (0x202 + image[JUMP_OFFSET] as usize).min(image.len());
    let setup_header = image[SETUP_SECTS_OFFSET..header_end].to_vec();

    Ok(BzImageInfo {
        setup_sector_count: setup_sects,
        protected_mode_offset,
        protected_mode_len: image.len() - protected_mode_offset,
        header_version: version,
        setup_header,
    })
}

#[cfg(test)]
pub(crate) fn build_test_bzimage(setup_sects: u8, pm_code: &[u8]) -> Vec<u8> {
    let effective = if setup_sects == 0 { 4 } else { setup_sects as usize };
    let setup_len = (effective + 1) * 512;
    let mut image = vec![0u8; setup_len];
    image[SETUP_SECTS_OFFSET] = setup_sects;
    image[JUMP_OFFSET] = 0x66; // header spans through 0x268
    image[BOOT_FLAG_OFFSET..BOOT_FLAG_OFFSET + 2].copy_from_slice(&BOOT_FLAG.to_le_bytes());
    image[HDR_MAGIC_OFFSET..HDR_MAGIC_OFFSET + 4].copy_from_slice(&HDR_MAGIC.to_le_bytes());
    image[VERSION_OFFSET..VERSION_OFFSET + 2].copy_from_slice(&0x020fu16.to_le_bytes());
    image[LOADFLAGS_OFFSET] = LOADED_HIGH;
    image[XLOADFLAGS_OFFSET..XLOADFLAGS_OFFSET + 2].copy_from_slice(&XLF_KERNEL_64.to_le_bytes());
    image.extend_from_slice(pm_code);
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setup_sector_arithmetic() {
        // Independent check: payload starts after (sects + 1) 512-byte sectors.
        let expected = |sects: usize| (sects + 1) * 512;

        let image = build_test_bzimage(4, &[0xCC; 1024]);
        let info = parse_bzimage(&image).unwrap();
        assert_eq!(info.protected_mode_offset, expected(4));
        assert_eq!(info.protected_mode_offset, 2560);
        assert_eq!(info.protected_mode_len, 1024);
        assert_eq!(info.setup_sector_count, 4);
    }

    #[test]
    fn zero_setup_sects_means_four() {
        let image = build_test_bzimage(0, &[0xCC; 16]);
        let info = parse_bzimage(&image).unwrap();
        assert_eq!(info.setup_sector_count, 4);
        assert_eq!(info.protected_mode_offset, 2560);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut image = build_test_bzimage(1, &[0xCC; 16]);
        image[HDR_MAGIC_OFFSET] = b'X';
        assert_eq!(parse_bzimage(&image).unwrap_err(), BzImageError::BadMagic);
    }

    #[test]
    fn old_protocol_rejected() {
        let mut image = build_test_bzimage(1, &[0xCC; 16]);
        image[VERSION_OFFSET..VERSION_OFFSET + 2].copy_from_slice(&0x0200u16.to_le_bytes());
        assert_eq!(
            parse_bzimage(&image).unwrap_err(),
            BzImageError::UnsupportedProtocolVersion(0x0200)
        );
    }

    #[test]
    fn missing_64bit_entry_flag_rejected() {
        let mut image = build_test_bzimage(1, &[0xCC; 16]);
        image[XLOADFLAGS_OFFSET] = 0;
        assert!(matches!(
            parse_bzimage(&image),
            Err(BzImageError::UnsupportedProtocolVersion(_))
        ));
    }

    #[test]
    fn zimage_rejected() {
        let mut image = build_test_bzimage(1, &[0xCC; 16]);
        image[LOADFLAGS_OFFSET] = 0;
        assert!(matches!(
            parse_bzimage(&image),
            Err(BzImageError::UnsupportedProtocolVersion(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let image = build_test_bzimage(4, &[]);
        assert_eq!(parse_bzimage(&image).unwrap_err(), BzImageError::Truncated);
        assert_eq!(parse_bzimage(&[0u8; 64]).unwrap_err(), BzImageError::Truncated);
    }

    #[test]
    fn setup_header_bytes_copied_through() {
        let image = build_test_bzimage(2, &[0xCC; 16]);
        let info = parse_bzimage(&image).unwrap();
        assert_eq!(info.setup_header.len(), 0x202 + 0x66 - 0x1f1);
        // First header byte is setup_sects itself.
        assert_eq!(info.setup_header[0], 2);
        assert_eq!(info.header_version, 0x020f);
    }
}
