//! Minimal ELF64 (little-endian, x86-64) loader.
//!
//! Only `PT_LOAD` program headers are read; section headers are ignored so
//! stripped binaries load the same as unstripped ones. [`ElfBuilder`] emits
//! small well-formed images and is what the fixtures and tests are built on.

use std::fmt;

use thiserror::Error;

pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
pub const ELFCLASS64: u8 = 2;
pub const ELFDATA2LSB: u8 = 1;
pub const EM_X86_64: u16 = 0x3e;
pub const PT_LOAD: u32 = 1;

const EHDR_SIZE: usize = 64;
const PHDR_SIZE: usize = 56;

const PF_X: u32 = 1;
const PF_W: u32 = 2;
const PF_R: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElfError {
    #[error("BadMagic: file does not start with 7f 45 4c 46")]
    BadMagic,
    #[error("Not64Bit: ELF class byte is {0}, expected 2")]
    Not64Bit(u8),
    #[error("NotLittleEndian: ELF data byte is {0}, expected 1")]
    NotLittleEndian(u8),
    #[error("WrongMachine: e_machine is {0:#x}, expected 0x3e (x86-64)")]
    WrongMachine(u16),
    #[error("Truncated: {0}")]
    Truncated(String),
    #[error("BadSegment: {0}")]
    BadSegment(String),
    #[error("NoExecutableSegment: image has no PT_LOAD segment with execute permission")]
    NoExecutableSegment,
}

/// Segment permission flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const R: Perms = Perms { read: true, write: false, execute: false };
    pub const RX: Perms = Perms { read: true, write: false, execute: true };
    pub const RW: Perms = Perms { read: true, write: true, execute: false };

    fn from_flags(flags: u32) -> Self {
        Perms {
            read: flags & PF_R != 0,
            write: flags & PF_W != 0,
            execute: flags & PF_X != 0,
        }
    }

    fn to_flags(self) -> u32 {
        let mut f = 0;
        if self.read {
            f |= PF_R;
        }
        if self.write {
            f |= PF_W;
        }
        if self.execute {
            f |= PF_X;
        }
        f
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = if self.read { 'r' } else { '-' };
        let w = if self.write { 'w' } else { '-' };
        let x = if self.execute { 'x' } else { '-' };
        write!(f, "{r}{w}{x}")
    }
}

/// One `PT_LOAD` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub vaddr: u64,
    pub file_offset: u64,
    pub file_size: u64,
    /// Always `>= file_size`; the excess is zero-filled.
    pub mem_size: u64,
    pub perms: Perms,
}

impl Segment {
    pub fn vaddr_end(&self) -> u64 {
        self.vaddr + self.mem_size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.vaddr && addr < self.vaddr_end()
    }
}

/// A parsed binary. Immutable after [`load_elf`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Elf64Image {
    pub entry_point: u64,
    pub segments: Vec<Segment>,
    pub raw: Vec<u8>,
}

impl Elf64Image {
    /// File bytes of a segment (zero-fill tail excluded).
    pub fn segment_bytes(&self, seg: &Segment) -> &[u8] {
        let start = seg.file_offset as usize;
        &self.raw[start..start + seg.file_size as usize]
    }

    /// `(vaddr, bytes)` for each executable segment, sorted by vaddr.
    pub fn executable_regions(&self) -> Vec<(u64, &[u8])> {
        let mut out: Vec<(u64, &[u8])> = self
            .segments
            .iter()
            .filter(|s| s.perms.execute)
            .map(|s| (s.vaddr, self.segment_bytes(s)))
            .collect();
        out.sort_by_key(|&(vaddr, _)| vaddr);
        out
    }

    /// `(vaddr, mem_size)` for each writable segment, sorted by vaddr.
    pub fn writable_regions(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = self
            .segments
            .iter()
            .filter(|s| s.perms.write)
            .map(|s| (s.vaddr, s.mem_size))
            .collect();
        out.sort();
        out
    }
}

pub fn executable_regions(image: &Elf64Image) -> Vec<(u64, &[u8])> {
    image.executable_regions()
}

pub fn writable_regions(image: &Elf64Image) -> Vec<(u64, u64)> {
    image.writable_regions()
}

fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

/// Parse an ELF64 little-endian x86-64 file.
pub fn load_elf(bytes: &[u8]) -> Result<Elf64Image, ElfError> {
    if bytes.len() < 4 {
        return Err(ElfError::Truncated(format!(
            "{} bytes is shorter than the ELF identification",
            bytes.len()
        )));
    }
    if bytes[..4] != ELF_MAGIC {
        return Err(ElfError::BadMagic);
    }
    if bytes.len() < EHDR_SIZE {
        return Err(ElfError::Truncated(format!(
            "{} bytes is shorter than the 64-byte ELF64 header",
            bytes.len()
        )));
    }
    if bytes[4] != ELFCLASS64 {
        return Err(ElfError::Not64Bit(bytes[4]));
    }
    if bytes[5] != ELFDATA2LSB {
        return Err(ElfError::NotLittleEndian(bytes[5]));
    }
    let machine = read_u16(bytes, 18);
    if machine != EM_X86_64 {
        return Err(ElfError::WrongMachine(machine));
    }

    let entry_point = read_u64(bytes, 24);
    let phoff = read_u64(bytes, 32);
    let phentsize = read_u16(bytes, 54) as u64;
    let phnum = read_u16(bytes, 56) as u64;

    if phnum > 0 && phentsize < PHDR_SIZE as u64 {
        return Err(ElfError::Truncated(format!(
            "program header entry size {phentsize} is smaller than {PHDR_SIZE}"
        )));
    }
    let table_end = phentsize
        .checked_mul(phnum)
        .and_then(|n| n.checked_add(phoff))
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            ElfError::Truncated(format!(
                "program header table ({phnum} x {phentsize} at {phoff:#x}) exceeds file length {:#x}",
                bytes.len()
            ))
        })?;
    debug_assert!(table_end <= bytes.len() as u64);

    let mut segments = Vec::new();
    for i in 0..phnum {
        let off = (phoff + i * phentsize) as usize;
        if read_u32(bytes, off) != PT_LOAD {
            continue;
        }
        let flags = read_u32(bytes, off + 4);
        let file_offset = read_u64(bytes, off + 8);
        let vaddr = read_u64(bytes, off + 16);
        let file_size = read_u64(bytes, off + 32);
        let mem_size = read_u64(bytes, off + 40);

        match file_offset.checked_add(file_size) {
            Some(end) if end <= bytes.len() as u64 => {}
            _ => {
                return Err(ElfError::Truncated(format!(
                    "segment {i} file range {file_offset:#x}+{file_size:#x} exceeds file length {:#x}",
                    bytes.len()
                )))
            }
        }
        if mem_size < file_size {
            return Err(ElfError::BadSegment(format!(
                "segment {i} mem_size {mem_size:#x} < file_size {file_size:#x}"
            )));
        }
        if vaddr.checked_add(mem_size).is_none() {
            return Err(ElfError::BadSegment(format!(
                "segment {i} vaddr {vaddr:#x} + mem_size {mem_size:#x} overflows"
            )));
        }
        segments.push(Segment {
            vaddr,
            file_offset,
            file_size,
            mem_size,
            perms: Perms::from_flags(flags),
        });
    }

    if !segments.iter().any(|s| s.perms.execute) {
        return Err(ElfError::NoExecutableSegment);
    }

    Ok(Elf64Image {
        entry_point,
        segments,
        raw: bytes.to_vec(),
    })
}

/// One segment to be emitted by [`ElfBuilder`].
#[derive(Debug, Clone)]
pub struct SegmentSpec {
    pub vaddr: u64,
    pub perms: Perms,
    pub data: Vec<u8>,
    pub mem_size: u64,
}

/// Emits a static `ET_EXEC` ELF64 image with one `PT_LOAD` per segment.
///
/// Segment file offsets are chosen congruent to their vaddr modulo the page
/// size, the same layout a linker produces.
#[derive(Debug, Clone, Default)]
pub struct ElfBuilder {
    entry: u64,
    segments: Vec<SegmentSpec>,
}

const PAGE: u64 = 0x1000;

impl ElfBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(mut self, entry: u64) -> Self {
        self.entry = entry;
        self
    }

    pub fn segment(mut self, vaddr: u64, perms: Perms, data: impl Into<Vec<u8>>) -> Self {
        let data = data.into();
        let mem_size = data.len() as u64;
        self.segments.push(SegmentSpec { vaddr, perms, data, mem_size });
        self
    }

    /// Segment with a zero-fill tail (`mem_size > data.len()`).
    pub fn segment_with_bss(
        mut self,
        vaddr: u64,
        perms: Perms,
        data: impl Into<Vec<u8>>,
        mem_size: u64,
    ) -> Self {
        let data = data.into();
        assert!(mem_size >= data.len() as u64, "mem_size below file size");
        self.segments.push(SegmentSpec { vaddr, perms, data, mem_size });
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let phnum = self.segments.len();
        let headers_end = (EHDR_SIZE + PHDR_SIZE * phnum) as u64;

        // place each segment at the next offset congruent to its vaddr mod PAGE
        let mut offsets = Vec::with_capacity(phnum);
        let mut cursor = headers_end;
        for seg in &self.segments {
            let want = seg.vaddr % PAGE;
            let mut off = (cursor / PAGE) * PAGE + want;
            if off < cursor {
                off += PAGE;
            }
            offsets.push(off);
            cursor = off + seg.data.len() as u64;
        }

        let mut out = vec![0u8; cursor as usize];
        out[..4].copy_from_slice(&ELF_MAGIC);
        out[4] = ELFCLASS64;
        out[5] = ELFDATA2LSB;
        out[6] = 1; // EI_VERSION
        out[16..18].copy_from_slice(&2u16.to_le_bytes()); // ET_EXEC
        out[18..20].copy_from_slice(&EM_X86_64.to_le_bytes());
        out[20..24].copy_from_slice(&1u32.to_le_bytes());
        out[24..32].copy_from_slice(&self.entry.to_le_bytes());
        out[32..40].copy_from_slice(&(EHDR_SIZE as u64).to_le_bytes());
        out[52..54].copy_from_slice(&(EHDR_SIZE as u16).to_le_bytes());
        out[54..56].copy_from_slice(&(PHDR_SIZE as u16).to_le_bytes());
        out[56..58].copy_from_slice(&(phnum as u16).to_le_bytes());
        out[58..60].copy_from_slice(&64u16.to_le_bytes()); // e_shentsize

        for (i, (seg, &off)) in self.segments.iter().zip(&offsets).enumerate() {
            let p = EHDR_SIZE + i * PHDR_SIZE;
            out[p..p + 4].copy_from_slice(&PT_LOAD.to_le_bytes());
            out[p + 4..p + 8].copy_from_slice(&seg.perms.to_flags().to_le_bytes());
            out[p + 8..p + 16].copy_from_slice(&off.to_le_bytes());
            out[p + 16..p + 24].copy_from_slice(&seg.vaddr.to_le_bytes());
            out[p + 24..p + 32].copy_from_slice(&seg.vaddr.to_le_bytes());
            out[p + 32..p + 40].copy_from_slice(&(seg.data.len() as u64).to_le_bytes());
            out[p + 40..p + 48].copy_from_slice(&seg.mem_size.to_le_bytes());
            out[p + 48..p + 56].copy_from_slice(&PAGE.to_le_bytes());
            let o = off as usize;
            out[o..o + seg.data.len()].copy_from_slice(&seg.data);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_rx() -> Vec<u8> {
        ElfBuilder::new()
            .entry(0x400000)
            .segment(0x400000, Perms::RX, vec![0x90; 16])
            .build()
    }

    #[test]
    fn minimal_fixture_loads() {
        let img = load_elf(&one_rx()).unwrap();
        assert_eq!(img.segments.len(), 1);
        assert!(img.segments[0].perms.execute);
        assert_eq!(img.entry_point, 0x400000);
    }

    #[test]
    fn class_byte_one_is_rejected() {
        let mut b = one_rx();
        b[4] = 1;
        assert_eq!(load_elf(&b), Err(ElfError::Not64Bit(1)));
    }

    #[test]
    fn empty_input_is_truncated() {
        assert!(matches!(load_elf(&[]), Err(ElfError::Truncated(_))));
    }

    #[test]
    fn header_field_checks() {
        let mut b = one_rx();
        b[0] = 0;
        assert_eq!(load_elf(&b), Err(ElfError::BadMagic));
        let mut b = one_rx();
        b[5] = 2;
        assert_eq!(load_elf(&b), Err(ElfError::NotLittleEndian(2)));
        let mut b = one_rx();
        b[18] = 0x03;
        assert_eq!(load_elf(&b), Err(ElfError::WrongMachine(3)));
        let b = one_rx();
        assert!(matches!(load_elf(&b[..40]), Err(ElfError::Truncated(_))));
    }

    #[test]
    fn segment_past_eof_is_truncated() {
        let b = one_rx();
        let cut = b.len() - 1;
        assert!(matches!(load_elf(&b[..cut]), Err(ElfError::Truncated(_))));
    }

    #[test]
    fn no_executable_segment_fails() {
        let b = ElfBuilder::new().segment(0x600000, Perms::RW, vec![0; 8]).build();
        assert_eq!(load_elf(&b), Err(ElfError::NoExecutableSegment));
    }

    #[test]
    fn executable_region_projection() {
        let img = load_elf(&one_rx()).unwrap();
        let regions = img.executable_regions();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].0, 0x400000);
        assert_eq!(regions[0].1.len(), 16);
    }

    #[test]
    fn only_rx_regions_are_executable() {
        let b = ElfBuilder::new()
            .segment(0x400000, Perms::RX, vec![0xc3; 4])
            .segment(0x600000, Perms::RW, vec![1; 4])
            .build();
        let img = load_elf(&b).unwrap();
        let regions = img.executable_regions();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].0, 0x400000);
    }

    #[test]
    fn executable_regions_sorted_by_vaddr() {
        let b = ElfBuilder::new()
            .segment(0x401000, Perms::RX, vec![0xc3; 4])
            .segment(0x400000, Perms::RX, vec![0x90; 4])
            .build();
        let img = load_elf(&b).unwrap();
        let addrs: Vec<u64> = img.executable_regions().iter().map(|r| r.0).collect();
        assert_eq!(addrs, vec![0x400000, 0x401000]);
    }

    #[test]
    fn writable_region_projection() {
        let b = ElfBuilder::new()
            .segment(0x400000, Perms::RX, vec![0xc3])
            .segment_with_bss(0x600000, Perms::RW, vec![0; 0x10], 0x1000)
            .build();
        assert_eq!(load_elf(&b).unwrap().writable_regions(), vec![(0x600000, 0x1000)]);

        assert!(load_elf(&one_rx()).unwrap().writable_regions().is_empty());

        let b = ElfBuilder::new()
            .segment(0x400000, Perms::RX, vec![0xc3])
            .segment_with_bss(0x600000, Perms::RW, vec![7; 8], 0x100)
            .build();
        assert_eq!(load_elf(&b).unwrap().writable_regions(), vec![(0x600000, 0x100)]);
    }

    #[test]
    fn bss_tail_is_not_scannable_code() {
        let b = ElfBuilder::new()
            .segment_with_bss(0x400000, Perms::RX, vec![0xc3; 4], 0x100)
            .build();
        let img = load_elf(&b).unwrap();
        assert_eq!(img.executable_regions()[0].1.len(), 4);
    }

    #[test]
    fn mem_size_below_file_size_rejected() {
        let mut b = one_rx();
        // p_memsz of the first phdr
        let p = EHDR_SIZE + 40;
        b[p..p + 8].copy_from_slice(&1u64.to_le_bytes());
        assert!(matches!(load_elf(&b), Err(ElfError::BadSegment(_))));
    }
}
