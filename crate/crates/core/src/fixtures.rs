//! Synthetic ELF binaries with known gadget catalogs.
//!
//! Each gadget is assembled from [`Op`]s and followed by an `int3` byte, so
//! no backward decode can run from one gadget into the previous one.

use crate::elf::{ElfBuilder, Perms};
use crate::x86::{assemble, Op, Reg, Width};

pub const TEXT_VADDR: u64 = 0x401000;
pub const DATA_VADDR: u64 = 0x404000;
pub const DATA_SIZE: u64 = 0x1000;
const INT3: u8 = 0xcc;

/// Text bytes for a list of gadgets, `int3`-separated.
pub fn text_bytes(gadgets: &[Vec<Op>]) -> Vec<u8> {
    let mut text = Vec::new();
    for g in gadgets {
        text.extend(assemble(g));
        text.push(INT3);
    }
    text
}

/// An ELF with one RX segment holding the gadgets at [`TEXT_VADDR`] and a
/// zero-filled RW segment at [`DATA_VADDR`].
pub fn catalog_elf(gadgets: &[Vec<Op>]) -> Vec<u8> {
    ElfBuilder::new()
        .entry(TEXT_VADDR)
        .segment(TEXT_VADDR, Perms::RX, text_bytes(gadgets))
        .segment_with_bss(DATA_VADDR, Perms::RW, Vec::new(), DATA_SIZE)
        .build()
}

fn pop(r: Reg) -> Vec<Op> {
    vec![Op::PopReg(r), Op::Ret]
}

fn xor64(dst: Reg, src: Reg) -> Op {
    Op::XorRegReg { dst, src, width: Width::W64 }
}

fn mov64(dst: Reg, src: Reg) -> Op {
    Op::MovRegReg { dst, src, width: Width::W64 }
}

/// The eight gadgets sufficient for an `execve("/bin/sh", 0, 0)` chain.
pub fn minimal_gadgets() -> Vec<Vec<Op>> {
    vec![
        pop(Reg::Rax),
        pop(Reg::Rdi),
        pop(Reg::Rsi),
        pop(Reg::Rdx),
        pop(Reg::R10),
        vec![Op::MovStore { base: Reg::Rdi, disp: 0, src: Reg::Rsi }, Op::Ret],
        vec![xor64(Reg::Rsi, Reg::Rsi), Op::Ret],
        vec![Op::Syscall],
    ]
}

pub fn minimal_catalog_elf() -> Vec<u8> {
    catalog_elf(&minimal_gadgets())
}

/// A larger catalog: loads for every register, xor-split helpers for every
/// syscall register, moves, arithmetic, stores with displacement, `ret imm`
/// variants, pivots, memory loads, and `nop`-prefixed duplicates of the
/// useful gadgets so a different address is available when one is excluded.
pub fn rich_gadgets() -> Vec<Vec<Op>> {
    let mut g = Vec::new();
    for r in Reg::ALL {
        if r != Reg::Rsp {
            g.push(pop(r));
        }
    }
    g.push(vec![Op::PopReg(Reg::Rdi), Op::PopReg(Reg::Rsi), Op::Ret]);
    g.push(vec![Op::PopReg(Reg::Rdx), Op::PopReg(Reg::Rcx), Op::PopReg(Reg::Rbx), Op::Ret]);
    g.push(vec![Op::PopReg(Reg::R8), Op::PopReg(Reg::R9), Op::PopReg(Reg::R10), Op::Ret]);
    let split = [Reg::Rax, Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::R10, Reg::R8, Reg::R9];
    for r in split {
        g.push(vec![xor64(r, Reg::Rbx), Op::Ret]);
    }
    g.push(vec![mov64(Reg::Rdx, Reg::Rbx), Op::Ret]);
    g.push(vec![mov64(Reg::R10, Reg::Rdx), Op::Ret]);
    g.push(vec![mov64(Reg::Rax, Reg::Rdi), Op::Ret]);
    g.push(vec![Op::MovRegReg { dst: Reg::R9, src: Reg::Rcx, width: Width::W32 }, Op::Ret]);
    g.push(vec![Op::MovStore { base: Reg::Rdi, disp: 0, src: Reg::Rsi }, Op::Ret]);
    g.push(vec![Op::MovStore { base: Reg::Rdx, disp: 8, src: Reg::Rcx }, Op::Ret]);
    g.push(vec![Op::MovStore { base: Reg::Rax, disp: -0x10, src: Reg::Rbx }, Op::PopReg(Reg::Rbp), Op::Ret]);
    g.push(vec![Op::AddRegReg { dst: Reg::Rax, src: Reg::Rcx }, Op::Ret]);
    g.push(vec![Op::SubRegReg { dst: Reg::Rdx, src: Reg::Rcx }, Op::Ret]);
    g.push(vec![Op::XorRegReg { dst: Reg::Rax, src: Reg::Rax, width: Width::W32 }, Op::Ret]);
    g.push(vec![xor64(Reg::R8, Reg::R8), Op::Ret]);
    g.push(vec![Op::PopReg(Reg::Rdi), Op::RetImm(8)]);
    g.push(vec![Op::PopReg(Reg::Rsi), Op::RetImm(0x10)]);
    g.push(vec![Op::PopReg(Reg::Rcx), Op::RetImm(3)]);
    g.push(vec![Op::Leave, Op::Ret]);
    g.push(vec![Op::PopReg(Reg::Rsp), Op::Ret]);
    g.push(vec![Op::MovLoad { dst: Reg::Rax, base: Reg::Rdi, disp: 0x10 }, Op::Ret]);
    g.push(vec![Op::PushReg(Reg::Rdi), Op::PopReg(Reg::Rsi), Op::Ret]);
    g.push(vec![Op::MovRegImm64 { dst: Reg::Rcx, imm: 0x1122_3344_5566_7788 }, Op::Ret]);
    g.push(vec![Op::Nop, Op::Nop, Op::Ret]);

    for r in [Reg::Rax, Reg::Rbx, Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::R10, Reg::R8, Reg::R9] {
        g.push(vec![Op::Nop, Op::PopReg(r), Op::Ret]);
        g.push(vec![Op::Nop, Op::Nop, Op::PopReg(r), Op::Ret]);
    }
    for r in split {
        g.push(vec![Op::Nop, xor64(r, Reg::Rbx), Op::Ret]);
    }
    g.push(vec![Op::Nop, Op::MovStore { base: Reg::Rdi, disp: 0, src: Reg::Rsi }, Op::Ret]);
    g.push(vec![Op::Nop, Op::Nop, Op::MovStore { base: Reg::Rdi, disp: 0, src: Reg::Rsi }, Op::Ret]);
    g.push(vec![Op::Syscall]);
    g.push(vec![Op::Nop, Op::Syscall]);
    g.push(vec![Op::Nop, Op::Nop, Op::Syscall]);
    g
}

pub fn rich_catalog_elf() -> Vec<u8> {
    catalog_elf(&rich_gadgets())
}

/// Catalog without any `syscall` instruction.
pub fn no_syscall_elf() -> Vec<u8> {
    let gadgets: Vec<Vec<Op>> = minimal_gadgets()
        .into_iter()
        .filter(|g| !g.contains(&Op::Syscall))
        .collect();
    catalog_elf(&gadgets)
}

/// `bytes` as a single executable region at [`TEXT_VADDR`].
pub fn raw_text_elf(bytes: &[u8]) -> Vec<u8> {
    ElfBuilder::new().entry(TEXT_VADDR).segment(TEXT_VADDR, Perms::RX, bytes.to_vec()).build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elf::load_elf;

    #[test]
    fn fixtures_load() {
        for elf in [minimal_catalog_elf(), rich_catalog_elf(), no_syscall_elf()] {
            let img = load_elf(&elf).unwrap();
            assert_eq!(img.executable_regions()[0].0, TEXT_VADDR);
            assert_eq!(img.writable_regions(), vec![(DATA_VADDR, DATA_SIZE)]);
        }
    }
}
