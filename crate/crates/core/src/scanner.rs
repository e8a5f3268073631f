//! Backward gadget search from ret / ret imm16 / syscall terminators.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;

use crate::elf::Elf64Image;
use crate::x86::{decode_one, Instruction, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terminator {
    Ret,
    RetImm(u16),
    Syscall,
}

impl Terminator {
    pub fn len(self) -> usize {
        match self {
            Terminator::Ret => 1,
            Terminator::RetImm(_) => 3,
            Terminator::Syscall => 2,
        }
    }

    pub fn op(self) -> Op {
        match self {
            Terminator::Ret => Op::Ret,
            Terminator::RetImm(n) => Op::RetImm(n),
            Terminator::Syscall => Op::Syscall,
        }
    }

    pub fn from_op(op: &Op) -> Option<Terminator> {
        match *op {
            Op::Ret => Some(Terminator::Ret),
            Op::RetImm(n) => Some(Terminator::RetImm(n)),
            Op::Syscall => Some(Terminator::Syscall),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanConfig {
    pub max_instructions: usize,
    pub max_lookback_bytes: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { max_instructions: 5, max_lookback_bytes: 20 }
    }
}

impl ScanConfig {
    pub fn new(max_instructions: usize, max_lookback_bytes: usize) -> Self {
        assert!(max_instructions >= 1 && max_lookback_bytes >= 1, "scan limits must be >= 1");
        ScanConfig { max_instructions, max_lookback_bytes }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Gadget {
    pub vaddr: u64,
    pub instrs: Vec<Instruction>,
    pub terminator: Terminator,
    pub byte_len: usize,
}

impl Gadget {
    /// Canonical text, e.g. `pop rdi; ret`. Used as the dedup key.
    pub fn text(&self) -> String {
        self.to_string()
    }

    pub fn ops(&self) -> Vec<Op> {
        self.instrs.iter().map(|i| i.op).collect()
    }

    pub fn body(&self) -> &[Instruction] {
        &self.instrs[..self.instrs.len() - 1]
    }

    /// Build a gadget from a decoded run, checking the gadget shape.
    pub fn from_instrs(instrs: Vec<Instruction>) -> Option<Gadget> {
        let (last, body) = instrs.split_last()?;
        let terminator = Terminator::from_op(&last.op)?;
        if body.iter().any(|i| i.op.is_terminator()) {
            return None;
        }
        if instrs.windows(2).any(|w| w[0].end() != w[1].vaddr) {
            return None;
        }
        let byte_len = instrs.iter().map(Instruction::len).sum();
        Some(Gadget { vaddr: instrs[0].vaddr, terminator, byte_len, instrs })
    }
}

impl fmt::Display for Gadget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, ins) in self.instrs.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{ins}")?;
        }
        Ok(())
    }
}

/// Every offset holding a terminator encoding, overlapping matches included.
pub fn find_terminators(bytes: &[u8], vaddr: u64) -> Vec<(u64, Terminator)> {
    let mut out = Vec::new();
    for (i, &b) in bytes.iter().enumerate() {
        let t = match b {
            0xc3 => Some(Terminator::Ret),
            0xc2 if i + 2 < bytes.len() => {
                Some(Terminator::RetImm(u16::from_le_bytes([bytes[i + 1], bytes[i + 2]])))
            }
            0x0f if bytes.get(i + 1) == Some(&0x05) => Some(Terminator::Syscall),
            _ => None,
        };
        if let Some(t) = t {
            out.push((vaddr + i as u64, t));
        }
    }
    out
}

/// Gadgets in one region, before cross-region dedup. Sorted by vaddr; a given
/// start address appears at most once.
pub fn scan_region(bytes: &[u8], vaddr: u64, cfg: &ScanConfig) -> Vec<Gadget> {
    let mut out = Vec::new();
    // decode cache for the current window, indexed by offset - window_start
    let mut window: Vec<Option<Instruction>> = Vec::new();

    for (term_vaddr, term) in find_terminators(bytes, vaddr) {
        let t = (term_vaddr - vaddr) as usize;
        let end = t + term.len();
        let lo = t.saturating_sub(cfg.max_lookback_bytes);

        window.clear();
        window.extend((lo..t).map(|off| decode_one(&bytes[off..end], vaddr + off as u64)));
        let term_ins = decode_one(&bytes[t..end], term_vaddr).expect("terminator decodes");

        for s in lo..=t {
            let mut instrs = Vec::new();
            let mut off = s;
            let ok = loop {
                if off == t {
                    instrs.push(term_ins);
                    break true;
                }
                if off > t || instrs.len() + 1 >= cfg.max_instructions {
                    break false;
                }
                match window[off - lo] {
                    Some(ins) if !ins.op.is_terminator() => {
                        off += ins.len();
                        instrs.push(ins);
                    }
                    _ => break false,
                }
            };
            if ok {
                out.push(Gadget {
                    vaddr: vaddr + s as u64,
                    byte_len: end - s,
                    terminator: term,
                    instrs,
                });
            }
        }
    }
    out.sort_by_key(|g| g.vaddr);
    out
}

/// Keep the lowest-vaddr gadget for each distinct instruction sequence, then
/// sort by vaddr.
pub fn dedup_gadgets(gadgets: impl IntoIterator<Item = Gadget>) -> Vec<Gadget> {
    let mut best: HashMap<Vec<Op>, Gadget> = HashMap::new();
    for g in gadgets {
        match best.get(&g.ops()) {
            Some(prev) if prev.vaddr <= g.vaddr => {}
            _ => {
                best.insert(g.ops(), g);
            }
        }
    }
    let mut out: Vec<Gadget> = best.into_values().collect();
    out.sort_by_key(|g| g.vaddr);
    out
}

/// All bounded gadgets across the image's executable regions.
pub fn find_gadgets(image: &Elf64Image, cfg: &ScanConfig) -> Vec<Gadget> {
    let regions = image.executable_regions();
    let per_region: Vec<Vec<Gadget>> = regions
        .par_iter()
        .map(|&(vaddr, bytes)| scan_region(bytes, vaddr, cfg))
        .collect();
    dedup_gadgets(per_region.into_iter().flatten())
}
