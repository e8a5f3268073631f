//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ropsmith_core::emulator::{init_state, StepEvent, DEFAULT_STACK_VADDR};
use ropsmith_core::x86::decode_run;
use ropsmith_core::{EmuConfig, Elf64Image, Gadget, Op, Reg, ScanConfig, Width};

/// Registers usable as a memory base without a SIB byte.
pub fn base_regs() -> Vec<Reg> {
    Reg::ALL.into_iter().filter(|r| !matches!(r, Reg::Rsp | Reg::R12)).collect()
}

fn any_reg(rng: &mut impl Rng) -> Reg {
    *Reg::ALL.choose(rng).unwrap()
}

fn any_width(rng: &mut impl Rng) -> Width {
    if rng.random_bool(0.5) {
        Width::W64
    } else {
        Width::W32
    }
}

pub fn random_disp(rng: &mut impl Rng) -> i32 {
    match rng.random_range(0..4) {
        0 => 0,
        1 => rng.random_range(-128..128),
        _ => rng.random(),
    }
}

pub fn random_op(rng: &mut impl Rng) -> Op {
    let bases = base_regs();
    match rng.random_range(0..14) {
        0 => Op::Ret,
        1 => Op::RetImm(rng.random()),
        2 => Op::Syscall,
        3 => Op::PopReg(any_reg(rng)),
        4 => Op::PushReg(any_reg(rng)),
        5 => Op::MovRegReg { dst: any_reg(rng), src: any_reg(rng), width: any_width(rng) },
        6 => Op::MovRegImm64 { dst: any_reg(rng), imm: rng.random() },
        7 => Op::MovStore { base: *bases.choose(rng).unwrap(), disp: random_disp(rng), src: any_reg(rng) },
        8 => Op::MovLoad { dst: any_reg(rng), base: *bases.choose(rng).unwrap(), disp: random_disp(rng) },
        9 => Op::AddRegReg { dst: any_reg(rng), src: any_reg(rng) },
        10 => Op::SubRegReg { dst: any_reg(rng), src: any_reg(rng) },
        11 => Op::XorRegReg { dst: any_reg(rng), src: any_reg(rng), width: any_width(rng) },
        12 => Op::Leave,
        _ => Op::Nop,
    }
}

/// `len` bytes: either uniform noise or back-to-back encoded subset ops.
pub fn random_region(rng: &mut impl Rng, len: usize, encoded: bool) -> Vec<u8> {
    if !encoded {
        return (0..len).map(|_| rng.random()).collect();
    }
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        out.extend(ropsmith_core::encode_one(&random_op(rng)).unwrap());
    }
    out.truncate(len);
    out
}

/// Every `(start, end)` pair whose bytes decode to a valid gadget, deduped by
/// text (lowest vaddr wins) and sorted by vaddr.
pub fn brute_force_gadgets(bytes: &[u8], vaddr: u64, cfg: &ScanConfig) -> Vec<(u64, String)> {
    let mut best: BTreeMap<String, u64> = BTreeMap::new();
    for s in 0..bytes.len() {
        // the terminator starts at most `lookback` bytes after s and is at
        // most 3 bytes long
        let max_end = bytes.len().min(s + cfg.max_lookback_bytes + 3);
        for e in s + 1..=max_end {
            let Ok(instrs) = decode_run(&bytes[s..e], vaddr + s as u64) else { continue };
            let Some((last, body)) = instrs.split_last() else { continue };
            if !last.op.is_terminator()
                || body.iter().any(|i| i.op.is_terminator())
                || instrs.len() > cfg.max_instructions
                || (last.vaddr - vaddr) as usize - s > cfg.max_lookback_bytes
            {
                continue;
            }
            let text = instrs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ");
            let at = vaddr + s as u64;
            best.entry(text).and_modify(|v| *v = (*v).min(at)).or_insert(at);
        }
    }
    let mut out: Vec<(u64, String)> = best.into_iter().map(|(t, v)| (v, t)).collect();
    out.sort();
    out
}

pub fn normalize(gadgets: &[Gadget]) -> Vec<(u64, String)> {
    let mut v: Vec<(u64, String)> = gadgets.iter().map(|g| (g.vaddr, g.text())).collect();
    v.sort();
    v
}

fn iced_reg(r: iced_x86::Register) -> Option<(Reg, Width)> {
    use iced_x86::Register as R;
    const R64: [R; 16] = [
        R::RAX, R::RCX, R::RDX, R::RBX, R::RSP, R::RBP, R::RSI, R::RDI,
        R::R8, R::R9, R::R10, R::R11, R::R12, R::R13, R::R14, R::R15,
    ];
    const R32: [R; 16] = [
        R::EAX, R::ECX, R::EDX, R::EBX, R::ESP, R::EBP, R::ESI, R::EDI,
        R::R8D, R::R9D, R::R10D, R::R11D, R::R12D, R::R13D, R::R14D, R::R15D,
    ];
    if let Some(i) = R64.iter().position(|&x| x == r) {
        return Some((Reg::from_index(i as u8), Width::W64));
    }
    R32.iter().position(|&x| x == r).map(|i| (Reg::from_index(i as u8), Width::W32))
}

/// Decode with iced-x86 and translate into the subset, or `None` if the
/// reference sees something outside it.
pub fn reference_decode(bytes: &[u8], vaddr: u64) -> Option<(Op, usize)> {
    use iced_x86::{Decoder, DecoderOptions, Mnemonic, OpKind};
    let mut dec = Decoder::with_ip(64, bytes, vaddr, DecoderOptions::NONE);
    let ins = dec.decode();
    if ins.is_invalid() {
        return None;
    }
    let reg = |i: u32| {
        if ins.op_kind(i) == OpKind::Register {
            iced_reg(ins.op_register(i))
        } else {
            None
        }
    };
    let mem = || {
        if ins.memory_index() != iced_x86::Register::None {
            return None;
        }
        let (base, w) = iced_reg(ins.memory_base())?;
        (w == Width::W64).then_some((base, ins.memory_displacement64() as i64 as i32))
    };
    let op = match (ins.mnemonic(), ins.op_count()) {
        (Mnemonic::Ret, 0) => Op::Ret,
        (Mnemonic::Ret, 1) => Op::RetImm(ins.immediate16()),
        (Mnemonic::Syscall, 0) => Op::Syscall,
        (Mnemonic::Leave, 0) => Op::Leave,
        (Mnemonic::Nop, 0) => Op::Nop,
        (Mnemonic::Pop, 1) => Op::PopReg(reg(0).filter(|r| r.1 == Width::W64)?.0),
        (Mnemonic::Push, 1) => Op::PushReg(reg(0).filter(|r| r.1 == Width::W64)?.0),
        (Mnemonic::Mov, 2) => match (ins.op_kind(0), ins.op_kind(1)) {
            (OpKind::Register, OpKind::Register) => {
                let (dst, w) = reg(0)?;
                let (src, w2) = reg(1)?;
                if w != w2 {
                    return None;
                }
                Op::MovRegReg { dst, src, width: w }
            }
            (OpKind::Register, OpKind::Immediate64) => {
                let (dst, w) = reg(0)?;
                if w != Width::W64 {
                    return None;
                }
                Op::MovRegImm64 { dst, imm: ins.immediate64() }
            }
            (OpKind::Memory, OpKind::Register) => {
                let (src, w) = reg(1)?;
                let (base, disp) = mem()?;
                if w != Width::W64 {
                    return None;
                }
                Op::MovStore { base, disp, src }
            }
            (OpKind::Register, OpKind::Memory) => {
                let (dst, w) = reg(0)?;
                let (base, disp) = mem()?;
                if w != Width::W64 {
                    return None;
                }
                Op::MovLoad { dst, base, disp }
            }
            _ => return None,
        },
        (m @ (Mnemonic::Add | Mnemonic::Sub | Mnemonic::Xor), 2) => {
            let (dst, w) = reg(0)?;
            let (src, w2) = reg(1)?;
            if w != w2 {
                return None;
            }
            match (m, w) {
                (Mnemonic::Add, Width::W64) => Op::AddRegReg { dst, src },
                (Mnemonic::Sub, Width::W64) => Op::SubRegReg { dst, src },
                (Mnemonic::Xor, width) => Op::XorRegReg { dst, src, width },
                _ => return None,
            }
        }
        _ => return None,
    };
    Some((op, ins.len()))
}

/// Deterministic pseudo-random background memory for lenient emulation.
pub fn background(addr: u64) -> u8 {
    let mut x = addr.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    (x >> 32) as u8
}

/// Run one gadget concretely from a random entry state and compare every
/// claim of its symbolic summary. Returns the list of disagreements.
pub fn check_semantics(image: &Elf64Image, g: &Gadget, rng: &mut impl Rng) -> Vec<String> {
    let effect = ropsmith_core::summarize(g);
    if effect.is_unusable() {
        return Vec::new();
    }
    let stack: Vec<u8> = (0..512).map(|_| rng.random()).collect();
    let mut seed = [0u64; 16];
    for s in seed.iter_mut() {
        *s = rng.random();
    }
    let cfg = EmuConfig::default();
    let mut state = init_state(image, &stack, DEFAULT_STACK_VADDR + 0x100, seed, &cfg).unwrap();
    state.mem.set_background(background);
    state.rip = g.vaddr;
    let entry = state.clone();

    let mut problems = Vec::new();
    let mut event = StepEvent::Continue;
    for _ in 0..g.instrs.len() {
        match state.step() {
            Ok(e) => event = e,
            Err(f) => {
                problems.push(format!("{g}: emulation fault {f}"));
                return problems;
            }
        }
        if event != StepEvent::Continue {
            break;
        }
    }
    if event == StepEvent::Continue {
        problems.push(format!("{g}: terminator not reached"));
        return problems;
    }

    for r in Reg::ALL {
        let want = effect.out(r).eval(&entry);
        if want != Some(state.reg(r)) {
            problems.push(format!("{g}: {r} symbolic {want:x?} emulated {:#x}", state.reg(r)));
        }
    }
    if let Some(delta) = effect.stack_delta {
        let moved = state.reg(Reg::Rsp).wrapping_sub(entry.reg(Reg::Rsp)) as i64;
        if moved != delta {
            problems.push(format!("{g}: stack delta symbolic {delta} emulated {moved}"));
        }
    }
    if let Some(t) = &effect.ret_target {
        if t.eval(&entry) != Some(state.rip) {
            problems.push(format!("{g}: return target mismatch"));
        }
    }
    let sym_writes: Vec<Option<(u64, u64)>> = effect
        .writes
        .iter()
        .map(|w| Some((w.addr.eval(&entry)?, w.value.eval(&entry)?)))
        .collect();
    let emu_writes: Vec<Option<(u64, u64)>> = state.mem.write_log.iter().copied().map(Some).collect();
    if sym_writes != emu_writes {
        problems.push(format!("{g}: writes symbolic {sym_writes:x?} emulated {emu_writes:x?}"));
    }
    problems
}

fn sampled_words(n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut v = vec![0, 1, u64::MAX, 0x7f, 0x80, 0xff, 0x100, 0x7fff_ffff, 0x8000_0000, 0xffff_ffff];
    while v.len() < n {
        v.push(rng.random());
    }
    v
}

fn sampled_disps(n: usize) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut v = vec![0, 1, -1, 127, -128, 128, -129, i32::MAX, i32::MIN];
    while v.len() < n {
        v.push(random_disp(&mut rng));
    }
    v
}

/// Every subset op over every register operand, with sampled immediates and
/// displacements.
pub fn all_ops() -> Vec<Op> {
    let words = sampled_words(1000);
    let disps = sampled_disps(1000);
    let mut ops = vec![Op::Ret, Op::Syscall, Op::Leave, Op::Nop];
    ops.extend(words.iter().map(|&w| Op::RetImm(w as u16)));
    for r in Reg::ALL {
        ops.push(Op::PopReg(r));
        ops.push(Op::PushReg(r));
        ops.extend(words.iter().map(|&imm| Op::MovRegImm64 { dst: r, imm }));
        for s in Reg::ALL {
            for width in [Width::W64, Width::W32] {
                ops.push(Op::MovRegReg { dst: r, src: s, width });
                ops.push(Op::XorRegReg { dst: r, src: s, width });
            }
            ops.push(Op::AddRegReg { dst: r, src: s });
            ops.push(Op::SubRegReg { dst: r, src: s });
        }
    }
    for base in base_regs() {
        for r in Reg::ALL {
            for &disp in &disps {
                ops.push(Op::MovStore { base, disp, src: r });
                ops.push(Op::MovLoad { dst: r, base, disp });
            }
        }
    }
    ops
}

