//! Closed-subset x86-64 decoder and encoder.
//!
//! Anything outside the subset decodes as opaque (`None`), which is what
//! disqualifies a gadget candidate: every instruction in a gadget must have a
//! fully modeled effect.
//!
//! Supported encodings:
//!
//! | op                    | bytes                                   |
//! |-----------------------|-----------------------------------------|
//! | `ret`                 | `C3`                                    |
//! | `ret imm16`           | `C2 iw`                                 |
//! | `syscall`             | `0F 05`                                 |
//! | `pop r64`             | `[REX] 58+r`                            |
//! | `push r64`            | `[REX] 50+r`                            |
//! | `mov r64, r64`        | `REX.W 89 /r` or `REX.W 8B /r`, mod=11   |
//! | `mov r32, r32`        | `[REX] 89 /r`, mod=11, no REX.W          |
//! | `mov r64, imm64`      | `REX.W B8+r io`                         |
//! | `mov [base+d], r64`   | `REX.W 89 /r`, mod=00/01/10, no SIB      |
//! | `mov r64, [base+d]`   | `REX.W 8B /r`, mod=00/01/10, no SIB      |
//! | `add/sub/xor r64,r64` | `REX.W 01/29/31 /r`, mod=11              |
//! | `xor r32, r32`        | `[REX] 31 /r`, mod=11, no REX.W          |
//! | `leave`               | `C9`                                    |
//! | `nop`                 | `90`                                    |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// General-purpose register, numbered by its hardware encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    /// Kernel syscall argument registers, in argument order.
    pub const SYSCALL_ARGS: [Reg; 6] = [Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::R10, Reg::R8, Reg::R9];

    pub fn from_index(i: u8) -> Reg {
        Reg::ALL[(i & 0xf) as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn low3(self) -> u8 {
        self as u8 & 7
    }

    fn ext(self) -> u8 {
        (self as u8 >> 3) & 1
    }

    pub fn name64(self) -> &'static str {
        const N: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ];
        N[self.index()]
    }

    pub fn name32(self) -> &'static str {
        const N: [&str; 16] = [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d",
            "r12d", "r13d", "r14d", "r15d",
        ];
        N[self.index()]
    }

    pub fn name(self, width: Width) -> &'static str {
        match width {
            Width::W64 => self.name64(),
            Width::W32 => self.name32(),
        }
    }

    pub fn parse(s: &str) -> Option<Reg> {
        Reg::ALL.into_iter().find(|r| r.name64() == s)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name64())
    }
}

/// Operand width. 32-bit forms zero the upper half of the destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Width {
    W64,
    W32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Ret,
    RetImm(u16),
    Syscall,
    PopReg(Reg),
    PushReg(Reg),
    MovRegReg { dst: Reg, src: Reg, width: Width },
    MovRegImm64 { dst: Reg, imm: u64 },
    MovStore { base: Reg, disp: i32, src: Reg },
    MovLoad { dst: Reg, base: Reg, disp: i32 },
    AddRegReg { dst: Reg, src: Reg },
    SubRegReg { dst: Reg, src: Reg },
    XorRegReg { dst: Reg, src: Reg, width: Width },
    Leave,
    Nop,
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Ret | Op::RetImm(_) | Op::Syscall)
    }
}

fn fmt_mem(f: &mut fmt::Formatter<'_>, base: Reg, disp: i32) -> fmt::Result {
    match disp {
        0 => write!(f, "[{base}]"),
        d if d < 0 => write!(f, "[{base}-{:#x}]", (d as i64).unsigned_abs()),
        d => write!(f, "[{base}+{d:#x}]"),
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Op::Ret => f.write_str("ret"),
            Op::RetImm(n) => write!(f, "ret {n:#x}"),
            Op::Syscall => f.write_str("syscall"),
            Op::PopReg(r) => write!(f, "pop {r}"),
            Op::PushReg(r) => write!(f, "push {r}"),
            Op::MovRegReg { dst, src, width } => {
                write!(f, "mov {}, {}", dst.name(width), src.name(width))
            }
            Op::MovRegImm64 { dst, imm } => write!(f, "mov {dst}, {imm:#x}"),
            Op::MovStore { base, disp, src } => {
                f.write_str("mov ")?;
                fmt_mem(f, base, disp)?;
                write!(f, ", {src}")
            }
            Op::MovLoad { dst, base, disp } => {
                write!(f, "mov {dst}, ")?;
                fmt_mem(f, base, disp)
            }
            Op::AddRegReg { dst, src } => write!(f, "add {dst}, {src}"),
            Op::SubRegReg { dst, src } => write!(f, "sub {dst}, {src}"),
            Op::XorRegReg { dst, src, width } => {
                write!(f, "xor {}, {}", dst.name(width), src.name(width))
            }
            Op::Leave => f.write_str("leave"),
            Op::Nop => f.write_str("nop"),
        }
    }
}

pub const MAX_INSTR_LEN: usize = 15;

/// One decoded instruction together with the exact bytes it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub vaddr: u64,
    pub op: Op,
    len: u8,
    bytes: [u8; MAX_INSTR_LEN],
}

impl Instruction {
    fn new(vaddr: u64, op: Op, raw: &[u8]) -> Self {
        let mut bytes = [0u8; MAX_INSTR_LEN];
        bytes[..raw.len()].copy_from_slice(raw);
        Instruction { vaddr, op, len: raw.len() as u8, bytes }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn raw(&self) -> &[u8] {
        &self.bytes[..self.len()]
    }

    pub fn end(&self) -> u64 {
        self.vaddr.wrapping_add(self.len as u64)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.op.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("OperandOutOfRange: {0}")]
    OperandOutOfRange(&'static str),
}

/// Offset within a run at which decoding hit an opaque byte sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpaqueAt(pub usize);

struct Rex {
    w: bool,
    r: u8,
    b: u8,
}

/// Decode a single instruction from the front of `bytes`.
///
/// Returns `None` (opaque) unless the prefix is exactly one subset encoding.
pub fn decode_one(bytes: &[u8], vaddr: u64) -> Option<Instruction> {
    let first = *bytes.first()?;
    let (rex, at) = if first & 0xf0 == 0x40 {
        (
            Some(Rex {
                w: first & 0x08 != 0,
                r: (first >> 2) & 1,
                b: first & 1,
            }),
            1,
        )
    } else {
        (None, 0)
    };
    let opcode = *bytes.get(at)?;
    let w = rex.as_ref().is_some_and(|r| r.w);
    let rex_r = rex.as_ref().map_or(0, |r| r.r);
    let rex_b = rex.as_ref().map_or(0, |r| r.b);
    let done = |op: Op, len: usize| Some(Instruction::new(vaddr, op, &bytes[..len]));

    match opcode {
        0xc3 if rex.is_none() => done(Op::Ret, 1),
        0xc2 if rex.is_none() => {
            let imm = bytes.get(1..3)?;
            done(Op::RetImm(u16::from_le_bytes([imm[0], imm[1]])), 3)
        }
        0x0f if rex.is_none() => match bytes.get(1)? {
            0x05 => done(Op::Syscall, 2),
            _ => None,
        },
        0xc9 if rex.is_none() => done(Op::Leave, 1),
        0x90 if rex.is_none() => done(Op::Nop, 1),
        0x58..=0x5f => done(Op::PopReg(Reg::from_index((opcode & 7) | rex_b << 3)), at + 1),
        0x50..=0x57 => done(Op::PushReg(Reg::from_index((opcode & 7) | rex_b << 3)), at + 1),
        0xb8..=0xbf if w => {
            let imm = bytes.get(at + 1..at + 9)?;
            let imm = u64::from_le_bytes(imm.try_into().unwrap());
            let dst = Reg::from_index((opcode & 7) | rex_b << 3);
            done(Op::MovRegImm64 { dst, imm }, at + 9)
        }
        0x89 | 0x8b | 0x01 | 0x29 | 0x31 => {
            let modrm = *bytes.get(at + 1)?;
            let md = modrm >> 6;
            let reg = Reg::from_index(((modrm >> 3) & 7) | rex_r << 3);
            let rm_low = modrm & 7;
            let rm = Reg::from_index(rm_low | rex_b << 3);
            if md == 0b11 {
                let width = if w { Width::W64 } else { Width::W32 };
                let op = match (opcode, width) {
                    (0x89, _) => Op::MovRegReg { dst: rm, src: reg, width },
                    (0x8b, Width::W64) => Op::MovRegReg { dst: reg, src: rm, width },
                    (0x01, Width::W64) => Op::AddRegReg { dst: rm, src: reg },
                    (0x29, Width::W64) => Op::SubRegReg { dst: rm, src: reg },
                    (0x31, _) => Op::XorRegReg { dst: rm, src: reg, width },
                    _ => return None,
                };
                return done(op, at + 2);
            }
            if !w || !matches!(opcode, 0x89 | 0x8b) || rm_low == 0b100 {
                return None;
            }
            let (disp, disp_len) = match md {
                0b00 if rm_low == 0b101 => return None,
                0b00 => (0i32, 0usize),
                0b01 => (*bytes.get(at + 2)? as i8 as i32, 1),
                _ => {
                    let d = bytes.get(at + 2..at + 6)?;
                    (i32::from_le_bytes(d.try_into().unwrap()), 4)
                }
            };
            let op = if opcode == 0x89 {
                Op::MovStore { base: rm, disp, src: reg }
            } else {
                Op::MovLoad { dst: reg, base: rm, disp }
            };
            done(op, at + 2 + disp_len)
        }
        _ => None,
    }
}

/// Decode back-to-back instructions until `bytes` is exhausted.
pub fn decode_run(bytes: &[u8], vaddr: u64) -> Result<Vec<Instruction>, OpaqueAt> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        match decode_one(&bytes[off..], vaddr.wrapping_add(off as u64)) {
            Some(ins) => {
                off += ins.len();
                out.push(ins);
            }
            None => return Err(OpaqueAt(off)),
        }
    }
    Ok(out)
}

fn rex_byte(w: bool, r: Reg, b: Reg) -> u8 {
    0x40 | (w as u8) << 3 | r.ext() << 2 | b.ext()
}

fn modrm_rr(reg: Reg, rm: Reg) -> u8 {
    0xc0 | reg.low3() << 3 | rm.low3()
}

fn encode_mem(out: &mut Vec<u8>, opcode: u8, reg: Reg, base: Reg, disp: i32) -> Result<(), EncodeError> {
    if base.low3() == 0b100 {
        return Err(EncodeError::OperandOutOfRange(
            "rsp/r12 base needs a SIB byte, which is outside the subset",
        ));
    }
    out.push(rex_byte(true, reg, base));
    out.push(opcode);
    if disp == 0 && base.low3() != 0b101 {
        out.push(reg.low3() << 3 | base.low3());
    } else if let Ok(d8) = i8::try_from(disp) {
        out.push(0x40 | reg.low3() << 3 | base.low3());
        out.push(d8 as u8);
    } else {
        out.push(0x80 | reg.low3() << 3 | base.low3());
        out.extend_from_slice(&disp.to_le_bytes());
    }
    Ok(())
}

fn encode_rr(out: &mut Vec<u8>, opcode: u8, width: Width, reg: Reg, rm: Reg) {
    let w = width == Width::W64;
    if w || reg.ext() != 0 || rm.ext() != 0 {
        out.push(rex_byte(w, reg, rm));
    }
    out.push(opcode);
    out.push(modrm_rr(reg, rm));
}

/// Canonical encoding of `op`.
pub fn encode_one(op: &Op) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(10);
    match *op {
        Op::Ret => out.push(0xc3),
        Op::RetImm(n) => {
            out.push(0xc2);
            out.extend_from_slice(&n.to_le_bytes());
        }
        Op::Syscall => out.extend_from_slice(&[0x0f, 0x05]),
        Op::PopReg(r) | Op::PushReg(r) => {
            if r.ext() != 0 {
                out.push(0x41);
            }
            let base = if matches!(op, Op::PopReg(_)) { 0x58 } else { 0x50 };
            out.push(base + r.low3());
        }
        Op::MovRegReg { dst, src, width } => encode_rr(&mut out, 0x89, width, src, dst),
        Op::MovRegImm64 { dst, imm } => {
            out.push(0x48 | dst.ext());
            out.push(0xb8 + dst.low3());
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Op::MovStore { base, disp, src } => encode_mem(&mut out, 0x89, src, base, disp)?,
        Op::MovLoad { dst, base, disp } => encode_mem(&mut out, 0x8b, dst, base, disp)?,
        Op::AddRegReg { dst, src } => encode_rr(&mut out, 0x01, Width::W64, src, dst),
        Op::SubRegReg { dst, src } => encode_rr(&mut out, 0x29, Width::W64, src, dst),
        Op::XorRegReg { dst, src, width } => encode_rr(&mut out, 0x31, width, src, dst),
        Op::Leave => out.push(0xc9),
        Op::Nop => out.push(0x90),
    }
    Ok(out)
}

/// Assemble a sequence of ops back to back. Panics on unencodable operands;
/// meant for building fixtures.
pub fn assemble(ops: &[Op]) -> Vec<u8> {
    ops.iter()
        .flat_map(|op| encode_one(op).unwrap_or_else(|e| panic!("cannot encode {op}: {e}")))
        .collect()
}
