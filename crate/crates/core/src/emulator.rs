//! Deterministic user-mode emulator for the decoder subset.
//!
//! Runs a rendered payload against the image's real code bytes and stops at
//! the first `syscall` without performing it. Reads of unmapped, never-written
//! memory fault instead of returning zero.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::elf::{Elf64Image, Perms};
use crate::goal::{Arg, SyscallGoal, SYSCALL_NUMBER_REG};
use crate::semantics::EvalContext;
use crate::x86::{decode_one, Instruction, Op, Reg, Width, MAX_INSTR_LEN};

pub const DEFAULT_STACK_BASE: u64 = 0x7fff_f000_0000;
pub const DEFAULT_STACK_SIZE: u64 = 0x1_0000;
/// Payload start inside the default stack region; the space below it absorbs
/// pushes.
pub const DEFAULT_STACK_VADDR: u64 = DEFAULT_STACK_BASE + DEFAULT_STACK_SIZE / 2;
pub const DEFAULT_STEP_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmuConfig {
    /// Load base added to every segment vaddr.
    pub base_offset: u64,
    pub stack_base: u64,
    pub stack_size: u64,
    pub step_budget: usize,
    pub trace: bool,
}

impl Default for EmuConfig {
    fn default() -> Self {
        EmuConfig {
            base_offset: 0,
            stack_base: DEFAULT_STACK_BASE,
            stack_size: DEFAULT_STACK_SIZE,
            step_budget: DEFAULT_STEP_BUDGET,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StackError {
    #[error("RegionCollision: stack region {start:#x}..{end:#x} overlaps a segment")]
    RegionCollision { start: u64, end: u64 },
    #[error("PayloadOverflow: {len} payload bytes at {at:#x} do not fit the stack region")]
    PayloadOverflow { at: u64, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "addr", rename_all = "snake_case")]
pub enum FaultKind {
    /// Control reached an address outside the executable segments.
    BadRip(u64),
    /// The bytes at rip are outside the decoder subset.
    Opaque(u64),
    WildRead(u64),
    BadWrite(u64),
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::BadRip(a) => write!(f, "BadRip({a:#x})"),
            FaultKind::Opaque(a) => write!(f, "Opaque({a:#x})"),
            FaultKind::WildRead(a) => write!(f, "WildRead({a:#x})"),
            FaultKind::BadWrite(a) => write!(f, "BadWrite({a:#x})"),
        }
    }
}

#[derive(Debug, Clone)]
struct MappedRegion {
    start: u64,
    size: u64,
    perms: Perms,
    /// Initial contents; bytes past the end are zero-fill.
    init: Vec<u8>,
}

impl MappedRegion {
    fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr - self.start < self.size
    }
}

/// Sparse byte-addressed memory: image segments, the synthetic stack, and a
/// copy-on-write overlay.
#[derive(Debug, Clone)]
pub struct Memory {
    regions: Vec<MappedRegion>,
    overlay: HashMap<u64, u8>,
    background: Option<fn(u64) -> u8>,
    /// Every 64-bit store, in order.
    pub write_log: Vec<(u64, u64)>,
}

impl Memory {
    fn new() -> Self {
        Memory { regions: Vec::new(), overlay: HashMap::new(), background: None, write_log: Vec::new() }
    }

    /// Make every address readable and writable; unmapped bytes read as
    /// `f(addr)`. For differential testing of gadget semantics only.
    pub fn set_background(&mut self, f: fn(u64) -> u8) {
        self.background = Some(f);
    }

    fn region(&self, addr: u64) -> Option<&MappedRegion> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    pub fn read_u8(&self, addr: u64) -> Result<u8, FaultKind> {
        if let Some(&b) = self.overlay.get(&addr) {
            return Ok(b);
        }
        if let Some(r) = self.region(addr) {
            return Ok(r.init.get((addr - r.start) as usize).copied().unwrap_or(0));
        }
        match self.background {
            Some(f) => Ok(f(addr)),
            None => Err(FaultKind::WildRead(addr)),
        }
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, FaultKind> {
        let mut b = [0u8; 8];
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = self.read_u8(addr.wrapping_add(i as u64))?;
        }
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Result<Vec<u8>, FaultKind> {
        (0..len).map(|i| self.read_u8(addr.wrapping_add(i as u64))).collect()
    }

    fn writable(&self, addr: u64) -> bool {
        match self.region(addr) {
            Some(r) => r.perms.write,
            None => self.background.is_some(),
        }
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), FaultKind> {
        for i in 0..8 {
            let a = addr.wrapping_add(i);
            if !self.writable(a) {
                return Err(FaultKind::BadWrite(a));
            }
        }
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.overlay.insert(addr.wrapping_add(i as u64), b);
        }
        self.write_log.push((addr, value));
        Ok(())
    }

    /// Up to 15 code bytes at `addr` from an executable region.
    fn fetch(&self, addr: u64) -> Option<&[u8]> {
        let r = self.regions.iter().find(|r| r.perms.execute && r.contains(addr))?;
        let off = (addr - r.start) as usize;
        let end = r.init.len().min(off + MAX_INSTR_LEN);
        Some(r.init.get(off..end).unwrap_or(&[]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub rip: String,
    pub instr: String,
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u64; 16],
    pub rip: u64,
    pub mem: Memory,
    pub steps: usize,
    pub step_budget: usize,
    pub trace: Option<Vec<TraceEntry>>,
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        self.regs[r.index()] = v;
    }

    fn pop(&mut self) -> Result<u64, FaultKind> {
        let rsp = self.reg(Reg::Rsp);
        let v = self.mem.read_u64(rsp)?;
        self.set_reg(Reg::Rsp, rsp.wrapping_add(8));
        Ok(v)
    }

    fn push(&mut self, v: u64) -> Result<(), FaultKind> {
        let rsp = self.reg(Reg::Rsp).wrapping_sub(8);
        self.set_reg(Reg::Rsp, rsp);
        self.mem.write_u64(rsp, v)
    }

    /// Fetch and decode the instruction at `rip`.
    pub fn fetch(&self) -> Result<Instruction, FaultKind> {
        let bytes = self.mem.fetch(self.rip).ok_or(FaultKind::BadRip(self.rip))?;
        decode_one(bytes, self.rip).ok_or(FaultKind::Opaque(self.rip))
    }

    /// Execute one instruction at `rip`.
    pub fn step(&mut self) -> Result<StepEvent, FaultKind> {
        let ins = self.fetch()?;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                step: self.steps,
                rip: format!("{:#x}", self.rip),
                instr: ins.op.to_string(),
            });
        }
        self.steps += 1;
        let next = ins.end();
        let event = self.execute(&ins.op)?;
        if event == StepEvent::Continue {
            self.rip = next;
        }
        Ok(event)
    }

    /// Concrete semantics of one op. Control transfers update `rip`.
    pub fn execute(&mut self, op: &Op) -> Result<StepEvent, FaultKind> {
        match *op {
            Op::Ret => {
                self.rip = self.pop()?;
                return Ok(StepEvent::Returned);
            }
            Op::RetImm(n) => {
                self.rip = self.pop()?;
                let rsp = self.reg(Reg::Rsp).wrapping_add(n as u64);
                self.set_reg(Reg::Rsp, rsp);
                return Ok(StepEvent::Returned);
            }
            Op::Syscall => return Ok(StepEvent::Syscall),
            Op::Nop => {}
            Op::PopReg(r) => {
                let v = self.pop()?;
                self.set_reg(r, v);
            }
            Op::PushReg(r) => self.push(self.reg(r))?,
            Op::MovRegReg { dst, src, width } => {
                let v = self.reg(src);
                self.set_reg(dst, if width == Width::W32 { v & 0xffff_ffff } else { v });
            }
            Op::MovRegImm64 { dst, imm } => self.set_reg(dst, imm),
            Op::MovStore { base, disp, src } => {
                let addr = self.reg(base).wrapping_add(disp as i64 as u64);
                self.mem.write_u64(addr, self.reg(src))?;
            }
            Op::MovLoad { dst, base, disp } => {
                let addr = self.reg(base).wrapping_add(disp as i64 as u64);
                let v = self.mem.read_u64(addr)?;
                self.set_reg(dst, v);
            }
            Op::AddRegReg { dst, src } => {
                self.set_reg(dst, self.reg(dst).wrapping_add(self.reg(src)));
            }
            Op::SubRegReg { dst, src } => {
                self.set_reg(dst, self.reg(dst).wrapping_sub(self.reg(src)));
            }
            Op::XorRegReg { dst, src, width } => {
                let v = self.reg(dst) ^ self.reg(src);
                self.set_reg(dst, if width == Width::W32 { v & 0xffff_ffff } else { v });
            }
            Op::Leave => {
                self.set_reg(Reg::Rsp, self.reg(Reg::Rbp));
                let v = self.pop()?;
                self.set_reg(Reg::Rbp, v);
            }
        }
        Ok(StepEvent::Continue)
    }
}

impl EvalContext for MachineState {
    fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    fn read64(&self, addr: u64) -> Option<u64> {
        self.mem.read_u64(addr).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Continue,
    Returned,
    Syscall,
}

/// Map the image's segments (shifted by `cfg.base_offset`) plus an empty
/// stack region.
pub fn map_image(image: &Elf64Image, cfg: &EmuConfig) -> Result<Memory, StackError> {
    let mut mem = Memory::new();
    let stack_end = cfg.stack_base.saturating_add(cfg.stack_size);
    for seg in &image.segments {
        let start = seg.vaddr.wrapping_add(cfg.base_offset);
        let end = start.saturating_add(seg.mem_size);
        if start < stack_end && cfg.stack_base < end {
            return Err(StackError::RegionCollision { start: cfg.stack_base, end: stack_end });
        }
        mem.regions.push(MappedRegion {
            start,
            size: seg.mem_size,
            perms: seg.perms,
            init: image.segment_bytes(seg).to_vec(),
        });
    }
    mem.regions.push(MappedRegion {
        start: cfg.stack_base,
        size: cfg.stack_size,
        perms: Perms::RW,
        init: Vec::new(),
    });
    Ok(mem)
}

/// Fresh machine with `payload` copied to `stack_vaddr` and `rsp` pointing at
/// it. Registers other than `rsp` come from `seed`.
pub fn init_state(
    image: &Elf64Image,
    payload: &[u8],
    stack_vaddr: u64,
    seed: [u64; 16],
    cfg: &EmuConfig,
) -> Result<MachineState, StackError> {
    let mut mem = map_image(image, cfg)?;
    let stack_end = cfg.stack_base + cfg.stack_size;
    let fits = stack_vaddr >= cfg.stack_base
        && stack_vaddr
            .checked_add(payload.len() as u64)
            .is_some_and(|end| end <= stack_end);
    if !fits {
        return Err(StackError::PayloadOverflow { at: stack_vaddr, len: payload.len() });
    }
    for (i, &b) in payload.iter().enumerate() {
        mem.overlay.insert(stack_vaddr + i as u64, b);
    }
    let mut regs = seed;
    regs[Reg::Rsp.index()] = stack_vaddr;
    Ok(MachineState {
        regs,
        rip: 0,
        mem,
        steps: 0,
        step_budget: cfg.step_budget,
        trace: cfg.trace.then(Vec::new),
    })
}

#[derive(Debug, Clone)]
pub enum Outcome {
    ReachedSyscall(Box<MachineState>),
    Fault { kind: FaultKind, rip: u64, step: usize, trace: Option<Vec<TraceEntry>> },
    Budget { steps: usize, trace: Option<Vec<TraceEntry>> },
}

impl Outcome {
    pub fn trace(&self) -> Option<&[TraceEntry]> {
        match self {
            Outcome::ReachedSyscall(s) => s.trace.as_deref(),
            Outcome::Fault { trace, .. } | Outcome::Budget { trace, .. } => trace.as_deref(),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::ReachedSyscall(s) => {
                write!(f, "reached syscall at {:#x} after {} steps", s.rip, s.steps)
            }
            Outcome::Fault { kind, rip, step, .. } => {
                write!(f, "fault {kind} at rip {rip:#x} (step {step})")
            }
            Outcome::Budget { steps, .. } => write!(f, "step budget exhausted after {steps} steps"),
        }
    }
}

/// Pop the first gadget address and run until a syscall, fault, or the step
/// budget.
pub fn run(mut state: MachineState) -> Outcome {
    let fault = |state: MachineState, kind| Outcome::Fault {
        kind,
        rip: state.rip,
        step: state.steps,
        trace: state.trace,
    };
    match state.pop() {
        Ok(rip) => state.rip = rip,
        Err(kind) => return fault(state, kind),
    }
    loop {
        if state.steps >= state.step_budget {
            return Outcome::Budget { steps: state.steps, trace: state.trace };
        }
        match state.step() {
            Ok(StepEvent::Syscall) => return Outcome::ReachedSyscall(Box::new(state)),
            Ok(_) => {}
            Err(kind) => return fault(state, kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    NoSyscall { outcome: String },
    Register { reg: Reg, expected: String, actual: String },
    Memory { addr: String, expected: u8, actual: Option<u8> },
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mismatch::NoSyscall { outcome } => write!(f, "did not reach syscall: {outcome}"),
            Mismatch::Register { reg, expected, actual } => {
                write!(f, "register {reg}: expected {expected}, got {actual}")
            }
            Mismatch::Memory { addr, expected, actual: Some(a) } => {
                write!(f, "memory {addr}: expected {expected:#04x}, got {a:#04x}")
            }
            Mismatch::Memory { addr, expected, actual: None } => {
                write!(f, "memory {addr}: expected {expected:#04x}, unreadable")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub mismatches: Vec<Mismatch>,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pass {
            return f.write_str("PASS");
        }
        f.write_str("FAIL")?;
        for m in &self.mismatches {
            write!(f, "\n  {m}")?;
        }
        Ok(())
    }
}

/// Compare the machine state at the trapped syscall with the goal.
/// `staged` maps argument index to the address its data was staged at.
pub fn verify_goal(outcome: &Outcome, goal: &SyscallGoal, staged: &BTreeMap<usize, u64>) -> VerifyReport {
    let state = match outcome {
        Outcome::ReachedSyscall(s) => s,
        other => {
            let reason = match other {
                Outcome::Budget { .. } => "budget-exhausted".to_string(),
                o => o.to_string(),
            };
            return VerifyReport {
                pass: false,
                mismatches: vec![Mismatch::NoSyscall { outcome: reason }],
            };
        }
    };

    let mut mismatches = Vec::new();
    let mut check_reg = |reg: Reg, expected: u64| {
        let actual = state.reg(reg);
        if actual != expected {
            mismatches.push(Mismatch::Register {
                reg,
                expected: format!("{expected:#x}"),
                actual: format!("{actual:#x}"),
            });
        }
    };
    check_reg(SYSCALL_NUMBER_REG, goal.number);
    let mut data_checks = Vec::new();
    for (i, (reg, arg)) in goal.arg_regs().enumerate() {
        match arg {
            Arg::Immediate(v) => check_reg(reg, *v),
            Arg::DataPointer(data) => {
                let addr = staged.get(&i).copied().unwrap_or(0);
                check_reg(reg, addr);
                data_checks.push((addr, data));
            }
        }
    }
    for (addr, data) in data_checks {
        for (i, &want) in data.iter().enumerate() {
            let a = addr.wrapping_add(i as u64);
            let got = state.mem.read_u8(a).ok();
            if got != Some(want) {
                mismatches.push(Mismatch::Memory { addr: format!("{a:#x}"), expected: want, actual: got });
            }
        }
    }
    VerifyReport { pass: mismatches.is_empty(), mismatches }
}

/// Run `words` from the default stack with zeroed registers and check the
/// result against `goal`.
pub fn replay(
    image: &Elf64Image,
    words: &[u64],
    goal: &SyscallGoal,
    staged: &BTreeMap<usize, u64>,
    cfg: &EmuConfig,
) -> Result<(Outcome, VerifyReport), StackError> {
    let raw: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    let stack_vaddr = cfg.stack_base + cfg.stack_size / 2;
    let state = init_state(image, &raw, stack_vaddr, [0; 16], cfg)?;
    let outcome = run(state);
    let report = verify_goal(&outcome, goal, staged);
    Ok((outcome, report))
}
