//! Symbolic summaries of gadgets.
//!
//! A gadget is interpreted over a state whose registers start as
//! `InitReg(r)`. Stack reads at a known offset from the entry `rsp` become
//! `StackSlot(k)`; any other load is `MemAt(addr)`. The result is a transfer
//! function ([`GadgetEffect`]) plus capability tags the chain compiler keys on.
//!
//! Flags are not modeled: no instruction in the decoder subset reads them.
//! Loads are forwarded from earlier stores in the same gadget when the
//! addresses share a symbolic base; stores through distinct symbolic bases are
//! assumed not to alias each other or the stack.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::scanner::{Gadget, Terminator};
use crate::x86::{Op, Reg, Width};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymExpr {
    /// Value of a register at gadget entry.
    InitReg(Reg),
    /// 64-bit word at entry `rsp` + offset.
    StackSlot(i64),
    Const(u64),
    Add(Box<SymExpr>, Box<SymExpr>),
    Sub(Box<SymExpr>, Box<SymExpr>),
    Xor(Box<SymExpr>, Box<SymExpr>),
    Trunc32ZeroExtend(Box<SymExpr>),
    /// 64-bit load from entry-state memory.
    MemAt(Box<SymExpr>),
}

use SymExpr::*;

impl SymExpr {
    pub fn add(a: SymExpr, b: SymExpr) -> SymExpr {
        match (a, b) {
            (Const(x), Const(y)) => Const(x.wrapping_add(y)),
            (a, Const(0)) => a,
            (Const(0), b) => b,
            (Add(x, c), Const(d)) if matches!(*c, Const(_)) => {
                let Const(c) = *c else { unreachable!() };
                SymExpr::add(*x, Const(c.wrapping_add(d)))
            }
            (c @ Const(_), b) => SymExpr::add(b, c),
            (a, b) => Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: SymExpr, b: SymExpr) -> SymExpr {
        match (a, b) {
            (Const(x), Const(y)) => Const(x.wrapping_sub(y)),
            (a, Const(y)) => SymExpr::add(a, Const(y.wrapping_neg())),
            (a, b) => Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn xor(a: SymExpr, b: SymExpr) -> SymExpr {
        match (a, b) {
            (Const(x), Const(y)) => Const(x ^ y),
            (a, b) if a == b => Const(0),
            (a, b) => Xor(Box::new(a), Box::new(b)),
        }
    }

    pub fn trunc32(a: SymExpr) -> SymExpr {
        match a {
            Const(x) => Const(x & 0xffff_ffff),
            t @ Trunc32ZeroExtend(_) => t,
            a => Trunc32ZeroExtend(Box::new(a)),
        }
    }

    pub fn mem_at(a: SymExpr) -> SymExpr {
        MemAt(Box::new(a))
    }

    /// `addr + offset` in canonical form.
    pub fn offset(a: SymExpr, off: i64) -> SymExpr {
        SymExpr::add(a, Const(off as u64))
    }

    /// `Some(k)` if this is entry `rsp` + constant `k`.
    pub fn stack_offset(&self) -> Option<i64> {
        match self {
            InitReg(Reg::Rsp) => Some(0),
            Add(x, c) => match (&**x, &**c) {
                (InitReg(Reg::Rsp), Const(k)) => Some(*k as i64),
                _ => None,
            },
            _ => None,
        }
    }

    /// Split into symbolic base and constant displacement.
    pub fn base_and_disp(&self) -> (Option<&SymExpr>, i64) {
        match self {
            Const(k) => (None, *k as i64),
            Add(x, c) => match &**c {
                Const(k) => (Some(&**x), *k as i64),
                _ => (Some(self), 0),
            },
            _ => (Some(self), 0),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            InitReg(_) | StackSlot(_) | Const(_) => 1,
            Add(a, b) | Sub(a, b) | Xor(a, b) => 1 + a.depth().max(b.depth()),
            Trunc32ZeroExtend(a) | MemAt(a) => 1 + a.depth(),
        }
    }

    fn visit(&self, f: &mut impl FnMut(&SymExpr)) {
        f(self);
        match self {
            Add(a, b) | Sub(a, b) | Xor(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Trunc32ZeroExtend(a) | MemAt(a) => a.visit(f),
            _ => {}
        }
    }

    pub fn has_mem_load(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, MemAt(_)));
        found
    }

    pub fn stack_slots(&self, out: &mut BTreeSet<i64>) {
        self.visit(&mut |e| {
            if let StackSlot(k) = e {
                out.insert(*k);
            }
        });
    }

    /// Concrete value under an entry state. `None` if a memory read fails.
    pub fn eval(&self, ctx: &impl EvalContext) -> Option<u64> {
        Some(match self {
            InitReg(r) => ctx.reg(*r),
            StackSlot(k) => ctx.read64(ctx.reg(Reg::Rsp).wrapping_add(*k as u64))?,
            Const(c) => *c,
            Add(a, b) => a.eval(ctx)?.wrapping_add(b.eval(ctx)?),
            Sub(a, b) => a.eval(ctx)?.wrapping_sub(b.eval(ctx)?),
            Xor(a, b) => a.eval(ctx)? ^ b.eval(ctx)?,
            Trunc32ZeroExtend(a) => a.eval(ctx)? & 0xffff_ffff,
            MemAt(a) => ctx.read64(a.eval(ctx)?)?,
        })
    }
}

fn fmt_signed(f: &mut fmt::Formatter<'_>, k: i64) -> fmt::Result {
    if k < 0 {
        write!(f, "-{:#x}", k.unsigned_abs())
    } else {
        write!(f, "+{k:#x}")
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitReg(r) => write!(f, "{r}"),
            StackSlot(k) => {
                f.write_str("stack[")?;
                fmt_signed(f, *k)?;
                f.write_str("]")
            }
            Const(c) => write!(f, "{c:#x}"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Xor(a, b) => write!(f, "({a} ^ {b})"),
            Trunc32ZeroExtend(a) => write!(f, "zext32({a})"),
            MemAt(a) => write!(f, "mem[{a}]"),
        }
    }
}

/// Entry state for [`SymExpr::eval`].
pub trait EvalContext {
    fn reg(&self, r: Reg) -> u64;
    fn read64(&self, addr: u64) -> Option<u64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithKind {
    Add,
    Sub,
    Xor,
}

impl fmt::Display for ArithKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArithKind::Add => "add",
            ArithKind::Sub => "sub",
            ArithKind::Xor => "xor",
        })
    }
}

/// Capability tags: postconditions of a gadget that the compiler matches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    /// `out[reg] == StackSlot(slot)`.
    LoadConst { reg: Reg, slot: i64 },
    /// `out[dst] == InitReg(src)`.
    MoveReg { dst: Reg, src: Reg },
    /// `out[dst] == MemAt(InitReg(base) + disp)`.
    LoadMem { dst: Reg, base: Reg, disp: i64 },
    /// A non-stack write of `InitReg(src)` to `InitReg(base) + disp`.
    StoreMem { base: Reg, src: Reg, disp: i64 },
    /// `out[dst] == InitReg(dst) <kind> InitReg(src)`.
    Arith { kind: ArithKind, dst: Reg, src: Reg },
    ZeroReg(Reg),
    SyscallTrigger,
    StackPivot,
    Unusable,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Tag::LoadConst { reg, slot } => write!(f, "LoadConst({reg}, {slot})"),
            Tag::MoveReg { dst, src } => write!(f, "MoveReg({dst}, {src})"),
            Tag::LoadMem { dst, base, disp } => write!(f, "LoadMem({dst}, {base}, {disp})"),
            Tag::StoreMem { base, src, disp } => write!(f, "StoreMem({base}, {src}, {disp})"),
            Tag::Arith { kind, dst, src } => write!(f, "Arith({kind}, {dst}, {src})"),
            Tag::ZeroReg(r) => write!(f, "ZeroReg({r})"),
            Tag::SyscallTrigger => f.write_str("SyscallTrigger"),
            Tag::StackPivot => f.write_str("StackPivot"),
            Tag::Unusable => f.write_str("Unusable"),
        }
    }
}

/// A 64-bit memory write performed by the gadget, in program order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemWrite {
    pub addr: SymExpr,
    pub value: SymExpr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GadgetEffect {
    pub terminator: Terminator,
    /// Final value of every register, indexed by [`Reg::index`].
    pub out: Vec<SymExpr>,
    /// Net `rsp` movement including the terminator. `None` for pivots.
    pub stack_delta: Option<i64>,
    pub writes: Vec<MemWrite>,
    pub clobbers: BTreeSet<Reg>,
    pub tags: BTreeSet<Tag>,
    /// Where the terminating `ret` takes its target from. `None` for syscall.
    pub ret_target: Option<SymExpr>,
    // set by the interpreter when a load partially overlaps an earlier store
    analysis_failed: bool,
}

impl GadgetEffect {
    pub fn out(&self, r: Reg) -> &SymExpr {
        &self.out[r.index()]
    }

    pub fn has(&self, tag: &Tag) -> bool {
        self.tags.contains(tag)
    }

    pub fn is_pivot(&self) -> bool {
        self.has(&Tag::StackPivot)
    }

    pub fn is_unusable(&self) -> bool {
        self.has(&Tag::Unusable)
    }

    /// Any load from non-stack memory.
    pub fn reads_memory(&self) -> bool {
        self.out.iter().any(SymExpr::has_mem_load)
            || self.writes.iter().any(|w| w.addr.has_mem_load() || w.value.has_mem_load())
            || self.ret_target.as_ref().is_some_and(SymExpr::has_mem_load)
    }

    /// Stack offsets read by the gadget body (return address excluded).
    pub fn stack_reads(&self) -> BTreeSet<i64> {
        let mut slots = BTreeSet::new();
        for e in &self.out {
            e.stack_slots(&mut slots);
        }
        for w in &self.writes {
            w.addr.stack_slots(&mut slots);
            w.value.stack_slots(&mut slots);
        }
        slots
    }

    pub fn non_stack_writes(&self) -> impl Iterator<Item = &MemWrite> {
        self.writes.iter().filter(|w| w.addr.stack_offset().is_none())
    }

    /// Bytes of return-address slot and `ret imm16` displacement beyond the
    /// body's own stack words.
    pub fn ret_imm(&self) -> u16 {
        match self.terminator {
            Terminator::RetImm(n) => n,
            _ => 0,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Alias {
    Same,
    Partial,
    Disjoint,
}

fn alias(a: &SymExpr, b: &SymExpr) -> Alias {
    let (base_a, da) = a.base_and_disp();
    let (base_b, db) = b.base_and_disp();
    if base_a != base_b {
        return Alias::Disjoint;
    }
    let diff = da.wrapping_sub(db);
    match diff {
        0 => Alias::Same,
        d if d.unsigned_abs() < 8 => Alias::Partial,
        _ => Alias::Disjoint,
    }
}

struct SymState {
    regs: Vec<SymExpr>,
    writes: Vec<MemWrite>,
    failed: bool,
    pivoted: bool,
}

impl SymState {
    fn new() -> Self {
        SymState {
            regs: Reg::ALL.iter().map(|&r| InitReg(r)).collect(),
            writes: Vec::new(),
            failed: false,
            pivoted: false,
        }
    }

    fn get(&self, r: Reg) -> SymExpr {
        self.regs[r.index()].clone()
    }

    fn set(&mut self, r: Reg, v: SymExpr) {
        self.regs[r.index()] = v;
        if r == Reg::Rsp && self.regs[Reg::Rsp.index()].stack_offset().is_none() {
            self.pivoted = true;
        }
    }

    fn load(&mut self, addr: SymExpr) -> SymExpr {
        for w in self.writes.iter().rev() {
            match alias(&w.addr, &addr) {
                Alias::Same => return w.value.clone(),
                Alias::Partial => {
                    self.failed = true;
                    break;
                }
                Alias::Disjoint => {}
            }
        }
        match addr.stack_offset() {
            Some(k) => StackSlot(k),
            None => SymExpr::mem_at(addr),
        }
    }

    fn store(&mut self, addr: SymExpr, value: SymExpr) {
        self.writes.push(MemWrite { addr, value });
    }

    fn bump_rsp(&mut self, by: i64) {
        let rsp = SymExpr::offset(self.get(Reg::Rsp), by);
        self.set(Reg::Rsp, rsp);
    }

    /// Returns the ret target for Ret/RetImm.
    fn exec(&mut self, op: &Op) -> Option<SymExpr> {
        match *op {
            Op::Ret | Op::RetImm(_) => {
                let target = self.load(self.get(Reg::Rsp));
                let imm = if let Op::RetImm(n) = *op { n as i64 } else { 0 };
                self.bump_rsp(8 + imm);
                return Some(target);
            }
            Op::Syscall | Op::Nop => {}
            Op::PopReg(r) => {
                let v = self.load(self.get(Reg::Rsp));
                self.bump_rsp(8);
                self.set(r, v);
            }
            Op::PushReg(r) => {
                let v = self.get(r);
                self.bump_rsp(-8);
                self.store(self.get(Reg::Rsp), v);
            }
            Op::MovRegReg { dst, src, width } => {
                let v = self.get(src);
                let v = if width == Width::W32 { SymExpr::trunc32(v) } else { v };
                self.set(dst, v);
            }
            Op::MovRegImm64 { dst, imm } => self.set(dst, Const(imm)),
            Op::MovStore { base, disp, src } => {
                let addr = SymExpr::offset(self.get(base), disp as i64);
                self.store(addr, self.get(src));
            }
            Op::MovLoad { dst, base, disp } => {
                let v = self.load(SymExpr::offset(self.get(base), disp as i64));
                self.set(dst, v);
            }
            Op::AddRegReg { dst, src } => {
                self.set(dst, SymExpr::add(self.get(dst), self.get(src)));
            }
            Op::SubRegReg { dst, src } => {
                self.set(dst, SymExpr::sub(self.get(dst), self.get(src)));
            }
            Op::XorRegReg { dst, src, width } => {
                let v = SymExpr::xor(self.get(dst), self.get(src));
                let v = if width == Width::W32 { SymExpr::trunc32(v) } else { v };
                self.set(dst, v);
            }
            Op::Leave => {
                self.set(Reg::Rsp, self.get(Reg::Rbp));
                let v = self.load(self.get(Reg::Rsp));
                self.bump_rsp(8);
                self.set(Reg::Rbp, v);
            }
        }
        None
    }
}

/// Abstract interpretation of a gadget into its transfer function and tags.
pub fn summarize(g: &Gadget) -> GadgetEffect {
    let mut st = SymState::new();
    let mut ret_target = None;
    for ins in &g.instrs {
        if let Some(t) = st.exec(&ins.op) {
            ret_target = Some(t);
        }
    }
    let stack_delta = if st.pivoted { None } else { st.regs[Reg::Rsp.index()].stack_offset() };
    let clobbers = Reg::ALL
        .iter()
        .copied()
        .filter(|&r| st.regs[r.index()] != InitReg(r))
        .collect();
    let mut effect = GadgetEffect {
        terminator: g.terminator,
        out: st.regs,
        stack_delta,
        writes: st.writes,
        clobbers,
        tags: BTreeSet::new(),
        ret_target,
        analysis_failed: st.failed,
    };
    effect.tags = classify(&effect);
    effect
}

fn reg_plus_disp(e: &SymExpr) -> Option<(Reg, i64)> {
    match e.base_and_disp() {
        (Some(InitReg(r)), d) => Some((*r, d)),
        _ => None,
    }
}

fn binop_regs(a: &SymExpr, b: &SymExpr) -> Option<(Reg, Reg)> {
    match (a, b) {
        (InitReg(x), InitReg(y)) => Some((*x, *y)),
        _ => None,
    }
}

/// Capability tags implied by a summarized effect.
pub fn classify(effect: &GadgetEffect) -> BTreeSet<Tag> {
    let mut tags = BTreeSet::new();
    let pivot = effect.stack_delta.is_none();

    for r in Reg::ALL {
        if r == Reg::Rsp {
            continue;
        }
        match effect.out(r) {
            StackSlot(k) if !pivot => {
                tags.insert(Tag::LoadConst { reg: r, slot: *k });
            }
            InitReg(s) if *s != r => {
                tags.insert(Tag::MoveReg { dst: r, src: *s });
            }
            Const(0) => {
                tags.insert(Tag::ZeroReg(r));
            }
            MemAt(addr) => {
                if let Some((base, disp)) = reg_plus_disp(addr) {
                    tags.insert(Tag::LoadMem { dst: r, base, disp });
                }
            }
            e => {
                let arith = match e {
                    Add(a, b) => binop_regs(a, b).map(|p| (ArithKind::Add, p)),
                    Sub(a, b) => binop_regs(a, b).map(|p| (ArithKind::Sub, p)),
                    Xor(a, b) => binop_regs(a, b).map(|p| (ArithKind::Xor, p)),
                    _ => None,
                };
                if let Some((kind, (d, src))) = arith {
                    if d == r {
                        tags.insert(Tag::Arith { kind, dst: r, src });
                    }
                }
            }
        }
    }

    for w in effect.non_stack_writes() {
        if let (Some((base, disp)), InitReg(src)) = (reg_plus_disp(&w.addr), &w.value) {
            tags.insert(Tag::StoreMem { base, src: *src, disp });
        }
    }

    match effect.terminator {
        Terminator::Syscall => {
            tags.insert(Tag::SyscallTrigger);
        }
        Terminator::Ret | Terminator::RetImm(_) => {
            if !pivot {
                let delta = effect.stack_delta.unwrap_or(0);
                let ret_from_payload = matches!(effect.ret_target, Some(StackSlot(_)));
                if delta < 8 || !ret_from_payload {
                    tags.insert(Tag::Unusable);
                }
            }
        }
    }
    if pivot {
        tags.insert(Tag::StackPivot);
    }
    if effect.analysis_failed {
        tags.insert(Tag::Unusable);
    }
    tags
}
