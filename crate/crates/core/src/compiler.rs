//! Syscall chain synthesis over a summarized gadget catalog.
//!
//! A chain is built in three phases: pointer arguments are staged into
//! writable memory one 8-byte word at a time through a write-what-where
//! gadget, the syscall number and argument registers are loaded in an order
//! where no later plan clobbers an already-finalized register, and a syscall
//! gadget ends the chain.
//!
//! Each register load is planned by [`immediate_plans`]:
//!
//! 1. direct `LoadConst(reg)` when the value's bytes are all allowed;
//! 2. `LoadConst(donor)` followed by `MoveReg(reg, donor)`;
//! 3. xor split: `reg = m`, `donor = value ^ m`, `xor reg, donor`;
//! 4. `ZeroReg(reg)`, then `add reg, donor` with `donor = value`.
//!
//! Every candidate list is capped at [`RETRY_BUDGET`] alternatives.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::elf::Elf64Image;
use crate::goal::{Arg, GoalError, SyscallGoal, SYSCALL_NUMBER_REG};
use crate::payload::{check_bad_bytes, layout, BadBytes, Role, Violation};
use crate::scanner::{find_gadgets, Gadget, ScanConfig, Terminator};
use crate::semantics::{summarize, ArithKind, GadgetEffect, SymExpr, Tag};
use crate::x86::Reg;

/// Alternatives tried per planning slot.
pub const RETRY_BUDGET: usize = 32;
pub const DEFAULT_MAX_CHAIN_WORDS: usize = 256;
/// Offset of the default staging area from the first writable segment.
pub const STAGING_OFFSET: u64 = 0x100;
pub const FILLER_WORD: u64 = 0x4141_4141_4141_4141;
const MASK_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("NoSyscallGadget: no usable syscall gadget in the catalog")]
    NoSyscallGadget,
    #[error("RegisterUnreachable: no gadget can load {0}")]
    RegisterUnreachable(Reg),
    #[error("ImmediateUnencodable: cannot load {value:#x} into {reg} without bad bytes")]
    ImmediateUnencodable { reg: Reg, value: u64 },
    #[error("CyclicClobber: no register order avoids clobbering, conflict set {conflict:?}")]
    CyclicClobber { conflict: Vec<Reg> },
    #[error("ChainTooLong: chain needs {words} words, limit is {max}")]
    ChainTooLong { words: usize, max: usize },
    #[error("NoWritePrimitive: no usable write-what-where gadget for staging data")]
    NoWritePrimitive,
    #[error("NoWritableRegion: no writable segment can hold {bytes} staged bytes")]
    NoWritableRegion { bytes: u64 },
    #[error("AddressOverflow: gadget address plus base offset wraps")]
    AddressOverflow,
    #[error("BadBytesInPayload: rendered payload still contains forbidden bytes {0:?}")]
    BadBytesInPayload(Vec<Violation>),
    #[error("InvalidGoal: {0}")]
    InvalidGoal(#[from] GoalError),
}

impl CompileError {
    /// Stable token naming the failure, e.g. `NoSyscallGadget`.
    pub fn name(&self) -> &'static str {
        match self {
            CompileError::NoSyscallGadget => "NoSyscallGadget",
            CompileError::RegisterUnreachable(_) => "RegisterUnreachable",
            CompileError::ImmediateUnencodable { .. } => "ImmediateUnencodable",
            CompileError::CyclicClobber { .. } => "CyclicClobber",
            CompileError::ChainTooLong { .. } => "ChainTooLong",
            CompileError::NoWritePrimitive => "NoWritePrimitive",
            CompileError::NoWritableRegion { .. } => "NoWritableRegion",
            CompileError::AddressOverflow => "AddressOverflow",
            CompileError::BadBytesInPayload(_) => "BadBytesInPayload",
            CompileError::InvalidGoal(_) => "InvalidGoal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraints {
    pub bad_bytes: BadBytes,
    /// Absolute staging address; defaults to the first writable segment
    /// (rebased) plus [`STAGING_OFFSET`].
    pub data_vaddr: Option<u64>,
    pub max_chain_words: usize,
    /// Load base the payload will be rendered with. Needed here because
    /// rebased gadget addresses and staged pointers must avoid bad bytes.
    pub base_offset: u64,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            bad_bytes: BadBytes::none(),
            data_vaddr: None,
            max_chain_words: DEFAULT_MAX_CHAIN_WORDS,
            base_offset: 0,
        }
    }
}

impl Constraints {
    /// Filler for padding words: repeated `0x41`, or the next allowed byte.
    pub fn filler(&self) -> u64 {
        let byte = (0x41..=0xffu8)
            .chain(0x00..0x41)
            .find(|&b| !self.bad_bytes.contains(b))
            .expect("at least one byte value is allowed");
        u64::from_le_bytes([byte; 8])
    }
}

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub gadget: Gadget,
    pub effect: GadgetEffect,
}

impl CatalogEntry {
    pub fn new(gadget: Gadget) -> Self {
        let effect = summarize(&gadget);
        CatalogEntry { gadget, effect }
    }

    fn clobbers(&self) -> BTreeSet<Reg> {
        self.effect.clobbers.iter().copied().filter(|&r| r != Reg::Rsp).collect()
    }

    /// Stack words the gadget consumes before its return address.
    fn body_words(&self) -> Option<usize> {
        let delta = self.effect.stack_delta?;
        let body = delta - 8 - self.effect.ret_imm() as i64;
        (body >= 0 && body % 8 == 0).then_some(body as usize / 8)
    }

    fn pref_key(&self) -> (bool, usize, usize, u64) {
        (
            matches!(self.gadget.terminator, Terminator::RetImm(_)),
            self.gadget.instrs.len(),
            self.effect.clobbers.len(),
            self.gadget.vaddr,
        )
    }
}

/// Summarized gadgets plus the image's writable regions.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
    pub writable: Vec<(u64, u64)>,
}

impl Catalog {
    pub fn from_gadgets(gadgets: Vec<Gadget>, writable: Vec<(u64, u64)>) -> Self {
        let entries = gadgets.into_par_iter().map(CatalogEntry::new).collect();
        Catalog { entries, writable }
    }

    pub fn from_image(image: &Elf64Image, cfg: &ScanConfig) -> Self {
        Self::from_gadgets(find_gadgets(image, cfg), image.writable_regions())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainStep {
    pub gadget: Gadget,
    /// Words following the gadget address, `stack_delta - 8` bytes in all.
    pub stack_words: Vec<u64>,
    /// Role of each stack word.
    pub annotations: Vec<Role>,
}

impl ChainStep {
    /// Trailing stack words that belong to a `ret imm16` displacement.
    pub fn ret_padding_words(&self) -> usize {
        match self.gadget.terminator {
            Terminator::RetImm(n) => n as usize / 8,
            _ => 0,
        }
    }

    pub fn word_count(&self) -> usize {
        1 + self.stack_words.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    /// Ordered steps; the last one is the syscall trigger.
    pub steps: Vec<ChainStep>,
    /// Argument index to runtime address of its staged data.
    pub staged: BTreeMap<usize, u64>,
}

impl Chain {
    pub fn final_step(&self) -> Option<&ChainStep> {
        self.steps.last()
    }

    pub fn word_count(&self) -> usize {
        self.steps.iter().map(ChainStep::word_count).sum()
    }
}

/// Steps that leave `target` holding a value, and the registers they clobber
/// (`rsp` excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub target: Reg,
    pub steps: Vec<ChainStep>,
    pub clobbers: BTreeSet<Reg>,
}

impl Plan {
    fn from_parts(target: Reg, parts: Vec<(Vec<ChainStep>, BTreeSet<Reg>)>) -> Plan {
        let mut steps = Vec::new();
        let mut clobbers = BTreeSet::new();
        for (s, c) in parts {
            steps.extend(s);
            clobbers.extend(c);
        }
        Plan { target, steps, clobbers }
    }
}

struct Planner<'a> {
    catalog: &'a Catalog,
    constraints: &'a Constraints,
    filler: u64,
}

impl<'a> Planner<'a> {
    fn new(catalog: &'a Catalog, constraints: &'a Constraints) -> Self {
        Planner { catalog, constraints, filler: constraints.filler() }
    }

    fn word_ok(&self, w: u64) -> bool {
        self.constraints.bad_bytes.word_ok(w)
    }

    fn address_ok(&self, e: &CatalogEntry) -> bool {
        e.gadget
            .vaddr
            .checked_add(self.constraints.base_offset)
            .is_some_and(|a| self.word_ok(a))
    }

    /// Ret-terminated, constant-stack, reads only its own payload words and
    /// returns into the next payload word.
    fn clean_ret(&self, e: &CatalogEntry) -> bool {
        if e.effect.is_pivot() || e.effect.is_unusable() || e.effect.reads_memory() {
            return false;
        }
        if e.gadget.terminator == Terminator::Syscall || !e.effect.ret_imm().is_multiple_of(8) {
            return false;
        }
        let Some(body) = e.body_words() else { return false };
        let body_bytes = 8 * body as i64;
        if e.effect.ret_target != Some(SymExpr::StackSlot(body_bytes)) {
            return false;
        }
        if !e.effect.stack_reads().iter().all(|&k| (0..body_bytes).contains(&k)) {
            return false;
        }
        self.address_ok(e)
    }

    /// Clean and writes nothing outside the stack.
    fn pure_ret(&self, e: &CatalogEntry) -> bool {
        self.clean_ret(e) && e.effect.non_stack_writes().next().is_none()
    }

    fn candidates(&self, pred: impl Fn(&CatalogEntry) -> bool) -> Vec<&'a CatalogEntry> {
        let mut v: Vec<&CatalogEntry> = self.catalog.entries.iter().filter(|e| pred(e)).collect();
        v.sort_by_key(|e| e.pref_key());
        v.truncate(RETRY_BUDGET);
        v
    }

    fn step(&self, e: &CatalogEntry, slots: &[(i64, u64, Role)]) -> (Vec<ChainStep>, BTreeSet<Reg>) {
        let body = e.body_words().expect("clean gadget");
        let pad = e.effect.ret_imm() as usize / 8;
        let mut words = vec![self.filler; body + pad];
        let mut roles = vec![Role::Padding; body + pad];
        for &(slot, value, role) in slots {
            let i = (slot / 8) as usize;
            words[i] = value;
            roles[i] = role;
        }
        let step = ChainStep { gadget: e.gadget.clone(), stack_words: words, annotations: roles };
        (vec![step], e.clobbers())
    }

    fn load_const_slot(e: &CatalogEntry, reg: Reg) -> Option<i64> {
        e.effect.tags.iter().find_map(|t| match *t {
            Tag::LoadConst { reg: r, slot } if r == reg => Some(slot),
            _ => None,
        })
    }

    fn direct_loaders(&self, reg: Reg) -> Vec<&'a CatalogEntry> {
        self.candidates(|e| Self::load_const_slot(e, reg).is_some() && self.pure_ret(e))
    }

    fn direct_plans(&self, reg: Reg, value: u64) -> Vec<Plan> {
        self.direct_loaders(reg)
            .into_iter()
            .map(|e| {
                let slot = Self::load_const_slot(e, reg).unwrap();
                Plan::from_parts(reg, vec![self.step(e, &[(slot, value, Role::Immediate(reg))])])
            })
            .collect()
    }

    fn movers(&self, dst: Reg) -> Vec<(&'a CatalogEntry, Reg)> {
        let mut out = Vec::new();
        for e in self.candidates(|e| {
            e.effect.tags.iter().any(|t| matches!(*t, Tag::MoveReg { dst: d, src } if d == dst && src != Reg::Rsp))
                && self.pure_ret(e)
        }) {
            let src = e
                .effect
                .tags
                .iter()
                .find_map(|t| match *t {
                    Tag::MoveReg { dst: d, src } if d == dst && src != Reg::Rsp => Some(src),
                    _ => None,
                })
                .unwrap();
            out.push((e, src));
        }
        out
    }

    fn hop_plans(&self, reg: Reg, value: u64) -> Vec<Plan> {
        let mut plans = Vec::new();
        for (mover, donor) in self.movers(reg) {
            for set in self.direct_plans(donor, value) {
                plans.push(Plan::from_parts(
                    reg,
                    vec![(set.steps, set.clobbers), self.step(mover, &[])],
                ));
                if plans.len() >= RETRY_BUDGET {
                    return plans;
                }
            }
        }
        plans
    }

    /// Direct or one-hop loads of a word whose bytes are already allowed.
    fn setters(&self, reg: Reg, value: u64) -> Vec<Plan> {
        let mut v = self.direct_plans(reg, value);
        v.extend(self.hop_plans(reg, value));
        v.truncate(RETRY_BUDGET);
        v
    }

    fn arith_gadgets(&self, kind: ArithKind, dst: Reg) -> Vec<(&'a CatalogEntry, Reg)> {
        let find = |e: &CatalogEntry| {
            e.effect.tags.iter().find_map(|t| match *t {
                Tag::Arith { kind: k, dst: d, src } if k == kind && d == dst && src != dst && src != Reg::Rsp => {
                    Some(src)
                }
                _ => None,
            })
        };
        self.candidates(|e| find(e).is_some() && self.pure_ret(e))
            .into_iter()
            .map(|e| (e, find(e).unwrap()))
            .collect()
    }

    /// `first` then `second`, where `second` must not clobber `first.target`,
    /// or the reverse. First workable pair wins.
    fn pair(&self, a: &[Plan], b: &[Plan]) -> Option<(Vec<ChainStep>, BTreeSet<Reg>)> {
        for pa in a {
            for pb in b {
                if !pb.clobbers.contains(&pa.target) {
                    return Some(merge(&[pa, pb]));
                }
                if !pa.clobbers.contains(&pb.target) {
                    return Some(merge(&[pb, pa]));
                }
            }
        }
        None
    }

    fn xor_mask(&self, value: u64) -> Option<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(value ^ 0x005e_ed0f_a5c0_ffee);
        for _ in 0..MASK_SAMPLES {
            let m: u64 = rng.random();
            if self.word_ok(m) && self.word_ok(m ^ value) {
                return Some(m);
            }
        }
        let bad = &self.constraints.bad_bytes;
        let mut mask = [0u8; 8];
        for (i, v) in value.to_le_bytes().into_iter().enumerate() {
            mask[i] = (0..=255u8).find(|&b| !bad.contains(b) && !bad.contains(b ^ v))?;
        }
        Some(u64::from_le_bytes(mask))
    }

    fn xor_split_plans(&self, reg: Reg, value: u64) -> Vec<Plan> {
        let gadgets = self.arith_gadgets(ArithKind::Xor, reg);
        if gadgets.is_empty() {
            return Vec::new();
        }
        let Some(mask) = self.xor_mask(value) else { return Vec::new() };
        let mut plans = Vec::new();
        for (xor, donor) in gadgets {
            let a = self.setters(reg, mask);
            let b = self.setters(donor, value ^ mask);
            if let Some(first) = self.pair(&a, &b) {
                plans.push(Plan::from_parts(reg, vec![first, self.step(xor, &[])]));
            }
        }
        plans
    }

    fn zero_plans(&self, reg: Reg) -> Vec<Plan> {
        self.candidates(|e| e.effect.has(&Tag::ZeroReg(reg)) && self.pure_ret(e))
            .into_iter()
            .map(|e| Plan::from_parts(reg, vec![self.step(e, &[])]))
            .collect()
    }

    fn zero_add_plans(&self, reg: Reg, value: u64) -> Vec<Plan> {
        let zeros = self.zero_plans(reg);
        if value == 0 || zeros.is_empty() {
            return zeros;
        }
        if !self.word_ok(value) {
            return Vec::new();
        }
        let mut plans = Vec::new();
        for (add, donor) in self.arith_gadgets(ArithKind::Add, reg) {
            let b = self.setters(donor, value);
            if let Some(first) = self.pair(&zeros, &b) {
                plans.push(Plan::from_parts(reg, vec![first, self.step(add, &[])]));
            }
        }
        plans
    }

    /// Alternatives for loading `value` into `reg`, best first.
    fn immediate_plans(&self, reg: Reg, value: u64) -> Result<Vec<Plan>, CompileError> {
        let mut plans = Vec::new();
        if self.word_ok(value) {
            plans.extend(self.direct_plans(reg, value));
            plans.extend(self.hop_plans(reg, value));
        }
        if plans.len() < RETRY_BUDGET {
            plans.extend(self.xor_split_plans(reg, value));
        }
        if plans.len() < RETRY_BUDGET {
            plans.extend(self.zero_add_plans(reg, value));
        }
        plans.truncate(RETRY_BUDGET);
        if !plans.is_empty() {
            return Ok(plans);
        }
        // distinguish "no gadget touches reg" from "bytes got in the way"
        let relaxed = Constraints { bad_bytes: BadBytes::none(), base_offset: 0, ..self.constraints.clone() };
        let p = Planner::new(self.catalog, &relaxed);
        let reachable =
            !p.direct_loaders(reg).is_empty() || !p.movers(reg).is_empty() || !p.zero_plans(reg).is_empty();
        if reachable {
            Err(CompileError::ImmediateUnencodable { reg, value })
        } else {
            Err(CompileError::RegisterUnreachable(reg))
        }
    }

    fn store_primitives(&self) -> Vec<(&'a CatalogEntry, Reg, Reg, i64)> {
        let find = |e: &CatalogEntry| {
            e.effect.tags.iter().find_map(|t| match *t {
                Tag::StoreMem { base, src, disp } if base != src && base != Reg::Rsp && src != Reg::Rsp => {
                    Some((base, src, disp))
                }
                _ => None,
            })
        };
        self.candidates(|e| {
            find(e).is_some() && self.clean_ret(e) && e.effect.non_stack_writes().count() == 1
        })
        .into_iter()
        .map(|e| {
            let (b, s, d) = find(e).unwrap();
            (e, b, s, d)
        })
        .collect()
    }

    fn syscall_gadget(&self, keep: &BTreeSet<Reg>) -> Option<&'a CatalogEntry> {
        self.catalog
            .entries
            .iter()
            .filter(|e| {
                e.effect.has(&Tag::SyscallTrigger)
                    && self.address_ok(e)
                    && !e.effect.reads_memory()
                    && e.effect.writes.is_empty()
                    && e.effect.stack_reads().is_empty()
                    && e.clobbers().is_disjoint(keep)
            })
            .min_by_key(|e| (e.gadget.instrs.len(), e.gadget.vaddr))
    }
}

fn merge(plans: &[&Plan]) -> (Vec<ChainStep>, BTreeSet<Reg>) {
    let mut steps = Vec::new();
    let mut clobbers = BTreeSet::new();
    for p in plans {
        steps.extend(p.steps.iter().cloned());
        clobbers.extend(p.clobbers.iter().copied());
    }
    (steps, clobbers)
}

/// Steps leaving `reg == value`, trying the strategies in order.
pub fn encode_immediate(
    value: u64,
    reg: Reg,
    catalog: &Catalog,
    constraints: &Constraints,
) -> Result<Vec<ChainStep>, CompileError> {
    let planner = Planner::new(catalog, constraints);
    let mut plans = planner.immediate_plans(reg, value)?;
    Ok(plans.swap_remove(0).steps)
}

/// All alternatives for loading `value` into `reg`, best first.
pub fn immediate_plans(
    value: u64,
    reg: Reg,
    catalog: &Catalog,
    constraints: &Constraints,
) -> Result<Vec<Plan>, CompileError> {
    Planner::new(catalog, constraints).immediate_plans(reg, value)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Order register plans so no plan clobbers a register finalized before it.
///
/// Orders are tried lexicographically by register index; within an order,
/// each register takes its first alternative that spares every earlier
/// target. The first order that works is returned.
pub fn order_assignments(needed: &BTreeMap<Reg, Vec<Plan>>) -> Result<Vec<Plan>, CompileError> {
    let regs: Vec<Reg> = needed.keys().copied().collect();
    let mut perm: Vec<usize> = (0..regs.len()).collect();
    loop {
        let mut finalized = BTreeSet::new();
        let mut chosen = Vec::with_capacity(regs.len());
        for &i in &perm {
            let reg = regs[i];
            let pick = needed[&reg].iter().find(|p| p.clobbers.is_disjoint(&finalized));
            match pick {
                Some(p) => {
                    chosen.push(p.clone());
                    finalized.insert(reg);
                }
                None => break,
            }
        }
        if chosen.len() == regs.len() {
            return Ok(chosen);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let targets: BTreeSet<Reg> = regs.iter().copied().collect();
    let mut conflict: Vec<Reg> = regs
        .iter()
        .copied()
        .filter(|r| {
            needed[r]
                .iter()
                .all(|p| p.clobbers.iter().any(|c| c != r && targets.contains(c)))
        })
        .collect();
    if conflict.is_empty() {
        conflict = regs;
    }
    Err(CompileError::CyclicClobber { conflict })
}

/// Where each data argument will be staged (runtime addresses).
pub fn staging_layout(
    goal: &SyscallGoal,
    writable: &[(u64, u64)],
    constraints: &Constraints,
) -> Result<BTreeMap<usize, u64>, CompileError> {
    let sizes: Vec<(usize, u64)> = goal
        .args
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a {
            Arg::DataPointer(d) => Some((i, (d.len() as u64).div_ceil(8) * 8)),
            Arg::Immediate(_) => None,
        })
        .collect();
    if sizes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let total: u64 = sizes.iter().map(|&(_, n)| n).sum();
    let start = match constraints.data_vaddr {
        Some(addr) => addr,
        None => {
            let mut regions = writable.to_vec();
            regions.sort();
            let (vaddr, _) = regions
                .into_iter()
                .find(|&(_, size)| size >= STAGING_OFFSET + total)
                .ok_or(CompileError::NoWritableRegion { bytes: total })?;
            vaddr
                .checked_add(STAGING_OFFSET + constraints.base_offset)
                .ok_or(CompileError::AddressOverflow)?
        }
    };
    let mut out = BTreeMap::new();
    let mut cursor = start;
    for (i, n) in sizes {
        out.insert(i, cursor);
        cursor = cursor.wrapping_add(n);
    }
    Ok(out)
}

/// Steps writing every data argument into the staging area, one word each.
pub fn plan_data_writes(
    goal: &SyscallGoal,
    catalog: &Catalog,
    constraints: &Constraints,
) -> Result<(BTreeMap<usize, u64>, Vec<ChainStep>), CompileError> {
    let staged = staging_layout(goal, &catalog.writable, constraints)?;
    if staged.is_empty() {
        return Ok((staged, Vec::new()));
    }
    let planner = Planner::new(catalog, constraints);
    let stores = planner.store_primitives();
    if stores.is_empty() {
        return Err(CompileError::NoWritePrimitive);
    }

    let mut steps = Vec::new();
    for (&i, &addr) in &staged {
        let Arg::DataPointer(data) = &goal.args[i] else { unreachable!() };
        for (k, chunk) in data.chunks(8).enumerate() {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            let word = u64::from_le_bytes(word);
            let at = addr.wrapping_add(8 * k as u64);
            steps.extend(plan_store(&planner, &stores, at, word)?);
        }
    }
    Ok((staged, steps))
}

fn plan_store(
    planner: &Planner<'_>,
    stores: &[(&CatalogEntry, Reg, Reg, i64)],
    at: u64,
    word: u64,
) -> Result<Vec<ChainStep>, CompileError> {
    let mut first_err = None;
    for &(store, base, src, disp) in stores {
        let addr_plans = planner.immediate_plans(base, at.wrapping_sub(disp as u64));
        let value_plans = planner.immediate_plans(src, word);
        match (addr_plans, value_plans) {
            (Ok(a), Ok(v)) => {
                if let Some((mut steps, _)) = planner.pair(&a, &v) {
                    steps.extend(planner.step(store, &[]).0);
                    return Ok(steps);
                }
                first_err.get_or_insert(CompileError::CyclicClobber { conflict: vec![base, src] });
            }
            (Err(e), _) | (_, Err(e)) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(CompileError::NoWritePrimitive))
}

/// Compile a goal into a chain ending in a syscall gadget.
pub fn compile_chain(
    goal: &SyscallGoal,
    catalog: &Catalog,
    constraints: &Constraints,
) -> Result<Chain, CompileError> {
    goal.validate()?;
    let planner = Planner::new(catalog, constraints);

    let mut targets: BTreeMap<Reg, u64> = BTreeMap::new();
    targets.insert(SYSCALL_NUMBER_REG, goal.number);
    let keep: BTreeSet<Reg> = std::iter::once(SYSCALL_NUMBER_REG)
        .chain(goal.arg_regs().map(|(r, _)| r))
        .collect();

    if !catalog.entries.iter().any(|e| e.effect.has(&Tag::SyscallTrigger)) {
        return Err(CompileError::NoSyscallGadget);
    }

    // register plans first: an unencodable value is the more useful error
    // than a missing write gadget
    let staged = staging_layout(goal, &catalog.writable, constraints)?;
    for (i, (reg, arg)) in goal.arg_regs().enumerate() {
        let value = match arg {
            Arg::Immediate(v) => *v,
            Arg::DataPointer(_) => staged[&i],
        };
        targets.insert(reg, value);
    }
    let mut needed = BTreeMap::new();
    for (&reg, &value) in &targets {
        needed.insert(reg, planner.immediate_plans(reg, value)?);
    }
    let ordered = order_assignments(&needed)?;

    let (staged, mut steps) = plan_data_writes(goal, catalog, constraints)?;
    for plan in ordered {
        steps.extend(plan.steps);
    }
    let syscall = planner.syscall_gadget(&keep).ok_or(CompileError::NoSyscallGadget)?;
    steps.push(ChainStep {
        gadget: syscall.gadget.clone(),
        stack_words: Vec::new(),
        annotations: Vec::new(),
    });

    let chain = Chain { steps, staged };
    let words = chain.word_count();
    if words > constraints.max_chain_words {
        return Err(CompileError::ChainTooLong { words, max: constraints.max_chain_words });
    }
    let payload = layout(&chain, constraints.base_offset).map_err(|_| CompileError::AddressOverflow)?;
    check_bad_bytes(&payload, &constraints.bad_bytes).map_err(CompileError::BadBytesInPayload)?;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::x86::{assemble, decode_run, Op, Width};

    fn catalog(gadgets: &[&[Op]]) -> Catalog {
        catalog_at(0x401000, gadgets)
    }

    fn catalog_at(mut addr: u64, gadgets: &[&[Op]]) -> Catalog {
        let mut gs = Vec::new();
        for ops in gadgets {
            let bytes = assemble(ops);
            gs.push(Gadget::from_instrs(decode_run(&bytes, addr).unwrap()).unwrap());
            addr += 0x10;
        }
        Catalog::from_gadgets(gs, vec![(0x404000, 0x1000)])
    }

    fn pop(r: Reg) -> Vec<Op> {
        vec![Op::PopReg(r), Op::Ret]
    }

    fn ops_of(steps: &[ChainStep]) -> Vec<String> {
        steps.iter().map(|s| s.gadget.text()).collect()
    }

    const NUL_FREE_BASE: u64 = 0x0101_0101_0100_0000;

    #[test]
    fn bad_gadget_addresses_are_skipped() {
        let cat = catalog(&[&pop(Reg::Rax), &pop(Reg::Rax)]);
        // 0x401000 + base ends in a zero byte, 0x401010 does not
        let c = Constraints { bad_bytes: BadBytes::new([0]), base_offset: NUL_FREE_BASE, ..Constraints::default() };
        let steps = encode_immediate(FILLER_WORD, Reg::Rax, &cat, &c);
        assert_eq!(steps.map(|s| s[0].gadget.vaddr), Ok(0x401010));
    }

    fn plan(target: Reg, clobbers: &[Reg]) -> Plan {
        Plan { target, steps: vec![], clobbers: clobbers.iter().copied().collect() }
    }

    #[test]
    fn zero_via_zeroreg_gadget() {
        let cat = catalog(&[&[Op::XorRegReg { dst: Reg::Rax, src: Reg::Rax, width: Width::W64 }, Op::Ret]]);
        let steps = encode_immediate(0, Reg::Rax, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&steps), vec!["xor rax, rax; ret"]);
    }

    #[test]
    fn zero_prefers_direct_load_when_legal() {
        let cat = catalog(&[
            &[Op::XorRegReg { dst: Reg::Rax, src: Reg::Rax, width: Width::W64 }, Op::Ret],
            &pop(Reg::Rax),
        ]);
        let steps = encode_immediate(0, Reg::Rax, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&steps), vec!["pop rax; ret"]);
        assert_eq!(steps[0].stack_words, vec![0]);
    }

    #[test]
    fn unconstrained_direct_load() {
        let cat = catalog(&[&pop(Reg::Rax)]);
        let steps = encode_immediate(59, Reg::Rax, &cat, &Constraints::default()).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].stack_words, vec![0x3b]);
        assert_eq!(steps[0].annotations, vec![Role::Immediate(Reg::Rax)]);
    }

    #[test]
    fn xor_split_avoids_nul() {
        let cat = catalog_at(0x401010, &[
            &pop(Reg::Rax),
            &pop(Reg::Rbx),
            &[Op::XorRegReg { dst: Reg::Rax, src: Reg::Rbx, width: Width::W64 }, Op::Ret],
        ]);
        let c = Constraints { bad_bytes: BadBytes::new([0]), base_offset: NUL_FREE_BASE, ..Constraints::default() };
        let steps = encode_immediate(59, Reg::Rax, &cat, &c).unwrap();
        assert_eq!(ops_of(&steps), vec!["pop rax; ret", "pop rbx; ret", "xor rax, rbx; ret"]);
        let m = steps[0].stack_words[0];
        let d = steps[1].stack_words[0];
        assert_eq!(m ^ d, 59);
        assert!(c.bad_bytes.word_ok(m) && c.bad_bytes.word_ok(d));
    }

    #[test]
    fn unencodable_vs_unreachable() {
        let cat = catalog_at(0x401010, &[&pop(Reg::Rax)]);
        let c = Constraints { bad_bytes: BadBytes::new([0]), base_offset: NUL_FREE_BASE, ..Constraints::default() };
        assert_eq!(
            encode_immediate(59, Reg::Rax, &cat, &c),
            Err(CompileError::ImmediateUnencodable { reg: Reg::Rax, value: 59 })
        );
        assert_eq!(
            encode_immediate(59, Reg::Rdi, &cat, &c),
            Err(CompileError::RegisterUnreachable(Reg::Rdi))
        );
    }

    #[test]
    fn hop_through_move() {
        let cat = catalog(&[
            &pop(Reg::Rbx),
            &[Op::MovRegReg { dst: Reg::Rdx, src: Reg::Rbx, width: Width::W64 }, Op::Ret],
        ]);
        let steps = encode_immediate(7, Reg::Rdx, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&steps), vec!["pop rbx; ret", "mov rdx, rbx; ret"]);
    }

    #[test]
    fn zero_then_add() {
        let cat = catalog(&[
            &[Op::XorRegReg { dst: Reg::Rax, src: Reg::Rax, width: Width::W64 }, Op::Ret],
            &pop(Reg::Rcx),
            &[Op::AddRegReg { dst: Reg::Rax, src: Reg::Rcx }, Op::Ret],
        ]);
        let steps = encode_immediate(0x1234, Reg::Rax, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&steps), vec!["xor rax, rax; ret", "pop rcx; ret", "add rax, rcx; ret"]);
    }

    #[test]
    fn filler_avoids_bad_bytes() {
        assert_eq!(Constraints::default().filler(), FILLER_WORD);
        let c = Constraints { bad_bytes: BadBytes::new([0x41]), ..Constraints::default() };
        assert_eq!(c.filler(), 0x4242_4242_4242_4242);
    }

    #[test]
    fn ordering_disjoint() {
        let needed = BTreeMap::from([
            (Reg::Rax, vec![plan(Reg::Rax, &[Reg::Rax])]),
            (Reg::Rdi, vec![plan(Reg::Rdi, &[Reg::Rdi])]),
        ]);
        let order: Vec<Reg> = order_assignments(&needed).unwrap().iter().map(|p| p.target).collect();
        assert_eq!(order, vec![Reg::Rax, Reg::Rdi]);
    }

    #[test]
    fn ordering_forced() {
        let needed = BTreeMap::from([
            (Reg::Rax, vec![plan(Reg::Rax, &[Reg::Rax])]),
            (Reg::Rdi, vec![plan(Reg::Rdi, &[Reg::Rdi, Reg::Rax])]),
        ]);
        let order: Vec<Reg> = order_assignments(&needed).unwrap().iter().map(|p| p.target).collect();
        assert_eq!(order, vec![Reg::Rdi, Reg::Rax]);
    }

    #[test]
    fn ordering_cycle() {
        let needed = BTreeMap::from([
            (Reg::Rax, vec![plan(Reg::Rax, &[Reg::Rax, Reg::Rdi])]),
            (Reg::Rdi, vec![plan(Reg::Rdi, &[Reg::Rdi, Reg::Rax])]),
        ]);
        assert_eq!(
            order_assignments(&needed),
            Err(CompileError::CyclicClobber { conflict: vec![Reg::Rax, Reg::Rdi] })
        );
    }

    #[test]
    fn ordering_uses_alternatives() {
        let needed = BTreeMap::from([
            (Reg::Rax, vec![plan(Reg::Rax, &[Reg::Rax, Reg::Rdi])]),
            (
                Reg::Rdi,
                vec![plan(Reg::Rdi, &[Reg::Rdi, Reg::Rax]), plan(Reg::Rdi, &[Reg::Rdi])],
            ),
        ]);
        let order = order_assignments(&needed).unwrap();
        assert_eq!(order[0].target, Reg::Rax);
        assert_eq!(order[1].clobbers, BTreeSet::from([Reg::Rdi]));
    }

    #[test]
    fn permutations_are_lexicographic() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[1], vec![0, 2, 1]);
        assert_eq!(seen[5], vec![2, 1, 0]);
    }

    fn write_catalog() -> Catalog {
        catalog(&[
            &pop(Reg::Rdi),
            &pop(Reg::Rsi),
            &[Op::MovStore { base: Reg::Rdi, disp: 0, src: Reg::Rsi }, Op::Ret],
            &pop(Reg::Rax),
            &[Op::Syscall],
        ])
    }

    #[test]
    fn stage_one_word() {
        let goal = SyscallGoal::new(59, vec![Arg::DataPointer(b"/bin/sh\0".to_vec())]).unwrap();
        let (staged, steps) = plan_data_writes(&goal, &write_catalog(), &Constraints::default()).unwrap();
        assert_eq!(staged, BTreeMap::from([(0, 0x404100)]));
        assert_eq!(ops_of(&steps), vec!["pop rdi; ret", "pop rsi; ret", "mov [rdi], rsi; ret"]);
        assert_eq!(steps[0].stack_words, vec![0x404100]);
        assert_eq!(steps[1].stack_words, vec![u64::from_le_bytes(*b"/bin/sh\0")]);
    }

    #[test]
    fn immediates_stage_nothing() {
        let goal = SyscallGoal::new(60, vec![Arg::Immediate(0)]).unwrap();
        let (staged, steps) = plan_data_writes(&goal, &write_catalog(), &Constraints::default()).unwrap();
        assert!(staged.is_empty() && steps.is_empty());
    }

    #[test]
    fn staging_errors() {
        let goal = SyscallGoal::new(59, vec![Arg::DataPointer(b"x".to_vec())]).unwrap();
        let cat = catalog(&[&pop(Reg::Rdi), &[Op::Syscall]]);
        assert_eq!(
            plan_data_writes(&goal, &cat, &Constraints::default()).unwrap_err(),
            CompileError::NoWritePrimitive
        );
        let mut cat = write_catalog();
        cat.writable.clear();
        assert_eq!(
            plan_data_writes(&goal, &cat, &Constraints::default()).unwrap_err(),
            CompileError::NoWritableRegion { bytes: 8 }
        );
        let c = Constraints { data_vaddr: Some(0x500000), ..Constraints::default() };
        let (staged, _) = plan_data_writes(&goal, &cat, &c).unwrap();
        assert_eq!(staged[&0], 0x500000);
    }

    #[test]
    fn staging_layout_packs_words() {
        let goal = SyscallGoal::new(
            1,
            vec![Arg::DataPointer(vec![1; 9]), Arg::Immediate(3), Arg::DataPointer(vec![2; 8])],
        )
        .unwrap();
        let c = Constraints { base_offset: 0x1000_0000, ..Constraints::default() };
        let staged = staging_layout(&goal, &[(0x404000, 0x1000)], &c).unwrap();
        assert_eq!(staged, BTreeMap::from([(0, 0x1040_4100), (2, 0x1040_4110)]));
    }

    #[test]
    fn exit_chain_has_three_steps() {
        let cat = catalog(&[&pop(Reg::Rax), &pop(Reg::Rdi), &[Op::Syscall]]);
        let goal = SyscallGoal::new(60, vec![Arg::Immediate(0)]).unwrap();
        let chain = compile_chain(&goal, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&chain.steps), vec!["pop rax; ret", "pop rdi; ret", "syscall"]);
        assert!(chain.final_step().unwrap().stack_words.is_empty());
    }

    #[test]
    fn missing_syscall() {
        let cat = catalog(&[&pop(Reg::Rax)]);
        let goal = SyscallGoal::new(60, vec![]).unwrap();
        assert_eq!(compile_chain(&goal, &cat, &Constraints::default()), Err(CompileError::NoSyscallGadget));
    }

    #[test]
    fn chain_word_limit() {
        let cat = catalog(&[&pop(Reg::Rax), &pop(Reg::Rdi), &[Op::Syscall]]);
        let goal = SyscallGoal::new(60, vec![Arg::Immediate(0)]).unwrap();
        let c = Constraints { max_chain_words: 4, ..Constraints::default() };
        assert_eq!(
            compile_chain(&goal, &cat, &c),
            Err(CompileError::ChainTooLong { words: 5, max: 4 })
        );
    }

    #[test]
    fn ret_imm_only_as_fallback() {
        let cat = catalog(&[&[Op::PopReg(Reg::Rdi), Op::RetImm(8)], &pop(Reg::Rdi)]);
        let steps = encode_immediate(1, Reg::Rdi, &cat, &Constraints::default()).unwrap();
        assert_eq!(ops_of(&steps), vec!["pop rdi; ret"]);

        let cat = catalog(&[&[Op::PopReg(Reg::Rdi), Op::RetImm(8)]]);
        let steps = encode_immediate(1, Reg::Rdi, &cat, &Constraints::default()).unwrap();
        assert_eq!(steps[0].stack_words, vec![1, FILLER_WORD]);
        assert_eq!(steps[0].ret_padding_words(), 1);
    }

    #[test]
    fn error_names() {
        assert_eq!(CompileError::NoSyscallGadget.name(), "NoSyscallGadget");
        assert!(CompileError::NoSyscallGadget.to_string().starts_with("NoSyscallGadget"));
        let e = CompileError::ImmediateUnencodable { reg: Reg::Rax, value: 1 };
        assert!(e.to_string().starts_with(e.name()));
    }
}
