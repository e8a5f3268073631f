//! Syscall ROP chain synthesis for x86-64 ELF binaries.
//!
//! The pipeline: [`load_elf`] reads the loadable segments, [`find_gadgets`]
//! scans executable bytes for `ret`/`ret imm16`/`syscall`-terminated
//! sequences, [`summarize`] turns each gadget into a symbolic effect,
//! [`compile_chain`] plans a chain for a [`SyscallGoal`], [`layout`] and
//! [`render`] produce the payload, and the [`emulator`] replays it.

pub mod compiler;
pub mod elf;
pub mod emulator;
pub mod fixtures;
pub mod goal;
pub mod payload;
pub mod scanner;
pub mod semantics;
pub mod x86;

pub use compiler::{
    compile_chain, encode_immediate, order_assignments, plan_data_writes, staging_layout, Catalog,
    CatalogEntry, Chain, ChainStep, CompileError, Constraints, Plan,
};
pub use elf::{load_elf, Elf64Image, ElfError, Perms, Segment};
pub use emulator::{run, verify_goal, EmuConfig, MachineState, Outcome, VerifyReport};
pub use goal::{Arg, GoalError, SyscallGoal};
pub use payload::{check_bad_bytes, layout, render, BadBytes, Format, Payload, PayloadError, Role};
pub use scanner::{find_gadgets, Gadget, ScanConfig, Terminator};
pub use semantics::{summarize, GadgetEffect, SymExpr, Tag};
pub use x86::{decode_one, encode_one, Instruction, Op, Reg, Width};
