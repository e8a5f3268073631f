//! Syscall goals and the x86-64 Linux syscall register convention.

use std::fmt;

use crate::x86::Reg;

/// Register holding the syscall number.
pub const SYSCALL_NUMBER_REG: Reg = Reg::Rax;

/// Argument registers for the `syscall` instruction. Note `r10`, not `rcx`:
/// the kernel convention differs from the userland call convention there.
pub const SYSCALL_ARG_REGS: [Reg; 6] = Reg::SYSCALL_ARGS;

pub const SYS_EXECVE: u64 = 59;
pub const SYS_EXIT: u64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Arg {
    Immediate(u64),
    /// Stage these bytes in writable memory and pass their address.
    DataPointer(Vec<u8>),
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Immediate(v) => write!(f, "imm:{v:#x}"),
            Arg::DataPointer(d) => {
                f.write_str("data:0x")?;
                for b in d {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SyscallGoal {
    pub number: u64,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GoalError {
    #[error("a syscall takes at most 6 arguments, got {0}")]
    TooManyArgs(usize),
    #[error("data argument {0} is empty")]
    EmptyData(usize),
}

impl SyscallGoal {
    pub fn new(number: u64, args: Vec<Arg>) -> Result<Self, GoalError> {
        let goal = SyscallGoal { number, args };
        goal.validate()?;
        Ok(goal)
    }

    pub fn validate(&self) -> Result<(), GoalError> {
        if self.args.len() > 6 {
            return Err(GoalError::TooManyArgs(self.args.len()));
        }
        if let Some(i) = self
            .args
            .iter()
            .position(|a| matches!(a, Arg::DataPointer(d) if d.is_empty()))
        {
            return Err(GoalError::EmptyData(i));
        }
        Ok(())
    }

    /// `(register, arg)` pairs in argument order.
    pub fn arg_regs(&self) -> impl Iterator<Item = (Reg, &Arg)> {
        SYSCALL_ARG_REGS.iter().copied().zip(self.args.iter())
    }
}

impl fmt::Display for SyscallGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syscall {}", self.number)?;
        for (reg, arg) in self.arg_regs() {
            write!(f, " {reg}={arg}")?;
        }
        Ok(())
    }
}
