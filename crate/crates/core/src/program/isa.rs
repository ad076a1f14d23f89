//! Toy enclave instruction set.
//!
//! Programs are written against symbolic names (functions, labels and data
//! pages). [`crate::program::load`] resolves them into [`Op`]s with absolute
//! addresses.

use std::fmt;

use serde::{Deserialize, Serialize};

/// General-purpose register index, `r0` through `r7`.
pub type Reg = u8;

pub const NUM_REGS: usize = 8;

/// Registers clobbered by the defense runtimes and the transaction-splitting
/// prologue. User programs only use `r0..=r5`.
pub const RUNTIME_REGS: [Reg; 2] = [6, 7];

/// Each instruction occupies 64 bytes of the address space, which places
/// exactly 64 instructions on a 4 KiB code page.
pub const INSTR_BYTES: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Mov,
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
}

impl AluOp {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            AluOp::Mov => b,
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl(b as u32),
            AluOp::Shr => ((a as u64).wrapping_shr(b as u32)) as i64,
            AluOp::Eq => (a == b) as i64,
            AluOp::Ne => (a != b) as i64,
            AluOp::Lt => (a < b) as i64,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Mov => "mov",
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
            AluOp::Eq => "eq",
            AluOp::Ne => "ne",
            AluOp::Lt => "lt",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<AluOp> {
        Some(match s {
            "mov" => AluOp::Mov,
            "add" => AluOp::Add,
            "sub" => AluOp::Sub,
            "mul" => AluOp::Mul,
            "and" => AluOp::And,
            "or" => AluOp::Or,
            "xor" => AluOp::Xor,
            "shl" => AluOp::Shl,
            "shr" => AluOp::Shr,
            "eq" => AluOp::Eq,
            "ne" => AluOp::Ne,
            "lt" => AluOp::Lt,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

/// A memory operand: `[sym + off]`, `[rN + off]`, `[rN + sym + off]` or an
/// absolute `[0x1234]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Addr {
    pub base: Option<Reg>,
    pub sym: Option<String>,
    pub offset: i64,
}

impl Addr {
    pub fn sym(name: impl Into<String>, offset: i64) -> Self {
        Addr { base: None, sym: Some(name.into()), offset }
    }

    pub fn abs(addr: u64) -> Self {
        Addr { base: None, sym: None, offset: addr as i64 }
    }

    pub fn reg(base: Reg, offset: i64) -> Self {
        Addr { base: Some(base), sym: None, offset }
    }

    pub fn reg_sym(base: Reg, name: impl Into<String>, offset: i64) -> Self {
        Addr { base: Some(base), sym: Some(name.into()), offset }
    }
}

/// One symbolic instruction. Labels are local to the enclosing function.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    LoadImm { dst: Reg, value: i64 },
    /// Loads the address of a function, label (`func.label`) or data page.
    LoadAddr { dst: Reg, sym: String, offset: i64 },
    Alu { op: AluOp, dst: Reg, src: Operand },
    Read { dst: Reg, addr: Addr },
    Write { addr: Addr, src: Reg },
    BranchIfZero { reg: Reg, label: String },
    BranchIfNonZero { reg: Reg, label: String },
    Jump { label: String },
    Call { function: String },
    Ret,
    Push { src: Reg },
    Pop { dst: Reg },
    EExit,
    XBegin { abort: String },
    XEnd,
    /// Placeholder for "preload page set N here"; the defense linkers rewrite
    /// it into a call of the generated preload routine.
    PreloadMarker { set: u32 },
    /// `dst := 1` and `[addr] := new` iff `[addr] == expected`, else `dst := 0`.
    CmpXchg { dst: Reg, addr: Addr, expected: Reg, new: Reg },
    ReadPhysCoreId { dst: Reg },
    /// Index of the thread-control slot the core entered through.
    ReadThreadSlot { dst: Reg },
    RegisterInterrupt,
    Fence,
    /// `dst := address of SSA frame (cssa + delta)`.
    SsaFrameAddr { dst: Reg, delta: i64 },
    /// Atomically loads registers, `rip` and `rsp` from a saved context.
    RestoreContext { addr: Addr },
    SimulateAex,
    /// Calls the return stub of code page `vpn` (an execute access to that
    /// page and nothing else).
    CallStub { vpn: u64 },
    /// Restricted instruction: aborts any enclosing transaction.
    EGetKey { dst: Reg },
}

impl Instr {
    pub fn registers(&self) -> Vec<Reg> {
        let mut out = Vec::new();
        let addr_regs = |a: &Addr, out: &mut Vec<Reg>| {
            if let Some(b) = a.base {
                out.push(b)
            }
        };
        match self {
            Instr::LoadImm { dst, .. }
            | Instr::LoadAddr { dst, .. }
            | Instr::ReadPhysCoreId { dst }
            | Instr::ReadThreadSlot { dst }
            | Instr::SsaFrameAddr { dst, .. }
            | Instr::EGetKey { dst }
            | Instr::Pop { dst } => out.push(*dst),
            Instr::Alu { dst, src, .. } => {
                out.push(*dst);
                if let Operand::Reg(r) = src {
                    out.push(*r);
                }
            }
            Instr::Read { dst, addr } => {
                out.push(*dst);
                addr_regs(addr, &mut out);
            }
            Instr::Write { addr, src } => {
                out.push(*src);
                addr_regs(addr, &mut out);
            }
            Instr::BranchIfZero { reg, .. } | Instr::BranchIfNonZero { reg, .. } => out.push(*reg),
            Instr::Push { src } => out.push(*src),
            Instr::CmpXchg { dst, addr, expected, new } => {
                out.extend([*dst, *expected, *new]);
                addr_regs(addr, &mut out);
            }
            Instr::RestoreContext { addr } => addr_regs(addr, &mut out),
            _ => {}
        }
        out
    }
}

fn fmt_addr(a: &Addr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    write!(f, "[")?;
    let mut first = true;
    if let Some(b) = a.base {
        write!(f, "r{b}")?;
        first = false;
    }
    if let Some(s) = &a.sym {
        if !first {
            write!(f, "+")?;
        }
        write!(f, "{s}")?;
        first = false;
    }
    if first {
        write!(f, "{:#x}", a.offset)?;
    } else if a.offset != 0 {
        if a.offset < 0 {
            write!(f, "-{}", a.offset.unsigned_abs())?;
        } else {
            write!(f, "+{}", a.offset)?;
        }
    }
    write!(f, "]")
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::LoadImm { dst, value } => write!(f, "loadi r{dst}, {value}"),
            Instr::LoadAddr { dst, sym, offset } => {
                if *offset == 0 {
                    write!(f, "lea r{dst}, {sym}")
                } else {
                    write!(f, "lea r{dst}, {sym}, {offset}")
                }
            }
            Instr::Alu { op, dst, src } => match src {
                Operand::Reg(r) => write!(f, "{} r{dst}, r{r}", op.mnemonic()),
                Operand::Imm(v) => write!(f, "{} r{dst}, {v}", op.mnemonic()),
            },
            Instr::Read { dst, addr } => {
                write!(f, "read r{dst}, ")?;
                fmt_addr(addr, f)
            }
            Instr::Write { addr, src } => {
                write!(f, "write ")?;
                fmt_addr(addr, f)?;
                write!(f, ", r{src}")
            }
            Instr::BranchIfZero { reg, label } => write!(f, "bz r{reg}, {label}"),
            Instr::BranchIfNonZero { reg, label } => write!(f, "bnz r{reg}, {label}"),
            Instr::Jump { label } => write!(f, "jmp {label}"),
            Instr::Call { function } => write!(f, "call {function}"),
            Instr::Ret => write!(f, "ret"),
            Instr::Push { src } => write!(f, "push r{src}"),
            Instr::Pop { dst } => write!(f, "pop r{dst}"),
            Instr::EExit => write!(f, "eexit"),
            Instr::XBegin { abort } => write!(f, "xbegin {abort}"),
            Instr::XEnd => write!(f, "xend"),
            Instr::PreloadMarker { set } => write!(f, "preload {set}"),
            Instr::CmpXchg { dst, addr, expected, new } => {
                write!(f, "cmpxchg r{dst}, ")?;
                fmt_addr(addr, f)?;
                write!(f, ", r{expected}, r{new}")
            }
            Instr::ReadPhysCoreId { dst } => write!(f, "physid r{dst}"),
            Instr::ReadThreadSlot { dst } => write!(f, "slot r{dst}"),
            Instr::RegisterInterrupt => write!(f, "regint"),
            Instr::Fence => write!(f, "fence"),
            Instr::SsaFrameAddr { dst, delta } => write!(f, "ssaaddr r{dst}, {delta}"),
            Instr::RestoreContext { addr } => {
                write!(f, "restore ")?;
                fmt_addr(addr, f)
            }
            Instr::SimulateAex => write!(f, "simaex"),
            Instr::CallStub { vpn } => write!(f, "callstub {vpn:#x}"),
            Instr::EGetKey { dst } => write!(f, "egetkey r{dst}"),
        }
    }
}

/// A resolved memory operand: `base + disp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<Reg>,
    pub disp: i64,
}

/// A resolved instruction as stored in a loaded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    LoadImm { dst: Reg, value: i64 },
    Alu { op: AluOp, dst: Reg, src: Operand },
    Read { dst: Reg, mem: MemRef },
    Write { mem: MemRef, src: Reg },
    BranchIfZero { reg: Reg, target: u64 },
    BranchIfNonZero { reg: Reg, target: u64 },
    Jump { target: u64 },
    Call { target: u64 },
    Ret,
    Push { src: Reg },
    Pop { dst: Reg },
    EExit,
    XBegin { abort: u64 },
    XEnd,
    Nop,
    CmpXchg { dst: Reg, mem: MemRef, expected: Reg, new: Reg },
    ReadPhysCoreId { dst: Reg },
    ReadThreadSlot { dst: Reg },
    RegisterInterrupt,
    SsaFrameAddr { dst: Reg, delta: i64 },
    RestoreContext { mem: MemRef },
    SimulateAex,
    CallStub { vpn: u64 },
    EGetKey { dst: Reg },
    /// Padding slot; executing it is a program error.
    Invalid,
}
