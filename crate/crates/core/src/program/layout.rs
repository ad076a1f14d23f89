//! Deterministic placement of a program onto enclave pages.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::isa::{Addr, Instr, MemRef, Op};
use super::{PageType, Program, Rights, RightsClass, Stmt, PAGE_SIZE, WORDS_PER_PAGE};
use crate::machine::PlatformConfig;

/// Word of every data page reserved for the read-and-rewrite preload.
pub const PRELOAD_WORD: usize = WORDS_PER_PAGE - 1;

/// Bytes kept free above each thread's initial stack pointer, so pushes never
/// touch [`PRELOAD_WORD`].
pub const STACK_TOP_GAP: u64 = 8;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("program needs {needed} EPC pages but only {available} exist")]
    ProgramTooLarge { needed: usize, available: usize },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("unknown label `{label}` in function `{function}`")]
    UnknownLabel { function: String, label: String },
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("entry point `{0}` is not a function")]
    BadEntryPoint(String),
    #[error("thread entry `{0}` is not a declared entry point")]
    ThreadEntryNotExported(String),
    #[error("word {word} of page `{page}` is out of range")]
    BadWord { page: String, word: usize },
    #[error("instructions_per_code_page must be a power of two dividing 4096, got {0}")]
    BadGeometry(usize),
    #[error("program has no threads")]
    NoThreads,
    #[error("preload sequence does not settle on a layout")]
    PreloadUnstable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum PageKind {
    Code,
    Data,
    Stack,
    Ssa,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PageInfo {
    pub vpn: u64,
    pub name: Option<String>,
    pub kind: PageKind,
    pub rights: Rights,
    pub page_type: PageType,
}

impl PageInfo {
    pub fn class(&self) -> RightsClass {
        if self.rights.x {
            RightsClass::X
        } else if self.rights.w {
            RightsClass::Rw
        } else {
            RightsClass::Ro
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThreadInfo {
    pub entry: u64,
    pub handler: Option<u64>,
    pub stack_top: u64,
    pub ssa_base: u64,
    pub nssa: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionInfo {
    pub name: String,
    pub start: u64,
    pub end: u64,
    pub size: usize,
}

/// A loaded enclave: resolved code, page list and initial memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub base_vpn: u64,
    pub instr_bytes: u64,
    pub code_pages: usize,
    pub ops: Vec<Op>,
    pub pages: Vec<PageInfo>,
    /// Initial memory: (page index, word, value).
    pub init: Vec<(usize, usize, i64)>,
    pub symbols: BTreeMap<String, u64>,
    pub functions: Vec<FunctionInfo>,
    pub entry_points: Vec<u64>,
    pub threads: Vec<ThreadInfo>,
    pub secret_slots: Vec<u64>,
}

impl Image {
    pub fn base_addr(&self) -> u64 {
        self.base_vpn * PAGE_SIZE
    }

    pub fn end_vpn(&self) -> u64 {
        self.base_vpn + self.pages.len() as u64
    }

    pub fn contains_vpn(&self, vpn: u64) -> bool {
        vpn >= self.base_vpn && vpn < self.end_vpn()
    }

    pub fn page_index(&self, vpn: u64) -> Option<usize> {
        self.contains_vpn(vpn).then(|| (vpn - self.base_vpn) as usize)
    }

    pub fn page(&self, vpn: u64) -> Option<&PageInfo> {
        self.page_index(vpn).map(|i| &self.pages[i])
    }

    pub fn op_at(&self, rip: u64) -> Op {
        let base = self.base_addr();
        if rip < base || !(rip - base).is_multiple_of(self.instr_bytes) {
            return Op::Invalid;
        }
        self.ops.get(((rip - base) / self.instr_bytes) as usize).copied().unwrap_or(Op::Invalid)
    }

    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).copied()
    }

    pub fn function(&self, name: &str) -> Option<&FunctionInfo> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_at(&self, rip: u64) -> Option<&FunctionInfo> {
        self.functions.iter().find(|f| rip >= f.start && rip < f.end)
    }

    pub fn vpn_of(&self, page_name: &str) -> Option<u64> {
        self.pages.iter().find(|p| p.name.as_deref() == Some(page_name)).map(|p| p.vpn)
    }

    pub fn code_vpns(&self) -> impl Iterator<Item = u64> + '_ {
        self.pages.iter().filter(|p| p.kind == PageKind::Code).map(|p| p.vpn)
    }

    pub fn instructions_per_page(&self) -> u64 {
        PAGE_SIZE / self.instr_bytes
    }
}

fn align_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}

/// Places `program` onto pages starting at the platform's ELRANGE base:
/// code first (functions in declaration order), then data pages, then one
/// stack page and one SSA page per thread.
pub fn load(program: &Program, config: &PlatformConfig) -> Result<Image, LoadError> {
    let ipp = config.instructions_per_code_page;
    if ipp == 0 || !ipp.is_power_of_two() || ipp > PAGE_SIZE as usize {
        return Err(LoadError::BadGeometry(ipp));
    }
    if program.threads.is_empty() {
        return Err(LoadError::NoThreads);
    }
    let instr_bytes = PAGE_SIZE / ipp as u64;
    let base_vpn = config.elrange_base_vpn;
    let base = base_vpn * PAGE_SIZE;

    let mut symbols: BTreeMap<String, u64> = BTreeMap::new();
    let define = |symbols: &mut BTreeMap<String, u64>, name: String, addr: u64| {
        if symbols.insert(name.clone(), addr).is_some() {
            Err(LoadError::DuplicateSymbol(name))
        } else {
            Ok(())
        }
    };

    // Pass 1: slot assignment.
    let mut cursor = 0usize;
    let mut starts = Vec::with_capacity(program.functions.len());
    let mut functions = Vec::with_capacity(program.functions.len());
    let mut after_own = false;
    for f in &program.functions {
        if f.own_page || after_own {
            cursor = align_up(cursor, ipp);
        }
        let start = cursor;
        starts.push(start);
        let fstart = base + start as u64 * instr_bytes;
        define(&mut symbols, f.name.clone(), fstart)?;
        let mut local = 0usize;
        for s in &f.body {
            match s {
                Stmt::Label(l) => {
                    define(&mut symbols, format!("{}.{}", f.name, l), fstart + local as u64 * instr_bytes)?
                }
                Stmt::Instr(_) => local += 1,
            }
        }
        cursor += local;
        let fend = base + cursor as u64 * instr_bytes;
        define(&mut symbols, format!("{}.__end", f.name), fend)?;
        functions.push(FunctionInfo { name: f.name.clone(), start: fstart, end: fend, size: local });
        after_own = f.own_page;
    }
    let code_pages = cursor.div_ceil(ipp);

    let mut pages = Vec::new();
    for i in 0..code_pages {
        pages.push(PageInfo {
            vpn: base_vpn + i as u64,
            name: None,
            kind: PageKind::Code,
            rights: Rights::RX,
            page_type: PageType::Regular,
        });
    }
    let mut init = Vec::new();
    for d in &program.data_pages {
        let idx = pages.len();
        let vpn = base_vpn + idx as u64;
        define(&mut symbols, d.name.clone(), vpn * PAGE_SIZE)?;
        for &(w, v) in &d.init {
            if w >= WORDS_PER_PAGE {
                return Err(LoadError::BadWord { page: d.name.clone(), word: w });
            }
            init.push((idx, w, v));
        }
        pages.push(PageInfo {
            vpn,
            name: Some(d.name.clone()),
            kind: PageKind::Data,
            rights: Rights { r: true, w: d.rights.w, x: false },
            page_type: PageType::Regular,
        });
    }
    let mut threads = Vec::new();
    for (k, t) in program.threads.iter().enumerate() {
        let stack_vpn = base_vpn + pages.len() as u64;
        let stack_name = format!("__stack{k}");
        define(&mut symbols, stack_name.clone(), stack_vpn * PAGE_SIZE)?;
        pages.push(PageInfo {
            vpn: stack_vpn,
            name: Some(stack_name),
            kind: PageKind::Stack,
            rights: Rights::RW,
            page_type: PageType::Regular,
        });
        let ssa_vpn = base_vpn + pages.len() as u64;
        let ssa_name = format!("__ssa{k}");
        define(&mut symbols, ssa_name.clone(), ssa_vpn * PAGE_SIZE)?;
        pages.push(PageInfo {
            vpn: ssa_vpn,
            name: Some(ssa_name),
            kind: PageKind::Ssa,
            rights: Rights::RW,
            page_type: PageType::Ssa,
        });
        let _ = t;
        threads.push((stack_vpn, ssa_vpn));
    }
    if pages.len() > config.epc_pages {
        return Err(LoadError::ProgramTooLarge { needed: pages.len(), available: config.epc_pages });
    }

    // Pass 2: resolution.
    let resolve_sym = |name: &str| symbols.get(name).copied().ok_or_else(|| LoadError::UnknownSymbol(name.to_string()));
    let resolve_addr = |a: &Addr| -> Result<MemRef, LoadError> {
        let mut disp = a.offset;
        if let Some(s) = &a.sym {
            disp = disp.wrapping_add(resolve_sym(s)? as i64);
        }
        Ok(MemRef { base: a.base, disp })
    };
    let mut ops = vec![Op::Invalid; code_pages * ipp];
    for (f, &start) in program.functions.iter().zip(&starts) {
        let label = |l: &str| {
            symbols.get(&format!("{}.{}", f.name, l)).copied().ok_or_else(|| LoadError::UnknownLabel {
                function: f.name.clone(),
                label: l.to_string(),
            })
        };
        for (slot, i) in f.instrs().enumerate() {
            let op = match i {
                Instr::LoadImm { dst, value } => Op::LoadImm { dst: *dst, value: *value },
                Instr::LoadAddr { dst, sym, offset } => {
                    Op::LoadImm { dst: *dst, value: (resolve_sym(sym)? as i64).wrapping_add(*offset) }
                }
                Instr::Alu { op, dst, src } => Op::Alu { op: *op, dst: *dst, src: *src },
                Instr::Read { dst, addr } => Op::Read { dst: *dst, mem: resolve_addr(addr)? },
                Instr::Write { addr, src } => Op::Write { mem: resolve_addr(addr)?, src: *src },
                Instr::BranchIfZero { reg, label: l } => Op::BranchIfZero { reg: *reg, target: label(l)? },
                Instr::BranchIfNonZero { reg, label: l } => Op::BranchIfNonZero { reg: *reg, target: label(l)? },
                Instr::Jump { label: l } => Op::Jump { target: label(l)? },
                Instr::Call { function } => Op::Call { target: resolve_sym(function)? },
                Instr::Ret => Op::Ret,
                Instr::Push { src } => Op::Push { src: *src },
                Instr::Pop { dst } => Op::Pop { dst: *dst },
                Instr::EExit => Op::EExit,
                Instr::XBegin { abort } => Op::XBegin { abort: label(abort)? },
                Instr::XEnd => Op::XEnd,
                Instr::PreloadMarker { .. } | Instr::Fence => Op::Nop,
                Instr::CmpXchg { dst, addr, expected, new } => {
                    Op::CmpXchg { dst: *dst, mem: resolve_addr(addr)?, expected: *expected, new: *new }
                }
                Instr::ReadPhysCoreId { dst } => Op::ReadPhysCoreId { dst: *dst },
                Instr::ReadThreadSlot { dst } => Op::ReadThreadSlot { dst: *dst },
                Instr::RegisterInterrupt => Op::RegisterInterrupt,
                Instr::SsaFrameAddr { dst, delta } => Op::SsaFrameAddr { dst: *dst, delta: *delta },
                Instr::RestoreContext { addr } => Op::RestoreContext { mem: resolve_addr(addr)? },
                Instr::SimulateAex => Op::SimulateAex,
                Instr::CallStub { vpn } => Op::CallStub { vpn: *vpn },
                Instr::EGetKey { dst } => Op::EGetKey { dst: *dst },
            };
            ops[start + slot] = op;
        }
    }

    let mut entry_points = Vec::new();
    let mut entry_names: HashMap<&str, u64> = HashMap::new();
    for e in &program.entry_points {
        let f = functions.iter().find(|f| &f.name == e).ok_or_else(|| LoadError::BadEntryPoint(e.clone()))?;
        entry_points.push(f.start);
        entry_names.insert(e.as_str(), f.start);
    }
    let mut thread_infos = Vec::new();
    for (t, (stack_vpn, ssa_vpn)) in program.threads.iter().zip(threads) {
        let entry =
            *entry_names.get(t.entry.as_str()).ok_or_else(|| LoadError::ThreadEntryNotExported(t.entry.clone()))?;
        let handler = match &t.handler {
            Some(h) => Some(
                *entry_names.get(h.as_str()).ok_or_else(|| LoadError::ThreadEntryNotExported(h.clone()))?,
            ),
            None => None,
        };
        thread_infos.push(ThreadInfo {
            entry,
            handler,
            stack_top: (stack_vpn + 1) * PAGE_SIZE - STACK_TOP_GAP,
            ssa_base: ssa_vpn * PAGE_SIZE,
            nssa: program.nssa,
        });
    }

    let mut secret_slots = Vec::new();
    for s in &program.secret_slots {
        let page = resolve_sym(&s.page)?;
        if s.word >= WORDS_PER_PAGE {
            return Err(LoadError::BadWord { page: s.page.clone(), word: s.word });
        }
        secret_slots.push(page + s.word as u64 * 8);
    }

    Ok(Image {
        base_vpn,
        instr_bytes,
        code_pages,
        ops,
        pages,
        init,
        symbols,
        functions,
        entry_points,
        threads: thread_infos,
        secret_slots,
    })
}
