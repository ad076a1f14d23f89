//! Platform model: translation, EPC/EPCM, TLBs, cores, SSA frames and
//! enclave transitions.

pub mod event;
mod exec;
pub mod host;
pub mod tlb;

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use event::{Actor, Event, EventKind, EventLog};
pub use host::{CallKind, HostState, ThreadState, ThreadStatus};
pub use tlb::{Frame, Owner, Tlb, TlbEntry};

use crate::defense_sw::rtm::{AbortCause, Transaction, TsxConfig};
use crate::program::isa::NUM_REGS;
use crate::program::{Image, PageType, Rights, PAGE_SIZE, WORDS_PER_PAGE};

pub const ENCLAVE_ID: u32 = 1;

/// Fast deterministic hasher for state fingerprints.
pub fn state_hasher() -> ahash::AHasher {
    use std::hash::BuildHasher;
    ahash::RandomState::with_seeds(0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344).build_hasher()
}
pub const SSA_FRAME_BYTES: u64 = 128;
pub const SSA_RIP: u64 = 8;
pub const SSA_RSP: u64 = 9;
pub const SSA_BLOCK: u64 = 10;
/// Value returned by `egetkey`.
pub const SEAL_KEY: i64 = 0x5ea1_0000_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub tlb_sets: usize,
    pub tlb_ways: usize,
    pub hyperthreading: bool,
    pub physical_cores: usize,
    pub epc_pages: usize,
    pub instructions_per_code_page: usize,
    pub paired_aex_hw: bool,
    pub elrange_base_vpn: u64,
    /// Boolean stand-in for an attested "HyperThreading disabled" boot.
    pub ht_disabled_attested: bool,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            tlb_sets: 128,
            tlb_ways: 12,
            hyperthreading: false,
            physical_cores: 2,
            epc_pages: 24_576,
            instructions_per_code_page: 64,
            paired_aex_hw: true,
            elrange_base_vpn: 0x100,
            ht_disabled_attested: false,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("TLB geometry must be non-empty")]
    EmptyTlb,
    #[error("at least one physical core is required")]
    NoCores,
    #[error("EPC must hold at least one page")]
    NoEpc,
    #[error("instructions_per_code_page must divide the page into whole instruction slots")]
    BadCodePage,
    #[error("ELRANGE base must be non-zero")]
    BadBase,
}

impl PlatformConfig {
    pub fn with_ht(hyperthreading: bool) -> Self {
        PlatformConfig { hyperthreading, ..PlatformConfig::default() }
    }

    pub fn logical_cores(&self) -> usize {
        self.physical_cores * if self.hyperthreading { 2 } else { 1 }
    }

    pub fn tlb_entries(&self) -> usize {
        self.tlb_sets * self.tlb_ways
    }

    pub fn physical_of(&self, logical: usize) -> usize {
        if self.hyperthreading {
            logical / 2
        } else {
            logical
        }
    }

    pub fn sibling_of(&self, logical: usize) -> Option<usize> {
        self.hyperthreading.then_some(logical ^ 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tlb_sets == 0 || self.tlb_ways == 0 {
            return Err(ConfigError::EmptyTlb);
        }
        if self.physical_cores == 0 {
            return Err(ConfigError::NoCores);
        }
        if self.epc_pages == 0 {
            return Err(ConfigError::NoEpc);
        }
        let n = self.instructions_per_code_page;
        if n == 0 || !(PAGE_SIZE as usize).is_multiple_of(n) || PAGE_SIZE as usize / n < 8 {
            return Err(ConfigError::BadCodePage);
        }
        if self.elrange_base_vpn == 0 {
            return Err(ConfigError::BadBase);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    Execute,
}

impl Access {
    pub fn name(self) -> &'static str {
        match self {
            Access::Read => "read",
            Access::Write => "write",
            Access::Execute => "execute",
        }
    }

    pub fn allowed_by(self, r: Rights) -> bool {
        match self {
            Access::Read => r.r,
            Access::Write => r.w,
            Access::Execute => r.x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCause {
    NotPresent,
    Rights,
    EpcmMismatch,
}

impl FaultCause {
    pub fn name(self) -> &'static str {
        match self {
            FaultCause::NotPresent => "not_present",
            FaultCause::Rights => "rights",
            FaultCause::EpcmMismatch => "epcm_mismatch",
        }
    }
}

/// Page-granular fault report. `faulting_page` is a virtual page number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultInfo {
    pub faulting_page: u64,
    pub access: Access,
    pub cause: FaultCause,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AexCause {
    Interrupt,
    Fault(FaultInfo),
    Paired,
    /// Software-requested exit (`simaex`), used by the resume hook when the
    /// proactive phase fails.
    Simulated,
}

impl AexCause {
    pub fn name(&self) -> &'static str {
        match self {
            AexCause::Interrupt => "interrupt",
            AexCause::Fault(_) => "fault",
            AexCause::Paired => "paired",
            AexCause::Simulated => "simulated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Pte {
    pub present: bool,
    pub writable: bool,
    pub executable: bool,
    pub accessed: bool,
    pub dirty: bool,
    pub frame: u32,
}

impl Pte {
    pub fn rights(&self) -> Rights {
        Rights { r: true, w: self.writable, x: self.executable }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PteField {
    Present,
    Writable,
    Executable,
    Accessed,
    Dirty,
    Frame,
}

impl PteField {
    pub fn name(self) -> &'static str {
        match self {
            PteField::Present => "present",
            PteField::Writable => "writable",
            PteField::Executable => "executable",
            PteField::Accessed => "accessed",
            PteField::Dirty => "dirty",
            PteField::Frame => "frame",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct EpcmEntry {
    pub valid: bool,
    pub enclave_id: u32,
    pub linear_page: u64,
    pub rights: Rights,
    pub page_type: PageType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Mode {
    Untrusted,
    Enclave(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LogicalCore {
    pub id: usize,
    pub physical_id: usize,
    pub sibling_id: Option<usize>,
    pub mode: Mode,
    pub regs: [i64; NUM_REGS],
    pub rip: u64,
    pub rsp: u64,
    /// Armed interrupt, delivered after the next retired enclave
    /// instruction.
    pub interrupt_pending: bool,
    pub thread: Option<usize>,
    pub tx: Option<Transaction>,
    pub consecutive_aborts: u64,
    pub tx_started: u64,
}

impl LogicalCore {
    pub fn in_enclave(&self) -> bool {
        matches!(self.mode, Mode::Enclave(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tick {
    /// One instruction of an enclave core, or one host-runtime action when
    /// the core is outside the enclave.
    Step(usize),
    Interrupt(usize),
    /// Benign cache conflict; aborts an active transaction on that core.
    Conflict(usize),
    Attacker,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MachineError {
    #[error("core {core} exceeded the abort budget ({aborts} consecutive aborts)")]
    NonTermination { core: usize, aborts: u64 },
    #[error("program fault on core {core} at {rip:#x}: {reason}")]
    ProgramFault { core: usize, rip: u64, reason: String },
    #[error("bad configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("bad transaction configuration: {0}")]
    Tsx(#[from] crate::defense_sw::rtm::TsxConfigError),
    #[error("thread placement invalid: {0}")]
    Placement(String),
    #[error("internal invariant broken: {0}")]
    Internal(String),
}

#[derive(Debug, thiserror::Error, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("no free SSA frame")]
    NoFreeSsaFrame,
    #[error("{0:#x} is not an entry point")]
    NotEntryPoint(u64),
    #[error("eresume blocked by the SSA frame")]
    EresumeBlocked,
    #[error("no saved context to resume")]
    NoSavedContext,
    #[error("core is already inside the enclave")]
    AlreadyInEnclave,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AexCounts {
    pub interrupt: u64,
    pub fault: u64,
    pub paired: u64,
    pub simulated: u64,
}

impl AexCounts {
    pub fn total(&self) -> u64 {
        self.interrupt + self.fault + self.paired + self.simulated
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AbortCounts {
    pub interrupt: u64,
    pub capacity: u64,
    pub conflict: u64,
    pub illegal: u64,
    pub fault: u64,
}

impl AbortCounts {
    pub fn total(&self) -> u64 {
        self.interrupt + self.capacity + self.conflict + self.illegal + self.fault
    }

    fn bump(&mut self, c: AbortCause) {
        match c {
            AbortCause::Interrupt => self.interrupt += 1,
            AbortCause::Capacity => self.capacity += 1,
            AbortCause::Conflict => self.conflict += 1,
            AbortCause::Illegal => self.illegal += 1,
            AbortCause::Fault => self.fault += 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub ticks: u64,
    pub retired: u64,
    pub aex: AexCounts,
    pub eenters: u64,
    pub handler_entries: u64,
    pub eresumes: u64,
    pub eresume_blocked: u64,
    pub tx_begins: u64,
    pub tx_commits: u64,
    pub tx_aborts: AbortCounts,
    pub page_walks: u64,
    pub pte_writes: u64,
    pub host_fixes: u64,
    pub max_cssa: usize,
}

type PageData = Arc<[i64; WORDS_PER_PAGE]>;

/// One simulation instance. Owns all platform state.
#[derive(Clone, Debug)]
pub struct Machine {
    pub config: PlatformConfig,
    pub tsx: TsxConfig,
    pub image: Arc<Image>,
    pub cores: Vec<LogicalCore>,
    pub tlbs: Vec<Tlb>,
    pub ptes: Vec<Pte>,
    pub epcm: Vec<EpcmEntry>,
    pub threads: Vec<ThreadState>,
    /// Per physical core: an enclave thread registered for paired AEX.
    pub registered: Vec<bool>,
    pub tick: u64,
    pub log: EventLog,
    pub stats: RunStats,
    pub verbose: bool,
    mem: Vec<PageData>,
    mem_hash: u64,
}

fn mix(addr: u64, value: i64) -> u64 {
    if value == 0 {
        return 0;
    }
    let mut z = addr.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (value as u64).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Machine {
    /// Builds a machine for `image`. `placement[t]` is the logical core of
    /// thread `t`; `secret` fills the image's secret slots in order.
    pub fn new(
        config: PlatformConfig,
        tsx: TsxConfig,
        image: Arc<Image>,
        placement: &[usize],
        secret: &[i64],
    ) -> Result<Machine, MachineError> {
        config.validate()?;
        tsx.validate()?;
        let nl = config.logical_cores();
        if placement.len() != image.threads.len() {
            return Err(MachineError::Placement(format!(
                "{} threads but {} placements",
                image.threads.len(),
                placement.len()
            )));
        }
        for (i, &c) in placement.iter().enumerate() {
            if c >= nl || placement[..i].contains(&c) {
                return Err(MachineError::Placement(format!("core {c} unavailable for thread {i}")));
            }
        }
        let mut cores: Vec<LogicalCore> = (0..nl)
            .map(|id| LogicalCore {
                id,
                physical_id: config.physical_of(id),
                sibling_id: config.sibling_of(id),
                mode: Mode::Untrusted,
                regs: [0; NUM_REGS],
                rip: 0,
                rsp: 0,
                interrupt_pending: false,
                thread: None,
                tx: None,
                consecutive_aborts: 0,
                tx_started: 0,
            })
            .collect();
        let threads = image
            .threads
            .iter()
            .enumerate()
            .map(|(t, info)| {
                cores[placement[t]].thread = Some(t);
                ThreadState::new(t, placement[t], info)
            })
            .collect();
        let n = image.pages.len();
        let ptes = (0..n)
            .map(|i| {
                let r = image.pages[i].rights;
                Pte { present: true, writable: r.w, executable: r.x, accessed: false, dirty: false, frame: i as u32 }
            })
            .collect();
        let epcm = image
            .pages
            .iter()
            .map(|p| EpcmEntry {
                valid: true,
                enclave_id: ENCLAVE_ID,
                linear_page: p.vpn,
                rights: p.rights,
                page_type: p.page_type,
            })
            .collect();
        let zero: PageData = Arc::new([0; WORDS_PER_PAGE]);
        let mut m = Machine {
            tlbs: (0..config.physical_cores).map(|_| Tlb::new(config.tlb_sets, config.tlb_ways)).collect(),
            registered: vec![false; config.physical_cores],
            config,
            tsx,
            cores,
            ptes,
            epcm,
            threads,
            tick: 0,
            log: EventLog::new(),
            stats: RunStats::default(),
            verbose: false,
            mem: vec![zero; n],
            mem_hash: 0,
            image: image.clone(),
        };
        for &(p, w, v) in &image.init {
            m.mem_write(p as u32, w, v);
        }
        for (i, &addr) in image.secret_slots.iter().enumerate() {
            let v = secret.get(i).copied().unwrap_or(0);
            let (f, w) = m.trusted_frame(addr).ok_or_else(|| MachineError::Internal("secret slot outside image".into()))?;
            m.mem_write(f, w, v);
        }
        Ok(m)
    }

    pub fn set_verbose(&mut self, v: bool) {
        self.verbose = v;
    }

    pub(crate) fn emit(&mut self, actor: Actor, kind: EventKind) {
        self.log.push(Event { tick: self.tick, actor, kind });
    }

    pub fn terminated(&self) -> bool {
        self.threads.iter().all(|t| t.status != ThreadStatus::Running)
    }

    pub fn enclave_owner() -> Owner {
        Owner::Enclave(ENCLAVE_ID)
    }

    // ---- memory ----

    pub(crate) fn mem_read(&self, frame: u32, word: usize) -> i64 {
        self.mem[frame as usize][word]
    }

    pub(crate) fn mem_write(&mut self, frame: u32, word: usize, value: i64) {
        let page = &mut self.mem[frame as usize];
        let old = page[word];
        if old == value {
            return;
        }
        let addr = ((frame as u64) << 12) | (word as u64 * 8);
        self.mem_hash ^= mix(addr, old) ^ mix(addr, value);
        Arc::make_mut(page)[word] = value;
    }

    /// Frame and word of an enclave address as seen by the processor's own
    /// bookkeeping (SSA accesses), bypassing the untrusted page tables.
    pub(crate) fn trusted_frame(&self, addr: u64) -> Option<(u32, usize)> {
        let i = self.image.page_index(addr / PAGE_SIZE)?;
        Some((i as u32, ((addr % PAGE_SIZE) / 8) as usize))
    }

    /// Reads enclave memory through the trusted mapping (tests and tools).
    pub fn peek_word(&self, addr: u64) -> Option<i64> {
        self.trusted_frame(addr).map(|(f, w)| self.mem_read(f, w))
    }

    pub fn peek_symbol(&self, sym: &str, word: usize) -> Option<i64> {
        self.peek_word(self.image.symbol(sym)? + 8 * word as u64)
    }

    fn ssa_write(&mut self, addr: u64, v: i64) {
        let (f, w) = self.trusted_frame(addr).expect("SSA page in image");
        self.mem_write(f, w, v);
    }

    fn ssa_read(&self, addr: u64) -> i64 {
        self.peek_word(addr).expect("SSA page in image")
    }

    pub fn ssa_frame_addr(&self, thread: usize, index: usize) -> u64 {
        self.threads[thread].ssa_base + index as u64 * SSA_FRAME_BYTES
    }

    // ---- translation ----

    fn owner_of(&self, core: usize) -> Owner {
        match self.cores[core].mode {
            Mode::Enclave(id) => Owner::Enclave(id),
            Mode::Untrusted => Owner::Untrusted,
        }
    }

    /// Enclave-mode address translation.
    pub fn translate(&mut self, core: usize, vaddr: u64, access: Access) -> Result<u32, FaultInfo> {
        let vpn = vaddr / PAGE_SIZE;
        let owner = self.owner_of(core);
        let phys = self.cores[core].physical_id;
        if let Some(slot) = self.tlbs[phys].lookup(vpn, owner, core) {
            let e = *self.tlbs[phys].entry(slot);
            if let (true, Frame::Epc(f)) = (access.allowed_by(e.rights), e.frame) {
                if access == Access::Write && !e.dirty_cached {
                    self.tlbs[phys].entry_mut(slot).dirty_cached = true;
                    if let Some(i) = self.image.page_index(vpn) {
                        self.ptes[i].dirty = true;
                    }
                    self.stats.pte_writes += 1;
                    self.emit(Actor::Core(core), EventKind::PteWrite { vpn });
                }
                return Ok(f);
            }
            self.tlbs[phys].flush(|x| x.linear_page == vpn && x.owner == owner && x.inserted_by == core);
        }
        self.stats.page_walks += 1;
        self.emit(Actor::Core(core), EventKind::PageWalk { vpn, access });
        let fault = |cause| FaultInfo { faulting_page: vpn, access, cause };
        let Some(i) = self.image.page_index(vpn) else {
            return Err(fault(FaultCause::NotPresent));
        };
        let pte = self.ptes[i];
        if !pte.present {
            return Err(fault(FaultCause::NotPresent));
        }
        if !access.allowed_by(pte.rights()) {
            return Err(fault(FaultCause::Rights));
        }
        let Some(ep) = self.epcm.get(pte.frame as usize).copied() else {
            return Err(fault(FaultCause::EpcmMismatch));
        };
        let ok = ep.valid
            && Owner::Enclave(ep.enclave_id) == owner
            && ep.linear_page == vpn
            && ep.rights.contains(pte.rights());
        if !ok {
            return Err(fault(FaultCause::EpcmMismatch));
        }
        let write = access == Access::Write;
        let p = &mut self.ptes[i];
        p.accessed = true;
        p.dirty |= write;
        let dirty_cached = p.dirty;
        self.tlbs[phys].insert(TlbEntry {
            linear_page: vpn,
            frame: Frame::Epc(pte.frame),
            rights: pte.rights().intersect(ep.rights),
            dirty_cached,
            owner,
            inserted_by: core,
        });
        Ok(pte.frame)
    }

    fn flush_core_entries(&mut self, core: usize) {
        let phys = self.cores[core].physical_id;
        let owner = Machine::enclave_owner();
        self.tlbs[phys].flush(|e| e.owner == owner && e.inserted_by == core);
    }

    // ---- transitions ----

    /// Asynchronous enclave exit. No-op for a core outside the enclave.
    pub fn aex(&mut self, core: usize, cause: AexCause) -> Result<(), MachineError> {
        let Mode::Enclave(id) = self.cores[core].mode else {
            return Ok(());
        };
        if self.cores[core].tx.is_some() {
            let ac = if matches!(cause, AexCause::Fault(_)) { AbortCause::Fault } else { AbortCause::Interrupt };
            self.abort_tx(core, ac)?;
        }
        let t = self.cores[core].thread.ok_or_else(|| MachineError::Internal("enclave core without thread".into()))?;
        let cssa = self.threads[t].cssa;
        if cssa >= self.threads[t].nssa {
            return Err(MachineError::Internal(format!("AEX on thread {t} with a full SSA stack")));
        }
        let base = self.ssa_frame_addr(t, cssa);
        let c = self.cores[core].clone();
        for (i, &r) in c.regs.iter().enumerate() {
            self.ssa_write(base + 8 * i as u64, r);
        }
        self.ssa_write(base + 8 * SSA_RIP, c.rip as i64);
        self.ssa_write(base + 8 * SSA_RSP, c.rsp as i64);
        self.threads[t].cssa = cssa + 1;
        self.stats.max_cssa = self.stats.max_cssa.max(cssa + 1);
        let k = &mut self.cores[core];
        k.regs = [0; NUM_REGS];
        k.mode = Mode::Untrusted;
        k.interrupt_pending = false;
        self.flush_core_entries(core);
        match cause {
            AexCause::Interrupt => self.stats.aex.interrupt += 1,
            AexCause::Fault(fi) => {
                self.stats.aex.fault += 1;
                self.emit(Actor::Core(core), EventKind::Fault(fi));
            }
            AexCause::Paired => self.stats.aex.paired += 1,
            AexCause::Simulated => self.stats.aex.simulated += 1,
        }
        self.emit(Actor::Core(core), EventKind::Aex { cause });
        let th = &mut self.threads[t];
        th.host = HostState::Resume;
        th.pending_fix = match cause {
            AexCause::Fault(fi) => Some(fi),
            _ => None,
        };
        self.paired_exit(core, id, cause != AexCause::Paired)
    }

    /// Clears the physical core's registration and, with the hardware
    /// extension present, interrupts the sibling still inside the enclave.
    fn paired_exit(&mut self, core: usize, id: u32, cascade: bool) -> Result<(), MachineError> {
        let phys = self.cores[core].physical_id;
        let was = std::mem::replace(&mut self.registered[phys], false);
        if !(cascade && was && self.config.paired_aex_hw) {
            return Ok(());
        }
        if let Some(s) = self.cores[core].sibling_id {
            if self.cores[s].mode == Mode::Enclave(id) {
                self.aex(s, AexCause::Paired)?;
            }
        }
        Ok(())
    }

    pub fn eenter(&mut self, core: usize, entry: u64) -> Result<(), EnclaveError> {
        if self.cores[core].in_enclave() {
            return Err(EnclaveError::AlreadyInEnclave);
        }
        if !self.image.entry_points.contains(&entry) {
            return Err(EnclaveError::NotEntryPoint(entry));
        }
        let t = self.cores[core].thread.ok_or(EnclaveError::NotEntryPoint(entry))?;
        let th = &self.threads[t];
        if th.cssa >= th.nssa {
            return Err(EnclaveError::NoFreeSsaFrame);
        }
        let rsp = if th.cssa == 0 {
            th.stack_top
        } else {
            // Below the stack pointer of the interrupted context.
            let prev = self.ssa_frame_addr(t, th.cssa - 1);
            (self.ssa_read(prev + 8 * SSA_RSP) as u64).wrapping_sub(SSA_FRAME_BYTES)
        };
        let k = &mut self.cores[core];
        k.mode = Mode::Enclave(ENCLAVE_ID);
        k.regs = [0; NUM_REGS];
        k.rip = entry;
        k.rsp = rsp;
        self.flush_core_entries(core);
        self.stats.eenters += 1;
        self.emit(Actor::Core(core), EventKind::EEnter { entry });
        Ok(())
    }

    pub fn eresume(&mut self, core: usize) -> Result<(), EnclaveError> {
        if self.cores[core].in_enclave() {
            return Err(EnclaveError::AlreadyInEnclave);
        }
        let t = self.cores[core].thread.ok_or(EnclaveError::NoSavedContext)?;
        let cssa = self.threads[t].cssa;
        if cssa == 0 {
            return Err(EnclaveError::NoSavedContext);
        }
        let base = self.ssa_frame_addr(t, cssa - 1);
        if self.ssa_read(base + 8 * SSA_BLOCK) & 1 == 1 {
            self.stats.eresume_blocked += 1;
            self.emit(Actor::Core(core), EventKind::EResumeBlocked);
            return Err(EnclaveError::EresumeBlocked);
        }
        let mut regs = [0; NUM_REGS];
        for (i, r) in regs.iter_mut().enumerate() {
            *r = self.ssa_read(base + 8 * i as u64);
        }
        let rip = self.ssa_read(base + 8 * SSA_RIP) as u64;
        let rsp = self.ssa_read(base + 8 * SSA_RSP) as u64;
        let k = &mut self.cores[core];
        k.regs = regs;
        k.rip = rip;
        k.rsp = rsp;
        k.mode = Mode::Enclave(ENCLAVE_ID);
        self.threads[t].cssa = cssa - 1;
        self.flush_core_entries(core);
        self.stats.eresumes += 1;
        self.emit(Actor::Core(core), EventKind::EResume);
        Ok(())
    }

    /// Synchronous exit; the host runtime consumes the status in `r0`.
    pub fn eexit(&mut self, core: usize) -> Result<(), MachineError> {
        let Mode::Enclave(id) = self.cores[core].mode else {
            return Ok(());
        };
        let status = self.cores[core].regs[0];
        let k = &mut self.cores[core];
        k.mode = Mode::Untrusted;
        k.regs = [0; NUM_REGS];
        self.flush_core_entries(core);
        self.emit(Actor::Core(core), EventKind::EExit { status });
        if let Some(t) = self.cores[core].thread {
            self.on_eexit(t, status);
        }
        self.paired_exit(core, id, true)
    }

    /// Attacker/OS eviction of the EPC page backing `vpn`.
    pub fn evict_epc_page(&mut self, vpn: u64) -> Result<(), MachineError> {
        let Some(i) = self.image.page_index(vpn) else {
            return Ok(());
        };
        self.emit(Actor::Attacker, EventKind::EpcEvict { vpn });
        for c in 0..self.cores.len() {
            if self.cores[c].mode == Mode::Enclave(self.epcm[i].enclave_id) {
                self.aex(c, AexCause::Interrupt)?;
            }
        }
        let f = Frame::Epc(i as u32);
        for t in &mut self.tlbs {
            t.flush(|e| e.frame == f);
        }
        self.epcm[i].valid = false;
        self.ptes[i].present = false;
        Ok(())
    }

    /// Attacker write to one PTE field. TLBs are not flushed.
    pub fn set_pte(&mut self, vpn: u64, field: PteField, value: u64) {
        let Some(i) = self.image.page_index(vpn) else {
            return;
        };
        let p = &mut self.ptes[i];
        let b = value != 0;
        match field {
            PteField::Present => p.present = b,
            PteField::Writable => p.writable = b,
            PteField::Executable => p.executable = b,
            PteField::Accessed => p.accessed = b,
            PteField::Dirty => p.dirty = b,
            PteField::Frame => p.frame = value as u32,
        }
        self.emit(Actor::Attacker, EventKind::PteSet { vpn, field: field.name().to_string(), value });
    }

    /// Reads and clears A/D bits of `vpns`; returns pages with either set.
    pub fn poll_ad(&mut self, vpns: &[u64]) -> Vec<(u64, bool, bool)> {
        let mut out = Vec::new();
        for &vpn in vpns {
            if let Some(i) = self.image.page_index(vpn) {
                let p = &mut self.ptes[i];
                if p.accessed || p.dirty {
                    out.push((vpn, p.accessed, p.dirty));
                }
                p.accessed = false;
                p.dirty = false;
            }
        }
        self.emit(Actor::Attacker, EventKind::AdPoll { pages: vpns.len() });
        out
    }

    /// Untrusted access from a core outside the enclave; fills the shared
    /// TLB with an untrusted entry.
    pub fn untrusted_access(&mut self, core: usize, vpn: u64) {
        if self.cores[core].in_enclave() {
            return;
        }
        let phys = self.cores[core].physical_id;
        if self.tlbs[phys].lookup(vpn, Owner::Untrusted, core).is_none() {
            self.tlbs[phys].insert(TlbEntry {
                linear_page: vpn,
                frame: Frame::Untrusted(vpn),
                rights: Rights::RW,
                dirty_cached: true,
                owner: Owner::Untrusted,
                inserted_by: core,
            });
        }
        if self.verbose {
            self.emit(Actor::Attacker, EventKind::UntrustedAccess { vpn });
        }
    }

    /// Programs a timer interrupt that fires right after the next enclave
    /// instruction this core retires.
    pub fn arm_interrupt(&mut self, core: usize) {
        if let Some(k) = self.cores.get_mut(core) {
            k.interrupt_pending = true;
        }
    }

    pub fn interrupt(&mut self, core: usize) -> Result<(), MachineError> {
        self.aex(core, AexCause::Interrupt)
    }

    pub fn conflict(&mut self, core: usize) -> Result<(), MachineError> {
        if self.cores[core].tx.is_some() {
            self.abort_tx(core, AbortCause::Conflict)?;
        }
        Ok(())
    }

    /// Applies one non-attacker tick and advances the clock.
    pub fn apply(&mut self, tick: Tick) -> Result<(), MachineError> {
        let r = match tick {
            Tick::Step(c) => self.step(c),
            Tick::Interrupt(c) => self.interrupt(c),
            Tick::Conflict(c) => self.conflict(c),
            Tick::Attacker => Ok(()),
        };
        self.end_tick();
        r
    }

    pub(crate) fn end_tick(&mut self) {
        self.tick += 1;
        self.stats.ticks += 1;
    }

    pub fn step(&mut self, core: usize) -> Result<(), MachineError> {
        if core >= self.cores.len() {
            return Ok(());
        }
        if self.cores[core].in_enclave() {
            self.step_enclave(core)
        } else if let Some(t) = self.cores[core].thread {
            self.host_step(t);
            Ok(())
        } else {
            Ok(())
        }
    }

    pub fn thread_core(&self, t: usize) -> usize {
        self.threads[t].core
    }

    pub fn thread_cores(&self) -> Vec<usize> {
        self.threads.iter().map(|t| t.core).collect()
    }

    /// Hash of all semantic state: excludes the clock, the log and stats.
    pub fn state_hash(&self) -> u64 {
        let mut h = state_hasher();
        for t in &self.tlbs {
            t.hash_state(&mut h);
        }
        self.control_hash().hash(&mut h);
        h.finish()
    }

    /// Like `state_hash` without the TLBs. Fine as a merge key only while
    /// nobody edits PTEs or evicts pages, since then cached translations
    /// affect page walks but not instruction results.
    pub fn control_hash(&self) -> u64 {
        let mut h = state_hasher();
        self.cores.hash(&mut h);
        self.ptes.hash(&mut h);
        self.epcm.hash(&mut h);
        self.threads.hash(&mut h);
        self.registered.hash(&mut h);
        self.mem_hash.hash(&mut h);
        h.finish()
    }
}

#[cfg(test)]
mod tests;
