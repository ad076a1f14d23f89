//! Exhaustive interleaving check of the sibling rendezvous on one physical
//! core with two logical cores.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::defense_hw::{self, HwOptions, PagePick, PreloadSpec, DONE_WORD, RENDEZVOUS, RT_PAGE};
use crate::defense_sw::TsxConfig;
use crate::machine::event::{Actor, EventKind};
use crate::machine::{Machine, MachineError, PlatformConfig, ThreadStatus, Tick};
use crate::program::isa::Op;
use crate::program::{scenarios, Image, LoadError, PAGE_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendezvousConfig {
    /// Steps each logical core may take, counted from its first arrival at
    /// the rendezvous. A step is one instruction that touches the shared
    /// runtime page, registers for interrupts or leaves the enclave (or one
    /// host action), together with the thread-private instructions leading
    /// up to it.
    pub depth_per_core: usize,
    pub interrupts: bool,
    /// Interrupts injected per schedule, each at any step of either core.
    pub max_interrupts: u8,
    /// Release the lock on success (off reproduces the original listing).
    pub release_on_success: bool,
    pub paired_aex_hw: bool,
    /// Maximum number of distinct states visited.
    pub budget: u64,
    /// Ticks a frontier state gets to finish under round-robin scheduling
    /// before it counts as stuck.
    pub liveness_ticks: u64,
    /// Preload the whole (tiny) enclave instead of nothing.
    pub preload_all: bool,
    /// Run thread-private instructions together with the next step instead
    /// of scheduling every instruction separately.
    pub coalesce_private: bool,
    /// Whether the second thread ever enters the enclave.
    pub peer_enters: bool,
}

impl Default for RendezvousConfig {
    fn default() -> Self {
        RendezvousConfig {
            depth_per_core: 40,
            interrupts: true,
            max_interrupts: 1,
            release_on_success: true,
            paired_aex_hw: true,
            budget: 20_000_000,
            liveness_ticks: 5_000,
            preload_all: false,
            coalesce_private: true,
            peer_enters: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendezvousReport {
    pub states: u64,
    pub frontier: u64,
    pub successes: u64,
    /// A success without a fresh peer id-write after this thread's erase.
    pub unsound: Option<String>,
    /// A success before the protected work is done while the peer had left
    /// the enclave since its id-write and this thread was not interrupted
    /// in between.
    pub not_coresident: Option<String>,
    /// An interrupt-free schedule after which round-robin execution does
    /// not terminate.
    pub deadlock: Option<String>,
    /// The same after a schedule with interrupts. Siblings can keep
    /// evicting each other with the handler's `eexit`.
    pub livelock_after_interrupt: Option<String>,
}

impl RendezvousReport {
    pub fn sound(&self) -> bool {
        self.unsound.is_none() && self.not_coresident.is_none()
    }
}

/// The two-thread runtime around an empty body on one HT physical core.
pub fn micro_image(cfg: &RendezvousConfig) -> Result<(PlatformConfig, Image), LoadError> {
    let platform = PlatformConfig {
        hyperthreading: true,
        physical_cores: 1,
        tlb_sets: 16,
        tlb_ways: 4,
        paired_aex_hw: cfg.paired_aex_hw,
        ..PlatformConfig::default()
    };
    let preload = PreloadSpec {
        pages: if cfg.preload_all { PagePick::All } else { PagePick::Named(Vec::new()) },
        rw_read_only: false,
    };
    let opts = HwOptions { hyperthreading: true, preload };
    let rz = defense_hw::rendezvous_asm(cfg.release_on_success);
    let (_, img) = defense_hw::link_with_rendezvous(&scenarios::empty_body(), &opts, &platform, &rz)?;
    Ok((platform, img))
}

/// Per thread, relative to its own last erase of the peer's id.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
struct Monitor {
    peer_wrote: [bool; 2],
    peer_left: [bool; 2],
}

#[derive(Clone, Copy)]
struct Labels {
    erase: u64,
    setid: u64,
    success: u64,
}

#[derive(Clone)]
struct Node {
    m: Machine,
    mon: Monitor,
    /// Steps and interrupts used per core.
    used: [usize; 4],
    path: Vec<Tick>,
}

struct Search<'a> {
    cfg: &'a RendezvousConfig,
    labels: Labels,
    shared_vpn: u64,
    /// Steps and interrupts used at each visit of a state, Pareto-minimal
    /// only.
    seen: HashMap<(u64, Monitor), Vec<[usize; 4]>>,
    report: RendezvousReport,
    /// Event log kept by `replay`.
    events: Option<Vec<String>>,
}

fn label(img: &Image, l: &str) -> Result<u64, EvalError> {
    img.symbol(&format!("{RENDEZVOUS}.{l}"))
        .ok_or_else(|| EvalError::Machine(MachineError::Internal(format!("rendezvous label `{l}` missing"))))
}

const LOCAL_RUN_LIMIT: usize = 10_000;

/// Whether core `c`'s next instruction only touches its own registers or
/// memory other than the shared runtime page.
fn is_local(m: &Machine, c: usize, shared_vpn: u64) -> bool {
    let off_shared = |mem| m.ea(c, mem) / PAGE_SIZE != shared_vpn;
    match m.image.op_at(m.cores[c].rip) {
        Op::LoadImm { .. }
        | Op::Alu { .. }
        | Op::BranchIfZero { .. }
        | Op::BranchIfNonZero { .. }
        | Op::Jump { .. }
        | Op::Nop
        | Op::ReadPhysCoreId { .. }
        | Op::ReadThreadSlot { .. }
        | Op::SsaFrameAddr { .. }
        | Op::Call { .. }
        | Op::Ret
        | Op::Push { .. }
        | Op::Pop { .. } => true,
        Op::Read { mem, .. } | Op::Write { mem, .. } | Op::RestoreContext { mem } => off_shared(mem),
        _ => false,
    }
}

fn describe(path: &[Tick]) -> String {
    if path.is_empty() {
        return "(at the rendezvous)".into();
    }
    let s: Vec<String> = path
        .iter()
        .map(|t| match t {
            Tick::Step(c) => format!("s{c}"),
            Tick::Interrupt(c) => format!("i{c}"),
            Tick::Conflict(c) => format!("c{c}"),
            Tick::Attacker => "a".into(),
        })
        .collect();
    s.join(" ")
}

impl Search<'_> {
    /// Applies a tick and updates the monitor from the new events.
    fn apply(&mut self, n: &mut Node, t: Tick) -> Result<(), MachineError> {
        let r = n.m.apply(t);
        n.path.push(t);
        let mut unsound = false;
        let mut left = false;
        for e in &n.m.log.events {
            let Actor::Core(c) = e.actor else { continue };
            let (me, peer) = (c & 1, (c & 1) ^ 1);
            match e.kind {
                EventKind::Retire { rip } if rip == self.labels.erase => {
                    n.mon.peer_wrote[me] = false;
                    n.mon.peer_left[me] = false;
                }
                EventKind::Retire { rip } if rip == self.labels.setid => {
                    n.mon.peer_wrote[peer] = true;
                    n.mon.peer_left[peer] = false;
                }
                EventKind::Retire { rip } if rip == self.labels.success => {
                    self.report.successes += 1;
                    unsound |= !n.mon.peer_wrote[me];
                    left |= n.mon.peer_left[me] && n.m.peek_symbol(RT_PAGE, DONE_WORD) == Some(0);
                }
                EventKind::Aex { .. } | EventKind::EExit { .. } => {
                    n.mon.peer_left[peer] = true;
                    n.mon.peer_left[me] = false;
                }
                _ => {}
            }
        }
        if let Some(log) = &mut self.events {
            log.extend(n.m.log.events.iter().map(|e| e.to_string()));
        }
        n.m.log.events.clear();
        if unsound && self.report.unsound.is_none() {
            self.report.unsound = Some(describe(&n.path));
        }
        if left && self.report.not_coresident.is_none() {
            self.report.not_coresident = Some(describe(&n.path));
        }
        r
    }

    /// Runs core `c` up to and including its next step.
    fn step(&mut self, n: &mut Node, c: usize) -> Result<(), MachineError> {
        for _ in 0..LOCAL_RUN_LIMIT {
            let local =
                self.cfg.coalesce_private && n.m.cores[c].in_enclave() && is_local(&n.m, c, self.shared_vpn);
            let r = self.apply(n, Tick::Step(c));
            if !local || r.is_err() || !n.m.cores[c].in_enclave() {
                return r;
            }
            n.path.pop();
        }
        Err(MachineError::Internal(format!("core {c} ran {LOCAL_RUN_LIMIT} register-only instructions in a row")))
    }

    fn choices(&self, n: &Node) -> Vec<Tick> {
        let mut v = Vec::new();
        for c in 0..if self.cfg.peer_enters { 2 } else { 1 } {
            let running = n.m.threads[c].status == ThreadStatus::Running;
            if !running || n.used[c] >= self.cfg.depth_per_core {
                continue;
            }
            v.push(Tick::Step(c));
            if self.cfg.interrupts && n.m.cores[c].in_enclave() && n.used[2] + n.used[3] < self.cfg.max_interrupts as usize {
                v.push(Tick::Interrupt(c));
            }
        }
        v
    }

    fn live(&mut self, n: &Node) -> Result<(), MachineError> {
        let interrupted = n.used[2] + n.used[3] > 0;
        let slot = if interrupted { &self.report.livelock_after_interrupt } else { &self.report.deadlock };
        if n.m.terminated() || slot.is_some() {
            return Ok(());
        }
        let mut m = n.m.clone();
        m.set_verbose(false);
        for k in 0..self.cfg.liveness_ticks {
            if m.terminated() {
                return Ok(());
            }
            m.apply(Tick::Step((k % 2) as usize))?;
            m.log.events.clear();
        }
        if !m.terminated() {
            let slot = if interrupted { &mut self.report.livelock_after_interrupt } else { &mut self.report.deadlock };
            *slot = Some(describe(&n.path));
        }
        Ok(())
    }

    fn run(&mut self, root: Node) -> Result<(), EvalError> {
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            // Reaching a state with no more steps used per core than before
            // can only repeat what that visit explored.
            let seen = self.seen.entry((n.m.control_hash(), n.mon)).or_default();
            let le = |a: &[usize; 4], b: &[usize; 4]| a.iter().zip(b).all(|(x, y)| x <= y);
            if seen.iter().any(|o| le(o, &n.used)) {
                continue;
            }
            seen.retain(|o| !le(&n.used, o));
            seen.push(n.used);
            self.report.states += 1;
            if self.report.states > self.cfg.budget {
                return Err(EvalError::BudgetExceeded { budget: self.cfg.budget });
            }
            let cs = self.choices(&n);
            let interrupted = n.used[2] + n.used[3] > 0;
            if cs.is_empty() {
                self.report.frontier += 1;
            }
            // Spinning cores revisit states and get pruned before reaching
            // the frontier, so every interrupt-free state is checked.
            if cs.is_empty() || !interrupted {
                self.live(&n)?;
            }
            if cs.is_empty() {
                continue;
            }
            for t in cs.into_iter().rev() {
                let mut next = n.clone();
                match t {
                    Tick::Step(c) => {
                        next.used[c] += 1;
                        self.step(&mut next, c)?;
                    }
                    Tick::Interrupt(c) => {
                        next.used[2 + c] += 1;
                        self.apply(&mut next, t)?;
                    }
                    _ => self.apply(&mut next, t)?,
                }
                stack.push(next);
            }
        }
        Ok(())
    }
}

fn internal(msg: &str) -> EvalError {
    EvalError::Machine(MachineError::Internal(msg.into()))
}

/// The search state after both cores have reached the rendezvous.
fn setup(cfg: &RendezvousConfig) -> Result<(Search<'_>, Node), EvalError> {
    let (platform, img) = micro_image(cfg).map_err(|e| MachineError::Internal(e.to_string()))?;
    let labels = Labels { erase: label(&img, "erase")?, setid: label(&img, "setid")?, success: label(&img, "success")? };
    let entry = img.function(RENDEZVOUS).map(|f| f.start).ok_or_else(|| internal("rendezvous missing"))?;
    let shared_vpn = img.vpn_of(RT_PAGE).ok_or_else(|| internal("runtime page missing"))?;
    let mut m = Machine::new(platform, TsxConfig::default(), Arc::new(img), &[0, 1], &[])?;
    m.set_verbose(true);
    let mut s = Search { cfg, labels, shared_vpn, seen: HashMap::new(), report: RendezvousReport::default(), events: None };
    let mut root = Node { m, mon: Monitor::default(), used: [0; 4], path: Vec::new() };
    // Up to the rendezvous the threads share nothing but the `done` flag,
    // which stays clear until one of them has passed it.
    for c in 0..if cfg.peer_enters { 2 } else { 1 } {
        let mut n = 0;
        while !(root.m.cores[c].in_enclave() && root.m.cores[c].rip == entry) {
            if n == cfg.liveness_ticks {
                return Err(internal(&format!("core {c} never reached the rendezvous")));
            }
            s.apply(&mut root, Tick::Step(c))?;
            n += 1;
        }
    }
    root.path.clear();
    Ok((s, root))
}

pub fn explore_rendezvous(cfg: &RendezvousConfig) -> Result<RendezvousReport, EvalError> {
    let (mut s, root) = setup(cfg)?;
    s.run(root)?;
    Ok(s.report)
}

/// Re-runs a schedule as printed in a report (`s0 i1 ...`, starting at the
/// rendezvous) and returns the monitor verdicts with the event log.
pub fn replay(cfg: &RendezvousConfig, path: &str) -> Result<(RendezvousReport, Vec<String>), EvalError> {
    let (mut s, mut n) = setup(cfg)?;
    s.events = Some(Vec::new());
    for tok in path.split_whitespace() {
        let core = tok.get(1..).and_then(|c| c.parse::<usize>().ok()).filter(|&c| c < 2);
        match (tok.chars().next(), core) {
            (Some('s'), Some(c)) => s.step(&mut n, c)?,
            (Some('i'), Some(c)) => s.apply(&mut n, Tick::Interrupt(c))?,
            _ => return Err(internal(&format!("bad schedule token `{tok}`"))),
        }
    }
    let events = s.events.take().unwrap_or_default();
    Ok((s.report, events))
}
