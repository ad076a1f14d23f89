//! Attacker strategies over the page-table channels and their observation
//! traces.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::machine::{Access, FaultCause, FaultInfo, Pte, PteField};
use crate::program::RightsClass;

/// Pages the attacker re-arms at most this many times per run.
pub const MAX_ARMS: usize = 3;
/// Enclave exits after which the stepping strategies stop interrupting.
pub const STEP_BUDGET: usize = 256;
/// First untrusted page used for TLB thrashing; a multiple of any
/// power-of-two set count up to 2^20.
pub const THRASH_BASE_VPN: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackerAction {
    EvictPage(u64),
    SetPte { vpn: u64, field: PteField, value: u64 },
    PollAd(Vec<u64>),
    ProbeWalks,
    /// Untrusted accesses filling `n` ways of every set an enclave page
    /// maps to, issued from the HT sibling when it is free.
    SiblingThrash(usize),
    /// Arms a timer interrupt that fires after the core's next enclave
    /// instruction.
    InjectInterrupt(usize),
    NoOp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkKind {
    Walk,
    PteWrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    Fault(FaultInfo),
    /// Pages with a set accessed or dirty bit: (vpn, accessed, dirty).
    AdSnapshot(Vec<(u64, bool, bool)>),
    /// Enclave page-walk and PTE-write traffic since the last probe, in
    /// order.
    WalkSet(Vec<(u64, WalkKind)>),
    EnclaveExit(String),
    Timestamp(u64),
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::Fault(i) => {
                write!(f, "fault vpn={:#x} access={} cause={}", i.faulting_page, i.access.name(), i.cause.name())
            }
            Observation::AdSnapshot(v) => {
                write!(f, "ad")?;
                for (p, a, d) in v {
                    write!(f, " {p:#x}:{}{}", if *a { "A" } else { "-" }, if *d { "D" } else { "-" })?;
                }
                Ok(())
            }
            Observation::WalkSet(v) => {
                write!(f, "walks")?;
                for (p, k) in v {
                    write!(f, " {p:#x}{}", if *k == WalkKind::PteWrite { "w" } else { "" })?;
                }
                Ok(())
            }
            Observation::EnclaveExit(c) => write!(f, "exit {c}"),
            Observation::Timestamp(t) => write!(f, "time {t}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationTrace {
    pub items: Vec<Observation>,
}

impl ObservationTrace {
    pub fn push(&mut self, o: Observation) {
        self.items.push(o);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn exits(&self) -> usize {
        self.items.iter().filter(|o| matches!(o, Observation::EnclaveExit(_))).count()
    }

    pub fn faults_at(&self, vpn: u64) -> usize {
        self.items.iter().filter(|o| matches!(o, Observation::Fault(f) if f.faulting_page == vpn)).count()
    }

    pub fn rights_faults(&self) -> usize {
        self.items.iter().filter(|o| matches!(o, Observation::Fault(f) if f.cause == FaultCause::Rights)).count()
    }

    /// Index of the first difference, if any.
    pub fn first_divergence(&self, other: &ObservationTrace) -> Option<usize> {
        let n = self.items.len().min(other.items.len());
        (0..n).find(|&i| self.items[i] != other.items[i]).or((self.items.len() != other.items.len()).then_some(n))
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for o in &self.items {
            s.push_str(&o.to_string());
            s.push('\n');
        }
        s
    }
}

/// What the attacker knows when choosing actions: the public layout, the
/// untrusted page tables and its own past observations.
pub struct AttackView<'a> {
    pub tick: u64,
    /// Enclave pages in layout order with their rights class.
    pub pages: &'a [(u64, RightsClass)],
    pub target: Option<u64>,
    /// Cores hosting enclave threads.
    pub enclave_cores: &'a [usize],
    pub ptes: &'a dyn Fn(u64) -> Option<Pte>,
    pub tlb_ways: usize,
    pub trace: &'a ObservationTrace,
}

impl AttackView<'_> {
    fn pte(&self, vpn: u64) -> Option<Pte> {
        (self.ptes)(vpn)
    }

    fn class(&self, vpn: u64) -> Option<RightsClass> {
        self.pages.iter().find(|(v, _)| *v == vpn).map(|(_, c)| *c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Passive,
    PageFaultEvict,
    RightsReduce,
    AdPoller,
    WalkProber,
    SingleStepper,
    SiblingThrasher,
    Composite,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("unknown strategy `{0}`")]
pub struct UnknownStrategy(pub String);

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Passive,
        Strategy::PageFaultEvict,
        Strategy::RightsReduce,
        Strategy::AdPoller,
        Strategy::WalkProber,
        Strategy::SingleStepper,
        Strategy::SiblingThrasher,
        Strategy::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Passive => "passive",
            Strategy::PageFaultEvict => "page-fault-evict",
            Strategy::RightsReduce => "rights-reduce",
            Strategy::AdPoller => "ad-poller",
            Strategy::WalkProber => "walk-prober",
            Strategy::SingleStepper => "single-stepper",
            Strategy::SiblingThrasher => "sibling-thrasher",
            Strategy::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy, UnknownStrategy> {
        Strategy::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| UnknownStrategy(s.to_string()))
    }

    /// Actions for one attacker tick. Pure in the view.
    pub fn actions(self, v: &AttackView<'_>) -> Vec<AttackerAction> {
        match self {
            Strategy::Passive => vec![AttackerAction::NoOp],
            Strategy::PageFaultEvict => evict(v),
            Strategy::RightsReduce => reduce(v),
            Strategy::AdPoller => vec![poll(v)],
            Strategy::WalkProber => vec![AttackerAction::ProbeWalks],
            Strategy::SingleStepper => interrupts(v),
            Strategy::SiblingThrasher => vec![AttackerAction::SiblingThrash(v.tlb_ways), AttackerAction::ProbeWalks],
            Strategy::Composite => {
                let mut a = vec![AttackerAction::ProbeWalks, poll(v)];
                a.extend(evict(v));
                a.extend(reduce(v));
                a.push(AttackerAction::SiblingThrash(v.tlb_ways));
                a.extend(interrupts(v));
                a
            }
        }
    }

    /// The part of the trace that influences future actions.
    pub fn memo_key(self, trace: &ObservationTrace, target: Option<u64>) -> (usize, usize, usize) {
        let f = target.map_or(0, |t| trace.faults_at(t).min(MAX_ARMS));
        (f, trace.rights_faults().min(MAX_ARMS), trace.exits().min(STEP_BUDGET))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All strategies that act on the enclave.
pub fn builtin_strategies() -> Vec<Strategy> {
    Strategy::ALL.into_iter().filter(|s| *s != Strategy::Passive).collect()
}

fn evict(v: &AttackView<'_>) -> Vec<AttackerAction> {
    let Some(t) = v.target else {
        return Vec::new();
    };
    match v.pte(t) {
        Some(p) if p.present && v.trace.faults_at(t) < MAX_ARMS => vec![AttackerAction::EvictPage(t)],
        _ => Vec::new(),
    }
}

fn reduce(v: &AttackView<'_>) -> Vec<AttackerAction> {
    if v.trace.rights_faults() >= MAX_ARMS {
        return Vec::new();
    }
    let Some(t) = v.target else {
        return Vec::new();
    };
    if v.class(t) == Some(RightsClass::X) {
        return match v.pte(t) {
            Some(p) if p.executable => vec![AttackerAction::SetPte { vpn: t, field: PteField::Executable, value: 0 }],
            _ => Vec::new(),
        };
    }
    v.pages
        .iter()
        .filter(|(vpn, c)| *c == RightsClass::Rw && v.pte(*vpn).is_some_and(|p| p.writable))
        .map(|(vpn, _)| AttackerAction::SetPte { vpn: *vpn, field: PteField::Writable, value: 0 })
        .collect()
}

fn poll(v: &AttackView<'_>) -> AttackerAction {
    AttackerAction::PollAd(v.pages.iter().map(|(p, _)| *p).collect())
}

fn interrupts(v: &AttackView<'_>) -> Vec<AttackerAction> {
    if v.trace.exits() >= STEP_BUDGET {
        return Vec::new();
    }
    v.enclave_cores.iter().map(|&c| AttackerAction::InjectInterrupt(c)).collect()
}

/// Fault observation for tests and tools.
pub fn fault(vpn: u64, access: Access, cause: FaultCause) -> Observation {
    Observation::Fault(FaultInfo { faulting_page: vpn, access, cause })
}
