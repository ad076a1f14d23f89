//! Machine event log and its line-oriented text form.

use std::fmt;

use serde::Serialize;

use super::{Access, AexCause, FaultInfo};
use crate::defense_sw::rtm::AbortCause;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Actor {
    Core(usize),
    Host(usize),
    Attacker,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Core(c) => write!(f, "core{c}"),
            Actor::Host(t) => write!(f, "host{t}"),
            Actor::Attacker => write!(f, "attacker"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    /// Page walk of an enclave-mode translation.
    PageWalk { vpn: u64, access: Access },
    /// In-memory dirty-bit update on a TLB hit.
    PteWrite { vpn: u64 },
    Fault(FaultInfo),
    Aex { cause: AexCause },
    EEnter { entry: u64 },
    EResume,
    EResumeBlocked,
    EExit { status: i64 },
    TxBegin,
    TxCommit { lines: usize },
    TxAbort { cause: AbortCause },
    HostFix { vpn: u64, reloaded: bool },
    ThreadDone { thread: usize, status: i64 },
    ThreadFailed { thread: usize, reason: String },
    EpcEvict { vpn: u64 },
    PteSet { vpn: u64, field: String, value: u64 },
    AdPoll { pages: usize },
    UntrustedAccess { vpn: u64 },
    Register { physical: usize },
    /// Executed instruction address (verbose logs only).
    Retire { rip: u64 },
    /// Non-transactional or committed store (verbose logs only).
    MemWrite { addr: u64, value: i64 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PageWalk { .. } => "PageWalk",
            EventKind::PteWrite { .. } => "PteWrite",
            EventKind::Fault(_) => "Fault",
            EventKind::Aex { .. } => "Aex",
            EventKind::EEnter { .. } => "EEnter",
            EventKind::EResume => "EResume",
            EventKind::EResumeBlocked => "EResumeBlocked",
            EventKind::EExit { .. } => "EExit",
            EventKind::TxBegin => "TxBegin",
            EventKind::TxCommit { .. } => "TxCommit",
            EventKind::TxAbort { .. } => "TxAbort",
            EventKind::HostFix { .. } => "HostFix",
            EventKind::ThreadDone { .. } => "ThreadDone",
            EventKind::ThreadFailed { .. } => "ThreadFailed",
            EventKind::EpcEvict { .. } => "EpcEvict",
            EventKind::PteSet { .. } => "PteSet",
            EventKind::AdPoll { .. } => "AdPoll",
            EventKind::UntrustedAccess { .. } => "UntrustedAccess",
            EventKind::Register { .. } => "Register",
            EventKind::Retire { .. } => "Retire",
            EventKind::MemWrite { .. } => "MemWrite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Event {
    pub tick: u64,
    pub actor: Actor,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.tick, self.actor, self.kind.name())?;
        match &self.kind {
            EventKind::PageWalk { vpn, access } => write!(f, " vpn={vpn:#x} access={}", access.name()),
            EventKind::PteWrite { vpn } => write!(f, " vpn={vpn:#x}"),
            EventKind::Fault(i) => {
                write!(f, " vpn={:#x} access={} cause={}", i.faulting_page, i.access.name(), i.cause.name())
            }
            EventKind::Aex { cause } => write!(f, " cause={}", cause.name()),
            EventKind::EEnter { entry } => write!(f, " entry={entry:#x}"),
            EventKind::EExit { status } => write!(f, " status={status}"),
            EventKind::TxCommit { lines } => write!(f, " lines={lines}"),
            EventKind::TxAbort { cause } => write!(f, " cause={}", cause.name()),
            EventKind::HostFix { vpn, reloaded } => write!(f, " vpn={vpn:#x} reloaded={reloaded}"),
            EventKind::ThreadDone { thread, status } => write!(f, " thread={thread} status={status}"),
            EventKind::ThreadFailed { thread, reason } => write!(f, " thread={thread} reason={reason}"),
            EventKind::EpcEvict { vpn } => write!(f, " vpn={vpn:#x}"),
            EventKind::PteSet { vpn, field, value } => write!(f, " vpn={vpn:#x} field={field} value={value}"),
            EventKind::AdPoll { pages } => write!(f, " pages={pages}"),
            EventKind::UntrustedAccess { vpn } => write!(f, " vpn={vpn:#x}"),
            EventKind::Register { physical } => write!(f, " physical={physical}"),
            EventKind::Retire { rip } => write!(f, " rip={rip:#x}"),
            EventKind::MemWrite { addr, value } => write!(f, " addr={addr:#x} value={value}"),
            EventKind::EResume | EventKind::EResumeBlocked | EventKind::TxBegin => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn extend(&mut self, es: impl IntoIterator<Item = Event>) {
        self.events.extend(es);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::with_capacity(self.events.len() * 32);
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }
}
