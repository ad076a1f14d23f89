//! Untrusted host runtime: drives enclave entry, resumption and fault
//! servicing for each enclave thread.

use serde::Serialize;

use super::{Actor, EnclaveError, EventKind, FaultInfo, Machine, PAGE_SIZE};
use crate::program::ThreadInfo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum HostState {
    /// Next step enters the thread's entry point.
    Ready,
    Inside,
    /// Next step services a pending fault, else calls eresume.
    Resume,
    /// eresume was refused; next step enters the interrupt handler.
    EnterHandler,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum CallKind {
    Ecall,
    Handler,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ThreadStatus {
    Running,
    Done(i64),
    Failed { code: i64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ThreadState {
    pub slot: usize,
    pub core: usize,
    pub entry: u64,
    pub handler: Option<u64>,
    pub stack_top: u64,
    pub ssa_base: u64,
    pub nssa: usize,
    pub cssa: usize,
    pub host: HostState,
    pub calls: Vec<CallKind>,
    pub pending_fix: Option<FaultInfo>,
    pub status: ThreadStatus,
}

impl ThreadState {
    pub fn new(slot: usize, core: usize, info: &ThreadInfo) -> Self {
        ThreadState {
            slot,
            core,
            entry: info.entry,
            handler: info.handler,
            stack_top: info.stack_top,
            ssa_base: info.ssa_base,
            nssa: info.nssa,
            cssa: 0,
            host: HostState::Ready,
            calls: Vec::new(),
            pending_fix: None,
            status: ThreadStatus::Running,
        }
    }
}

impl Machine {
    pub(crate) fn fail_thread(&mut self, t: usize, code: i64, reason: impl Into<String>) {
        let reason = reason.into();
        let th = &mut self.threads[t];
        th.host = HostState::Finished;
        th.status = ThreadStatus::Failed { code, reason: reason.clone() };
        self.emit(Actor::Host(t), EventKind::ThreadFailed { thread: t, reason });
    }

    /// One action of the host runtime for thread `t` whose core is outside
    /// the enclave.
    pub(crate) fn host_step(&mut self, t: usize) {
        let core = self.threads[t].core;
        match self.threads[t].host {
            HostState::Ready => {
                let entry = self.threads[t].entry;
                match self.eenter(core, entry) {
                    Ok(()) => {
                        self.threads[t].calls.push(CallKind::Ecall);
                        self.threads[t].host = HostState::Inside;
                    }
                    Err(e) => self.fail_thread(t, -1, e.to_string()),
                }
            }
            HostState::Resume => {
                if let Some(fi) = self.threads[t].pending_fix.take() {
                    self.fix_fault(t, fi);
                    return;
                }
                match self.eresume(core) {
                    Ok(()) => self.threads[t].host = HostState::Inside,
                    Err(EnclaveError::EresumeBlocked) => self.threads[t].host = HostState::EnterHandler,
                    Err(e) => self.fail_thread(t, -1, e.to_string()),
                }
            }
            HostState::EnterHandler => {
                let Some(h) = self.threads[t].handler else {
                    self.fail_thread(t, -1, "eresume blocked and no interrupt handler");
                    return;
                };
                match self.eenter(core, h) {
                    Ok(()) => {
                        self.stats.handler_entries += 1;
                        self.threads[t].calls.push(CallKind::Handler);
                        self.threads[t].host = HostState::Inside;
                    }
                    Err(e) => self.fail_thread(t, -1, e.to_string()),
                }
            }
            HostState::Inside | HostState::Finished => {}
        }
    }

    /// Restores the mapping of a faulting page the way a benign OS would:
    /// original PTE rights, reloading the EPC page if it was evicted.
    fn fix_fault(&mut self, t: usize, fi: FaultInfo) {
        let Some(i) = self.image.page_index(fi.faulting_page) else {
            self.fail_thread(t, -1, format!("unrecoverable fault at page {:#x}", fi.faulting_page * PAGE_SIZE));
            return;
        };
        let rights = self.image.pages[i].rights;
        if !fi.access.allowed_by(rights) {
            self.fail_thread(t, -1, format!("{} access to page {:#x} not permitted", fi.access.name(), fi.faulting_page));
            return;
        }
        let reloaded = !self.epcm[i].valid;
        self.epcm[i].valid = true;
        let p = &mut self.ptes[i];
        p.present = true;
        p.writable = rights.w;
        p.executable = rights.x;
        p.frame = i as u32;
        self.stats.host_fixes += 1;
        self.emit(Actor::Host(t), EventKind::HostFix { vpn: fi.faulting_page, reloaded });
    }

    pub(crate) fn on_eexit(&mut self, t: usize, status: i64) {
        match self.threads[t].calls.pop() {
            Some(CallKind::Ecall) | None => {
                if status == 0 {
                    let th = &mut self.threads[t];
                    th.host = HostState::Finished;
                    th.status = ThreadStatus::Done(0);
                    self.emit(Actor::Host(t), EventKind::ThreadDone { thread: t, status });
                } else {
                    self.fail_thread(t, status, format!("ecall returned {status}"));
                }
            }
            Some(CallKind::Handler) => {
                if status == 0 {
                    self.threads[t].host = HostState::Resume;
                } else {
                    self.fail_thread(t, status, format!("interrupt handler returned {status}"));
                }
            }
        }
    }
}
