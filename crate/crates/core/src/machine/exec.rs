//! Instruction execution for cores in enclave mode, including the
//! transactional-memory paths.

use super::{Access, Actor, AexCause, EventKind, FaultInfo, Machine, MachineError, SEAL_KEY, SSA_FRAME_BYTES};
use crate::defense_sw::rtm::{AbortCause, Track, Transaction};
use crate::program::isa::{MemRef, Op, Operand, NUM_REGS};
use crate::program::PAGE_SIZE;

enum Flow {
    Next,
    Jump(u64),
    /// The instruction set rip itself (or left the enclave).
    Set,
}

enum Stop {
    Fault(FaultInfo),
    /// The active transaction aborted; rip already points at the handler.
    Aborted,
    Error(MachineError),
}

impl From<MachineError> for Stop {
    fn from(e: MachineError) -> Self {
        Stop::Error(e)
    }
}

impl Machine {
    pub(crate) fn step_enclave(&mut self, c: usize) -> Result<(), MachineError> {
        let rip = self.cores[c].rip;
        if let Err(fi) = self.translate(c, rip, Access::Execute) {
            return self.aex(c, AexCause::Fault(fi));
        }
        let op = self.image.op_at(rip);
        let next = rip.wrapping_add(self.image.instr_bytes);
        match self.exec(c, op, rip, next) {
            Ok(flow) => {
                match flow {
                    Flow::Next => self.cores[c].rip = next,
                    Flow::Jump(t) => self.cores[c].rip = t,
                    Flow::Set => {}
                }
                self.stats.retired += 1;
                if self.verbose {
                    self.emit(Actor::Core(c), EventKind::Retire { rip });
                }
                if std::mem::take(&mut self.cores[c].interrupt_pending) && self.cores[c].in_enclave() {
                    return self.aex(c, AexCause::Interrupt);
                }
                Ok(())
            }
            Err(Stop::Fault(fi)) => self.aex(c, AexCause::Fault(fi)),
            Err(Stop::Aborted) => Ok(()),
            Err(Stop::Error(e)) => Err(e),
        }
    }

    fn reg(&self, c: usize, r: u8) -> i64 {
        self.cores[c].regs[r as usize % NUM_REGS]
    }

    fn set_reg(&mut self, c: usize, r: u8, v: i64) {
        self.cores[c].regs[r as usize % NUM_REGS] = v;
    }

    /// Effective address of `m` on core `c`.
    pub fn ea(&self, c: usize, m: MemRef) -> u64 {
        let b = m.base.map_or(0, |r| self.reg(c, r));
        b.wrapping_add(m.disp) as u64
    }

    fn program_fault(&self, c: usize, rip: u64, reason: impl Into<String>) -> Stop {
        Stop::Error(MachineError::ProgramFault { core: c, rip, reason: reason.into() })
    }

    fn check_aligned(&self, c: usize, addr: u64) -> Result<(), Stop> {
        if !addr.is_multiple_of(8) {
            let rip = self.cores[c].rip;
            return Err(self.program_fault(c, rip, format!("misaligned access at {addr:#x}")));
        }
        Ok(())
    }

    fn line(&self, addr: u64) -> u64 {
        self.tsx.line_of(addr)
    }

    fn word_of(addr: u64) -> usize {
        ((addr % PAGE_SIZE) / 8) as usize
    }

    /// Aborts other cores' transactions that conflict with an access by `c`.
    fn conflicts(&mut self, c: usize, line: u64, write: bool) -> Result<(), MachineError> {
        for o in 0..self.cores.len() {
            if o == c {
                continue;
            }
            let hit = match &self.cores[o].tx {
                Some(tx) => {
                    if write {
                        tx.touches(line)
                    } else {
                        tx.writes_line(line)
                    }
                }
                None => false,
            };
            if hit {
                self.abort_tx(o, AbortCause::Conflict)?;
            }
        }
        Ok(())
    }

    pub(crate) fn abort_tx(&mut self, c: usize, cause: AbortCause) -> Result<(), MachineError> {
        let Some(tx) = self.cores[c].tx.take() else {
            return Ok(());
        };
        let k = &mut self.cores[c];
        k.regs = tx.saved_regs;
        k.rsp = tx.saved_rsp;
        k.rip = tx.abort_target;
        k.consecutive_aborts += 1;
        let n = k.consecutive_aborts;
        self.stats.tx_aborts.bump(cause);
        self.emit(Actor::Core(c), EventKind::TxAbort { cause });
        if n > self.tsx.abort_budget {
            return Err(MachineError::NonTermination { core: c, aborts: n });
        }
        Ok(())
    }

    fn abort_stop(&mut self, c: usize, cause: AbortCause) -> Stop {
        match self.abort_tx(c, cause) {
            Ok(()) => Stop::Aborted,
            Err(e) => Stop::Error(e),
        }
    }

    fn load(&mut self, c: usize, addr: u64) -> Result<i64, Stop> {
        self.check_aligned(c, addr)?;
        let frame = self.translate(c, addr, Access::Read).map_err(Stop::Fault)?;
        let line = self.line(addr);
        if let Some(tx) = self.cores[c].tx.as_mut() {
            if tx.track_read(line) == Track::Overflow {
                return Err(self.abort_stop(c, AbortCause::Capacity));
            }
            if let Some(v) = tx.buffered(addr) {
                return Ok(v);
            }
        } else {
            self.conflicts(c, line, false)?;
        }
        Ok(self.mem_read(frame, Self::word_of(addr)))
    }

    fn store(&mut self, c: usize, addr: u64, v: i64) -> Result<(), Stop> {
        self.check_aligned(c, addr)?;
        let frame = self.translate(c, addr, Access::Write).map_err(Stop::Fault)?;
        let line = self.line(addr);
        if let Some(tx) = self.cores[c].tx.as_mut() {
            if tx.track_write(line) == Track::Overflow {
                return Err(self.abort_stop(c, AbortCause::Capacity));
            }
            tx.buffer_write(addr, frame, v);
        } else {
            self.conflicts(c, line, true)?;
            self.mem_write(frame, Self::word_of(addr), v);
            if self.verbose {
                self.emit(Actor::Core(c), EventKind::MemWrite { addr, value: v });
            }
        }
        Ok(())
    }

    fn push(&mut self, c: usize, v: i64) -> Result<(), Stop> {
        let addr = self.cores[c].rsp.wrapping_sub(8);
        self.store(c, addr, v)?;
        self.cores[c].rsp = addr;
        Ok(())
    }

    fn pop(&mut self, c: usize) -> Result<i64, Stop> {
        let addr = self.cores[c].rsp;
        let v = self.load(c, addr)?;
        self.cores[c].rsp = addr.wrapping_add(8);
        Ok(v)
    }

    fn commit(&mut self, c: usize) -> Result<(), MachineError> {
        let tx = self.cores[c].tx.take().expect("active transaction");
        for &line in &tx.write_lines {
            self.conflicts(c, line, true)?;
        }
        for (&addr, &(frame, v)) in &tx.write_buf {
            self.mem_write(frame, Self::word_of(addr), v);
            if self.verbose {
                self.emit(Actor::Core(c), EventKind::MemWrite { addr, value: v });
            }
        }
        self.cores[c].consecutive_aborts = 0;
        self.stats.tx_commits += 1;
        self.emit(Actor::Core(c), EventKind::TxCommit { lines: tx.write_lines.len() });
        Ok(())
    }

    fn exec(&mut self, c: usize, op: Op, rip: u64, next: u64) -> Result<Flow, Stop> {
        match op {
            Op::LoadImm { dst, value } => self.set_reg(c, dst, value),
            Op::Alu { op, dst, src } => {
                let b = match src {
                    Operand::Reg(r) => self.reg(c, r),
                    Operand::Imm(v) => v,
                };
                let v = op.apply(self.reg(c, dst), b);
                self.set_reg(c, dst, v);
            }
            Op::Read { dst, mem } => {
                let v = self.load(c, self.ea(c, mem))?;
                self.set_reg(c, dst, v);
            }
            Op::Write { mem, src } => {
                let v = self.reg(c, src);
                self.store(c, self.ea(c, mem), v)?;
            }
            Op::BranchIfZero { reg, target } => {
                if self.reg(c, reg) == 0 {
                    return Ok(Flow::Jump(target));
                }
            }
            Op::BranchIfNonZero { reg, target } => {
                if self.reg(c, reg) != 0 {
                    return Ok(Flow::Jump(target));
                }
            }
            Op::Jump { target } => return Ok(Flow::Jump(target)),
            Op::Call { target } => {
                self.push(c, next as i64)?;
                return Ok(Flow::Jump(target));
            }
            Op::Ret => {
                let t = self.pop(c)?;
                return Ok(Flow::Jump(t as u64));
            }
            Op::Push { src } => {
                let v = self.reg(c, src);
                self.push(c, v)?;
            }
            Op::Pop { dst } => {
                let v = self.pop(c)?;
                self.set_reg(c, dst, v);
            }
            Op::EExit => {
                if self.cores[c].tx.is_some() {
                    return Err(self.abort_stop(c, AbortCause::Illegal));
                }
                self.cores[c].rip = next;
                self.eexit(c)?;
                return Ok(Flow::Set);
            }
            Op::XBegin { abort } => {
                if self.cores[c].tx.is_some() {
                    return Err(self.abort_stop(c, AbortCause::Illegal));
                }
                let k = &mut self.cores[c];
                let cap = self.tsx.write_capacity_for(k.tx_started);
                k.tx_started += 1;
                // The fallback path observes the registers as of xbegin.
                k.tx = Some(Transaction::begin(abort, k.regs, k.rsp, cap, self.tsx.read_capacity_lines));
                self.stats.tx_begins += 1;
                self.emit(Actor::Core(c), EventKind::TxBegin);
            }
            Op::XEnd => {
                if self.cores[c].tx.is_none() {
                    return Err(self.program_fault(c, rip, "xend outside a transaction"));
                }
                self.commit(c)?;
            }
            Op::Nop => {}
            Op::CmpXchg { dst, mem, expected, new } => {
                let addr = self.ea(c, mem);
                self.check_aligned(c, addr)?;
                let frame = self.translate(c, addr, Access::Write).map_err(Stop::Fault)?;
                let line = self.line(addr);
                let (exp, nv) = (self.reg(c, expected), self.reg(c, new));
                let w = Self::word_of(addr);
                let ok = if let Some(tx) = self.cores[c].tx.as_mut() {
                    if tx.track_write(line) == Track::Overflow {
                        return Err(self.abort_stop(c, AbortCause::Capacity));
                    }
                    let tx = self.cores[c].tx.as_ref().unwrap();
                    let cur = tx.buffered(addr).unwrap_or_else(|| self.mem_read(frame, w));
                    let ok = cur == exp;
                    if ok {
                        self.cores[c].tx.as_mut().unwrap().buffer_write(addr, frame, nv);
                    }
                    ok
                } else {
                    self.conflicts(c, line, true)?;
                    let ok = self.mem_read(frame, w) == exp;
                    if ok {
                        self.mem_write(frame, w, nv);
                        if self.verbose {
                            self.emit(Actor::Core(c), EventKind::MemWrite { addr, value: nv });
                        }
                    }
                    ok
                };
                self.set_reg(c, dst, ok as i64);
            }
            Op::ReadPhysCoreId { dst } => {
                let p = self.cores[c].physical_id as i64;
                self.set_reg(c, dst, p);
            }
            Op::ReadThreadSlot { dst } => {
                let t = self.cores[c].thread.unwrap_or(0) as i64;
                self.set_reg(c, dst, t);
            }
            Op::RegisterInterrupt => {
                let p = self.cores[c].physical_id;
                self.registered[p] = true;
                self.emit(Actor::Core(c), EventKind::Register { physical: p });
            }
            Op::SsaFrameAddr { dst, delta } => {
                let t = self.cores[c].thread.unwrap_or(0);
                let idx = self.threads[t].cssa as i64 + delta;
                let a = self.threads[t].ssa_base as i64 + idx * SSA_FRAME_BYTES as i64;
                self.set_reg(c, dst, a);
            }
            Op::RestoreContext { mem } => {
                let base = self.ea(c, mem);
                let mut w = [0i64; NUM_REGS + 2];
                for (i, slot) in w.iter_mut().enumerate() {
                    *slot = self.load(c, base + 8 * i as u64)?;
                }
                let k = &mut self.cores[c];
                k.regs.copy_from_slice(&w[..NUM_REGS]);
                k.rip = w[NUM_REGS] as u64;
                k.rsp = w[NUM_REGS + 1] as u64;
                return Ok(Flow::Set);
            }
            Op::SimulateAex => {
                self.cores[c].rip = next;
                self.aex(c, AexCause::Simulated)?;
                return Ok(Flow::Set);
            }
            Op::CallStub { vpn } => {
                self.translate(c, vpn * PAGE_SIZE, Access::Execute).map_err(Stop::Fault)?;
            }
            Op::EGetKey { dst } => {
                if self.cores[c].tx.is_some() {
                    return Err(self.abort_stop(c, AbortCause::Illegal));
                }
                self.set_reg(c, dst, SEAL_KEY);
            }
            Op::Invalid => return Err(self.program_fault(c, rip, "invalid instruction")),
        }
        Ok(Flow::Next)
    }
}
