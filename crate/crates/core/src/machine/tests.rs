use std::sync::Arc;

use super::*;
use crate::program::{asm, load};

const SRC: &str = "
.nssa 2
.entry main
.thread main
.func main
  loadi r1, 5
  write [data], r1
  read r2, [data+8]
  write [data+16], r2
  loadi r0, 0
  eexit
.page data rw
.word 1 7
.page table ro
";

fn machine(src: &str, config: PlatformConfig) -> Machine {
    let p = asm::parse(src).unwrap();
    let img = Arc::new(load(&p, &config).unwrap());
    let n = img.threads.len();
    Machine::new(config, TsxConfig::default(), img, &(0..n).collect::<Vec<_>>(), &[]).unwrap()
}

fn run(m: &mut Machine, max: usize) {
    for _ in 0..max {
        if m.terminated() {
            return;
        }
        let cores = m.thread_cores();
        for c in cores {
            m.apply(Tick::Step(c)).unwrap();
        }
    }
    panic!("did not terminate");
}

#[test]
fn runs_to_completion() {
    let mut m = machine(SRC, PlatformConfig::default());
    run(&mut m, 100);
    assert_eq!(m.peek_symbol("data", 2), Some(7));
    assert_eq!(m.threads[0].status, ThreadStatus::Done(0));
    assert_eq!(m.threads[0].cssa, 0);
}

#[test]
fn tlb_hit_emits_nothing() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let data = m.image.symbol("data").unwrap();
    m.translate(0, data, Access::Read).unwrap();
    let n = m.log.len();
    m.translate(0, data + 8, Access::Read).unwrap();
    assert_eq!(m.log.len(), n);
}

#[test]
fn non_present_code_faults() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let vpn = m.image.symbol("main").unwrap() / PAGE_SIZE;
    m.set_pte(vpn, PteField::Present, 0);
    let err = m.translate(0, vpn * PAGE_SIZE, Access::Execute).unwrap_err();
    assert_eq!(err, FaultInfo { faulting_page: vpn, access: Access::Execute, cause: FaultCause::NotPresent });
}

#[test]
fn pte_rights_fault_despite_epcm_write() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let vpn = m.image.vpn_of("data").unwrap();
    m.set_pte(vpn, PteField::Writable, 0);
    let err = m.translate(0, vpn * PAGE_SIZE, Access::Write).unwrap_err();
    assert_eq!(err.cause, FaultCause::Rights);
}

#[test]
fn pte_beyond_epcm_rights_is_a_mismatch() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let vpn = m.image.vpn_of("table").unwrap();
    m.set_pte(vpn, PteField::Writable, 1);
    let err = m.translate(0, vpn * PAGE_SIZE, Access::Read).unwrap_err();
    assert_eq!(err.cause, FaultCause::EpcmMismatch);
}

#[test]
fn remap_to_wrong_frame_is_a_mismatch() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let vpn = m.image.vpn_of("table").unwrap();
    let other = m.image.page_index(m.image.vpn_of("data").unwrap()).unwrap();
    m.set_pte(vpn, PteField::Frame, other as u64);
    let err = m.translate(0, vpn * PAGE_SIZE, Access::Read).unwrap_err();
    assert_eq!(err.cause, FaultCause::EpcmMismatch);
}

#[test]
fn dirty_bit_is_written_once() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    let data = m.image.symbol("data").unwrap();
    m.translate(0, data, Access::Read).unwrap();
    let count = |m: &Machine| m.log.count(|k| matches!(k, EventKind::PteWrite { .. }));
    m.translate(0, data, Access::Write).unwrap();
    assert_eq!(count(&m), 1);
    m.translate(0, data + 8, Access::Write).unwrap();
    assert_eq!(count(&m), 1);
    // Clearing A/D does not re-arm the cached bit.
    m.poll_ad(&[data / PAGE_SIZE]);
    m.translate(0, data, Access::Write).unwrap();
    assert_eq!(count(&m), 1);
    assert!(!m.ptes[m.image.page_index(data / PAGE_SIZE).unwrap()].dirty);
}

#[test]
fn interrupt_saves_and_resume_restores() {
    let mut m = machine(SRC, PlatformConfig::default());
    for _ in 0..3 {
        m.apply(Tick::Step(0)).unwrap();
    }
    let rip = m.cores[0].rip;
    let r1 = m.cores[0].regs[1];
    m.apply(Tick::Interrupt(0)).unwrap();
    assert!(!m.cores[0].in_enclave());
    assert_eq!(m.cores[0].regs, [0; NUM_REGS]);
    let base = m.ssa_frame_addr(0, 0);
    assert_eq!(m.peek_word(base + 8 * SSA_RIP), Some(rip as i64));
    assert_eq!(m.threads[0].cssa, 1);
    assert!(m.tlbs[0].entries().all(|e| e.owner == Owner::Untrusted));
    m.apply(Tick::Step(0)).unwrap();
    assert!(m.cores[0].in_enclave());
    assert_eq!((m.cores[0].rip, m.cores[0].regs[1]), (rip, r1));
    run(&mut m, 100);
    assert_eq!(m.peek_symbol("data", 2), Some(7));
}

#[test]
fn interrupt_outside_enclave_is_a_no_op() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Interrupt(0)).unwrap();
    assert!(m.log.is_empty());
}

#[test]
fn full_ssa_stack_refuses_entry() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.threads[0].cssa = m.threads[0].nssa;
    let entry = m.threads[0].entry;
    assert_eq!(m.eenter(0, entry), Err(EnclaveError::NoFreeSsaFrame));
}

#[test]
fn non_entry_point_is_rejected() {
    let mut m = machine(SRC, PlatformConfig::default());
    let entry = m.threads[0].entry;
    assert_eq!(m.eenter(0, entry + 64), Err(EnclaveError::NotEntryPoint(entry + 64)));
}

#[test]
fn block_bit_refuses_resume() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Interrupt(0)).unwrap();
    let base = m.ssa_frame_addr(0, 0);
    m.ssa_write(base + 8 * SSA_BLOCK, 1);
    let h = m.state_hash();
    assert_eq!(m.eresume(0), Err(EnclaveError::EresumeBlocked));
    assert_eq!(m.state_hash(), h);
    // Without a handler the host gives up.
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Step(0)).unwrap();
    assert!(matches!(m.threads[0].status, ThreadStatus::Failed { .. }));
}

#[test]
fn eviction_of_running_enclave_exits_first() {
    let mut m = machine(SRC, PlatformConfig::default());
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Step(0)).unwrap();
    let vpn = m.image.vpn_of("data").unwrap();
    m.evict_epc_page(vpn).unwrap();
    let kinds: Vec<&str> = m.log.iter().map(|e| e.kind.name()).collect();
    let ev = kinds.iter().position(|k| *k == "EpcEvict").unwrap();
    assert_eq!(kinds[ev + 1], "Aex");
    assert!(!m.cores[0].in_enclave());
    // The next access faults and is serviced by the host.
    run(&mut m, 100);
    assert_eq!(m.log.count(|k| matches!(k, EventKind::HostFix { reloaded: true, .. })), 1);
    assert_eq!(m.peek_symbol("data", 2), Some(7));
}

#[test]
fn eviction_of_idle_enclave_is_silent() {
    let mut m = machine(SRC, PlatformConfig::default());
    let vpn = m.image.vpn_of("table").unwrap();
    m.evict_epc_page(vpn).unwrap();
    assert_eq!(m.log.count(|k| matches!(k, EventKind::Aex { .. })), 0);
    assert!(!m.epcm[m.image.page_index(vpn).unwrap()].valid);
}

#[test]
fn untrusted_entries_share_sets() {
    let mut m = machine(SRC, PlatformConfig { tlb_sets: 1, tlb_ways: 2, ..PlatformConfig::default() });
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Step(0)).unwrap();
    m.apply(Tick::Interrupt(0)).unwrap();
    m.untrusted_access(0, 1);
    m.untrusted_access(0, 2);
    assert!(m.tlbs[0].entries().all(|e| e.owner == Owner::Untrusted));
    assert_eq!(m.tlbs[0].len(), 2);
}

#[test]
fn ht_sibling_shares_the_tlb() {
    let c = PlatformConfig::with_ht(true);
    assert_eq!(c.logical_cores(), 4);
    assert_eq!((c.physical_of(1), c.sibling_of(1)), (0, Some(0)));
    assert_eq!(PlatformConfig::default().tlb_entries(), 1536);
}

#[test]
fn state_hash_ignores_clock() {
    let mut a = machine(SRC, PlatformConfig::default());
    let b = a.clone();
    a.apply(Tick::Attacker).unwrap();
    assert_eq!(a.state_hash(), b.state_hash());
    a.apply(Tick::Step(0)).unwrap();
    assert_ne!(a.state_hash(), b.state_hash());
}

#[test]
fn determinism() {
    let mut a = machine(SRC, PlatformConfig::default());
    let mut b = machine(SRC, PlatformConfig::default());
    run(&mut a, 100);
    run(&mut b, 100);
    assert_eq!(a.log, b.log);
}

#[test]
fn config_validation() {
    assert!(PlatformConfig::default().validate().is_ok());
    let bad = PlatformConfig { instructions_per_code_page: 3, ..PlatformConfig::default() };
    assert_eq!(bad.validate(), Err(ConfigError::BadCodePage));
}

const TX: &str = "
.entry main
.thread main
.func main
retry:
  xbegin fallback
  loadi r1, 9
  write [data], r1
  read r2, [data]
  write [data+8], r2
  xend
  loadi r0, 0
  eexit
fallback:
  jmp retry
.page data rw
";

#[test]
fn transaction_buffers_until_commit() {
    let mut m = machine(TX, PlatformConfig::default());
    for _ in 0..4 {
        m.apply(Tick::Step(0)).unwrap();
    }
    assert_eq!(m.peek_symbol("data", 0), Some(0));
    run(&mut m, 100);
    assert_eq!(m.peek_symbol("data", 1), Some(9));
    assert_eq!(m.stats.tx_commits, 1);
}

#[test]
fn interrupt_aborts_transaction() {
    let mut m = machine(TX, PlatformConfig::default());
    for _ in 0..4 {
        m.apply(Tick::Step(0)).unwrap();
    }
    m.apply(Tick::Interrupt(0)).unwrap();
    assert_eq!(m.stats.tx_aborts.interrupt, 1);
    assert_eq!(m.peek_symbol("data", 0), Some(0));
    let base = m.ssa_frame_addr(0, 0);
    let fallback = m.image.symbol("main.fallback").unwrap();
    assert_eq!(m.peek_word(base + 8 * SSA_RIP), Some(fallback as i64));
    run(&mut m, 100);
    assert_eq!(m.peek_symbol("data", 1), Some(9));
}

#[test]
fn endless_aborts_hit_the_budget() {
    let mut m = machine(TX, PlatformConfig::default());
    m.tsx.abort_budget = 3;
    let mut err = None;
    for _ in 0..200 {
        if let Err(e) = m.apply(Tick::Step(0)).and_then(|_| m.apply(Tick::Conflict(0))) {
            err = Some(e);
            break;
        }
    }
    assert!(matches!(err, Some(MachineError::NonTermination { aborts: 4, .. })));
}
