//! Reference interpreter over the symbolic program, independent of the
//! loader and the machine, checked against machine runs.

use std::collections::HashMap;

use heisenlab::attacker::{AttackerAction, Observation, Strategy};
use heisenlab::defense_sw::COMMIT;
use heisenlab::eval::cost::PreloadRuns;
use heisenlab::machine::event::EventKind;
use heisenlab::machine::Tick;
use heisenlab::program::isa::{Instr, Operand};
use heisenlab::program::{scenarios as sc, Addr, Program, Stmt};
use heisenlab::scenario::{Defense, Scenario, ScenarioKind, ScenarioSpec};
use heisenlab::sim::{Schedule, Sim};
use heisenlab::txsplit::{instrument, TxSplitConfig};

#[derive(Default)]
struct Outcome {
    instructions: u64,
    commits: u64,
    memory: HashMap<(String, i64), i64>,
}

/// Runs `entry` of `p` to its return. Calls of [`COMMIT`] only count.
fn interpret(p: &Program, entry: &str, secret: &[i64]) -> Outcome {
    let mut mem: HashMap<(String, i64), i64> = HashMap::new();
    for d in &p.data_pages {
        for &(w, v) in &d.init {
            mem.insert((d.name.clone(), 8 * w as i64), v);
        }
    }
    for (slot, &v) in p.secret_slots.iter().zip(secret) {
        mem.insert((slot.page.clone(), 8 * slot.word as i64), v);
    }
    let key = |a: &Addr| (a.sym.clone().expect("symbolic operand"), a.offset);
    let mut regs = [0i64; 8];
    let mut stack: Vec<i64> = Vec::new();
    let mut frames: Vec<(usize, usize)> = vec![(p.functions.iter().position(|f| f.name == entry).unwrap(), 0)];
    let bodies: Vec<Vec<&Instr>> =
        p.functions.iter().map(|f| f.body.iter().filter_map(|s| match s { Stmt::Instr(i) => Some(i), _ => None }).collect()).collect();
    let labels: Vec<HashMap<&str, usize>> = p
        .functions
        .iter()
        .map(|f| {
            let mut m = HashMap::new();
            let mut pc = 0;
            for s in &f.body {
                match s {
                    Stmt::Label(l) => {
                        m.insert(l.as_str(), pc);
                    }
                    Stmt::Instr(_) => pc += 1,
                }
            }
            m
        })
        .collect();
    let mut out = Outcome::default();
    while let Some(&(f, pc)) = frames.last() {
        let i = bodies[f][pc];
        out.instructions += 1;
        let mut next = pc + 1;
        let val = |o: &Operand, regs: &[i64; 8]| match o {
            Operand::Reg(r) => regs[*r as usize],
            Operand::Imm(v) => *v,
        };
        match i {
            Instr::LoadImm { dst, value } => regs[*dst as usize] = *value,
            Instr::Alu { op, dst, src } => regs[*dst as usize] = op.apply(regs[*dst as usize], val(src, &regs)),
            Instr::Read { dst, addr } => regs[*dst as usize] = mem.get(&key(addr)).copied().unwrap_or(0),
            Instr::Write { addr, src } => {
                mem.insert(key(addr), regs[*src as usize]);
            }
            Instr::BranchIfZero { reg, label } if regs[*reg as usize] == 0 => next = labels[f][label.as_str()],
            Instr::BranchIfNonZero { reg, label } if regs[*reg as usize] != 0 => next = labels[f][label.as_str()],
            Instr::BranchIfZero { .. } | Instr::BranchIfNonZero { .. } => {}
            Instr::Jump { label } => next = labels[f][label.as_str()],
            Instr::Push { src } => stack.push(regs[*src as usize]),
            Instr::Pop { dst } => regs[*dst as usize] = stack.pop().expect("balanced stack"),
            Instr::Call { function } if function == COMMIT => out.commits += 1,
            Instr::Call { function } => {
                frames.last_mut().unwrap().1 = next;
                frames.push((p.functions.iter().position(|g| &g.name == function).unwrap(), 0));
                continue;
            }
            Instr::Ret => {
                frames.pop();
                continue;
            }
            other => panic!("outside the interpreted subset: {other}"),
        }
        frames.last_mut().unwrap().1 = next;
    }
    out.memory = mem;
    out
}

fn retired_in(s: &Scenario, secret: &[i64], names: &[&str]) -> (u64, Option<i64>) {
    let mut m = s.machine(secret).unwrap();
    m.set_verbose(true);
    let ranges: Vec<(u64, u64)> =
        names.iter().map(|n| s.image.function(n).map(|f| (f.start, f.end)).unwrap()).collect();
    let mut n = 0;
    while !m.terminated() {
        m.apply(Tick::Step(0)).unwrap();
        n += m
            .log
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Retire { rip } if ranges.iter().any(|&(a, b)| (a..b).contains(&rip))))
            .count() as u64;
        m.log.events.clear();
    }
    (n, m.peek_symbol(sc::OUT_PAGE, 0))
}

#[test]
fn fib_instruction_count_matches_the_interpreter() {
    for n in 0..=12 {
        let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Fib { n }, Defense::None)).unwrap();
        let o = interpret(&s.user, sc::BODY, &[5]);
        let (retired, out) = retired_in(&s, &[5], &[sc::BODY, sc::FIB]);
        assert_eq!(retired, o.instructions, "fib({n})");
        assert_eq!(out, o.memory.get(&(sc::OUT_PAGE.to_string(), 0)).copied(), "fib({n})");
    }
    // Frozen: 6 in main, 5 per leaf call and 15 per inner call.
    let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Fib { n: 10 }, Defense::None)).unwrap();
    assert_eq!(interpret(&s.user, sc::BODY, &[0]).instructions, 6 + 89 * 5 + 88 * 15);
}

#[test]
fn txsplit_commit_counts_match_the_interpreter() {
    for n in [1, 4, 10, 13] {
        for init in [1, 23, 50, 200, 1_800, 100_000] {
            for skp in [1, 7, 17, 18] {
                let cfg = TxSplitConfig { init_cntr: init, func_skp: skp };
                let (instrumented, _) = instrument(&sc::fib_template(n), &cfg).unwrap();
                let oracle = interpret(&instrumented, sc::BODY, &[0]);
                let mut spec = ScenarioSpec::new(ScenarioKind::Fib { n }, Defense::Sw);
                spec.txsplit = Some(cfg);
                let s = Scenario::build(spec).unwrap();
                let mut m = s.machine(&[0]).unwrap();
                while !m.terminated() {
                    m.apply(Tick::Step(0)).unwrap();
                }
                let runs = PreloadRuns::from_stats(Defense::Sw, &m.stats);
                assert_eq!(runs.commits, oracle.commits, "n={n} init={init} skp={skp}");
                assert_eq!(m.stats.tx_commits, oracle.commits + 1);
            }
        }
    }
}

#[test]
fn fib_10_with_counter_50_commits_59_times() {
    let (p, _) = instrument(&sc::fib_template(10), &TxSplitConfig { init_cntr: 50, func_skp: 1 }).unwrap();
    assert_eq!(interpret(&p, sc::BODY, &[0]).commits, 59);
}

#[test]
fn larger_counter_than_executed_mass_means_no_split() {
    let (p, _) = instrument(&sc::fib_template(5), &TxSplitConfig { init_cntr: 1_000_000, func_skp: 1 }).unwrap();
    assert_eq!(interpret(&p, sc::BODY, &[0]).commits, 0);
}

/// Evicting a preloaded page before entry makes the preload fault on it;
/// after the host reloads it the run completes, and both secrets show the
/// same faults, all on pages of the fixed preload set.
#[test]
fn eviction_before_preload_faults_inside_the_preload_only() {
    let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Otp, Defense::Hw)).unwrap();
    let key = s.image.vpn_of(sc::KEY_PAGE).unwrap();
    let traces: Vec<Vec<Observation>> = s
        .secrets
        .iter()
        .map(|secret| {
            let mut sim = Sim::new(&s, secret, Strategy::Passive).unwrap();
            sim.act(AttackerAction::EvictPage(key)).unwrap();
            let end = heisenlab::sim::run(&mut sim, &Schedule::interleaved(), 1_000_000).unwrap();
            assert!(sim.terminated(), "{}", end.describe());
            assert!(sim.machine.stats.host_fixes >= 1);
            sim.trace.items
        })
        .collect();
    assert_eq!(traces[0], traces[1]);
    let faults: Vec<&Observation> = traces[0].iter().filter(|o| o.to_string().starts_with("fault")).collect();
    assert!(!faults.is_empty());
    assert!(faults.iter().all(|o| o.to_string().contains(&format!("{key:#x}"))), "{faults:?}");
}
