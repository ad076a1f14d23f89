//! Acceptance gate: one line per criterion on stderr, then an assertion.

use std::io::Write;
use std::time::{Duration, Instant};

use heisenlab::attacker::{builtin_strategies, Strategy};
use heisenlab::defense_hw::PreloadSpec;
use heisenlab::eval::cost::{sweep, CostModel, PageCounts, PreloadRuns};
use heisenlab::eval::hook::{explore_hook, HookConfig};
use heisenlab::eval::load::{run_under_load, simulate_load, LoadPreset, LoadRun};
use heisenlab::eval::rendezvous::{explore_rendezvous, RendezvousConfig};
use heisenlab::eval::{explore, run_pair, ExploreMode, RunOptions};
use heisenlab::machine::{Machine, MachineError, Tick};
use heisenlab::program::scenarios as sc;
use heisenlab::program::RightsClass;
use heisenlab::scenario::{Defense, Scenario, ScenarioKind, ScenarioSpec};
use heisenlab::sim::{RunEnd, Schedule, Sim};
use heisenlab::txsplit::{commit_bound, TxSplitConfig};

fn verdict(n: u32, name: &str, ok: bool, detail: &str, took: Duration) {
    let tag = if ok { "PASS" } else { "FAIL" };
    // Straight to the handle so the line survives output capture.
    let _ = writeln!(std::io::stderr(), "criterion {n} [{tag}] {name}: {detail} ({:.1?})", took);
    assert!(ok, "criterion {n} failed: {detail}");
}

fn build(kind: ScenarioKind, defense: Defense) -> Scenario {
    Scenario::build(ScenarioSpec::new(kind, defense)).unwrap()
}

/// Round-robin over the enclave cores until every thread is done.
fn run_plain(s: &Scenario, secret: &[i64]) -> (Result<(), MachineError>, Machine) {
    let mut m = s.machine(secret).unwrap();
    let cores = s.placement.clone();
    for i in 0..200_000_000usize {
        if m.terminated() {
            break;
        }
        if let Err(e) = m.apply(Tick::Step(cores[i % cores.len()])) {
            return (Err(e), m);
        }
        if i % 65_536 == 0 {
            m.log.events.clear();
        }
    }
    (Ok(()), m)
}

#[test]
fn c1_attack_reproduction() {
    let t = Instant::now();
    let s = build(ScenarioKind::Genome { width: 1 }, Defense::None);
    let mut notes = Vec::new();
    let mut ok = true;
    for st in [Strategy::PageFaultEvict, Strategy::AdPoller, Strategy::WalkProber] {
        let r = run_pair(&s, st, &s.secrets[0], &s.secrets[1], &Schedule::interleaved(), &RunOptions::default())
            .unwrap();
        ok &= !r.traces_equal;
        let mut exits = Vec::new();
        for secret in &s.secrets {
            let mut sim = Sim::new(&s, secret, st).unwrap();
            heisenlab::sim::run(&mut sim, &Schedule::interleaved(), 1_000_000).unwrap();
            exits.push(sim.trace.exits());
        }
        if st != Strategy::PageFaultEvict {
            ok &= exits.iter().all(|&e| e == 0);
        }
        notes.push(format!("{st}: leak={} exits={exits:?}", !r.traces_equal));
    }
    let took = t.elapsed();
    ok &= took < Duration::from_secs(1);
    verdict(1, "attack reproduction", ok, &notes.join(", "), took);
}

#[test]
fn c2_noninterference() {
    let t = Instant::now();
    let kinds = [ScenarioKind::Genome { width: 1 }, ScenarioKind::Otp, ScenarioKind::Fib { n: 10 }];
    let opts = RunOptions::default();
    let mut runs = 0u64;
    let mut bad = Vec::new();
    for kind in &kinds {
        for d in [Defense::Hw, Defense::Sw] {
            let s = Scenario::build(ScenarioSpec::new(kind.clone(), d).with_ht(false)).unwrap();
            assert!(s.claims_protection());
            for st in builtin_strategies() {
                let mut modes = vec![ExploreMode::random(0x5eed, 10_000)];
                if matches!(kind, ScenarioKind::Genome { .. }) {
                    modes.push(ExploreMode::exhaustive(30));
                }
                for mode in &modes {
                    let r = explore(&s, st, &s.secrets, mode, &opts).unwrap();
                    runs += r.schedules_explored;
                    if !r.traces_equal {
                        bad.push(format!("{} {} {st}: {:?}", s.id(), d.name(), r.first_divergence));
                    }
                }
            }
        }
    }
    let took = t.elapsed();
    let detail = format!("{runs} schedules, {} divergences {bad:?}", bad.len());
    verdict(2, "noninterference", bad.is_empty(), &detail, took);
}

#[test]
fn c3_rendezvous_soundness() {
    let t = Instant::now();
    let r = explore_rendezvous(&RendezvousConfig::default()).unwrap();
    let took = t.elapsed();
    let ok = r.sound() && r.deadlock.is_none() && r.successes > 0 && took < Duration::from_secs(300);
    let detail = format!(
        "{} states, {} successes, unsound={:?}, not_coresident={:?}, deadlock={:?}",
        r.states, r.successes, r.unsound, r.not_coresident, r.deadlock
    );
    verdict(3, "rendezvous soundness", ok, &detail, took);
}

#[test]
fn c4_hook_runtime() {
    let t = Instant::now();
    let r = explore_hook(&HookConfig::default()).unwrap();
    let detail = format!(
        "{} runs, {} restores, max SSA {} frames, failures {:?}",
        r.runs,
        r.restores,
        r.max_cssa,
        r.failures.iter().take(3).collect::<Vec<_>>()
    );
    verdict(4, "block-eresume hook", r.ok() && r.restores >= r.runs, &detail, t.elapsed());
}

#[test]
fn c5_tsx_capacity_cliff() {
    let t = Instant::now();
    let mut ok = true;
    let mut cliff = Vec::new();
    for lines in [0, 1, 100, 487, 488, 489, 490, 600, 1000] {
        let s = build(ScenarioKind::TsxWrites { lines }, Defense::None);
        assert!(s.spec.tsx.deterministic_capacity);
        let (r, m) = run_plain(&s, &[]);
        r.unwrap();
        let committed = m.peek_symbol(sc::RESULT_PAGE, 0) == Some(1);
        ok &= committed == (lines <= 488);
        cliff.push(format!("{lines}:{}", if committed { "ok" } else { "abort" }));
    }
    let tlbfill = |ro: bool| {
        let mut spec = ScenarioSpec::new(ScenarioKind::Tlbfill { rw_pages: 325 }, Defense::Sw);
        if ro {
            spec.preload = PreloadSpec::read_only_fallback();
        }
        run_plain(&Scenario::build(spec).unwrap(), &[])
    };
    let (rw, m) = tlbfill(false);
    let rw_fails = matches!(rw, Err(MachineError::NonTermination { .. })) && m.stats.tx_aborts.capacity > 0;
    let (ro, m) = tlbfill(true);
    let ro_ok = ro.is_ok() && m.stats.tx_commits >= 1;
    ok &= rw_fails && ro_ok;
    let detail = format!("lines {}; 325-page rw preload fails={rw_fails}, read-only fallback ok={ro_ok}", cliff.join(" "));
    verdict(5, "TSX capacity cliff", ok, &detail, t.elapsed());
}

/// Independent model of the instrumented fib run: prologues in call order,
/// each subtracting the function size and committing on underflow.
struct CommitOracle {
    counter: i64,
    init: i64,
    commits: u64,
    mass: u64,
}

impl CommitOracle {
    fn enter(&mut self, size: i64) {
        self.counter -= size;
        self.mass += size as u64;
        if self.counter < 0 {
            self.commits += 1;
            self.counter = self.init;
        }
    }

    fn fib(&mut self, n: i64, size: i64) -> i64 {
        self.enter(size);
        if n < 2 {
            return n;
        }
        self.fib(n - 1, size) + self.fib(n - 2, size)
    }
}

#[test]
fn c6_txsplit_oracle() {
    let t = Instant::now();
    let mut ok = true;
    let mut bad = Vec::new();
    let salt = 41;
    for n in 5..=15 {
        let reference = {
            let s = build(ScenarioKind::Fib { n }, Defense::Sw);
            let (r, m) = run_plain(&s, &[salt]);
            r.unwrap();
            m.peek_symbol(sc::OUT_PAGE, 0)
        };
        for init in [50, 200, 1_800] {
            let mut spec = ScenarioSpec::new(ScenarioKind::Fib { n }, Defense::Sw);
            spec.txsplit = Some(TxSplitConfig { init_cntr: init, func_skp: 1 });
            let s = Scenario::build(spec).unwrap();
            let (r, m) = run_plain(&s, &[salt]);
            r.unwrap();
            let main = s.user.function(sc::BODY).unwrap().size() as i64;
            let fib = s.user.function(sc::FIB).unwrap().size() as i64;
            let mut o = CommitOracle { counter: init, init, commits: 0, mass: 0 };
            o.enter(main);
            let value = o.fib(n, fib);
            let out = m.peek_symbol(sc::OUT_PAGE, 0);
            // One final commit closes the outermost transaction.
            let intermediate = m.stats.tx_commits - 1;
            let case_ok = out == reference
                && out == Some(value + salt)
                && m.stats.tx_aborts.total() == 0
                && intermediate == o.commits
                && intermediate <= commit_bound(o.mass, init);
            if !case_ok {
                bad.push(format!("n={n} init={init}: out {out:?} commits {intermediate} oracle {}", o.commits));
            }
            ok &= case_ok;
        }
    }
    verdict(6, "txsplit oracle", ok, &format!("33 cases, mismatches {bad:?}"), t.elapsed());
}

#[test]
fn c7_cost_model() {
    let t = Instant::now();
    let m = CostModel::default();
    let slope = |c| {
        let pts = sweep(&m, c, [0, 1, 10, 100, 1000]);
        let s: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0) as f64).collect();
        let linear = pts[0].1 == 0.0 && s.iter().all(|v| (v - s[0]).abs() < 1e-12);
        (s[0], linear)
    };
    let (x, lx) = slope(RightsClass::X);
    let (ro, lro) = slope(RightsClass::Ro);
    let (rw, lrw) = slope(RightsClass::Rw);
    let exact = [(x, 0.030), (ro, 0.008), (rw, 0.007)].iter().all(|(a, b)| (a - b).abs() < 1e-12);
    // Plumbing: page counts of a linked image feed the same model.
    let s = build(ScenarioKind::Tlbfill { rw_pages: 200 }, Defense::Sw);
    let pages = PageCounts::of(&s.image, &s.spec.preload);
    let one = heisenlab::eval::cost::estimate_overhead(&m, &pages, &PreloadRuns { entries: 1, ..Default::default() });
    let expect = pages.x as f64 * 0.030 + pages.ro as f64 * 0.008 + pages.rw as f64 * 0.007;
    let plumbed = (one.total_us - expect).abs() < 1e-9 && pages.rw >= 200;
    let ok = lx && lro && lrw && exact && x > ro && ro > rw && plumbed;
    let detail = format!("slopes x={x:.4} ro={ro:.4} rw={rw:.4} us/page, tlbfill200 pages {pages:?} -> {:.3} us", one.total_us);
    verdict(7, "cost model", ok, &detail, t.elapsed());
}

#[test]
fn c8_load_model() {
    let t = Instant::now();
    let mut ok = true;
    let mut medians = Vec::new();
    for p in LoadPreset::builtin() {
        let s = simulate_load(&p, 1_000, 7).unwrap();
        ok &= (s.median_interrupts - p.interrupt_rate).abs() <= 0.2 * p.interrupt_rate;
        ok &= (s.median_conflicts - p.conflict_rate).abs() <= 0.2 * p.conflict_rate;
        medians.push(s.median_interrupts);
    }
    ok &= medians.windows(2).all(|w| w[0] < w[1]);
    let llvm = LoadPreset::by_name("llvm").unwrap();
    let mut ends = Vec::new();
    for d in [Defense::Hw, Defense::Sw] {
        let mut spec = ScenarioSpec::new(ScenarioKind::Spin { iterations: 100_000 }, d);
        if d == Defense::Sw {
            spec.txsplit = Some(TxSplitConfig { init_cntr: 1_000_000_000, func_skp: 1 });
        }
        let s = Scenario::build(spec).unwrap();
        ends.push(run_under_load(&s, &[], &llvm, &LoadRun::default(), 3).unwrap().end);
    }
    ok &= ends[0] == RunEnd::Terminated;
    ok &= matches!(&ends[1], RunEnd::Halted(MachineError::NonTermination { .. }));
    let detail = format!(
        "interrupt medians {medians:?}; spin under llvm: hw {}, sw {}",
        ends[0].describe(),
        ends[1].describe()
    );
    verdict(8, "load model", ok, &detail, t.elapsed());
}
