use proptest::prelude::*;

use heisenlab::attacker::Strategy as Attack;
use heisenlab::config::ScenarioConfig;
use heisenlab::defense_sw::TsxConfig;
use heisenlab::eval::cost::{estimate_overhead, CostModel, PageCounts, PreloadRuns};
use heisenlab::eval::load::{simulate_load, LoadPreset};
use heisenlab::eval::{run_pair, RunOptions};
use heisenlab::machine::{Frame, Owner, PlatformConfig, Tick, Tlb, TlbEntry};
use heisenlab::program::{asm, scenarios as sc, Rights};
use heisenlab::scenario::{Defense, Scenario, ScenarioKind, ScenarioSpec};
use heisenlab::sim::{RandomSchedule, Sim};
use heisenlab::txsplit::{commit_bound, instrument, TxSplitConfig};

#[derive(Clone, Debug)]
enum TlbOp {
    Insert { vpn: u64, owner: u32, core: usize, dirty: bool },
    Lookup { vpn: u64, owner: u32, core: usize },
    FlushCore(usize),
    FlushVpn(u64),
}

fn owner(o: u32) -> Owner {
    if o == 0 {
        Owner::Untrusted
    } else {
        Owner::Enclave(o)
    }
}

fn tlb_op() -> impl Strategy<Value = TlbOp> {
    let vpn = 0u64..24;
    prop_oneof![
        4 => (vpn.clone(), 0u32..3, 0usize..2, any::<bool>())
            .prop_map(|(vpn, owner, core, dirty)| TlbOp::Insert { vpn, owner, core, dirty }),
        4 => (vpn.clone(), 0u32..3, 0usize..2).prop_map(|(vpn, owner, core)| TlbOp::Lookup { vpn, owner, core }),
        1 => (0usize..2).prop_map(TlbOp::FlushCore),
        1 => vpn.prop_map(TlbOp::FlushVpn),
    ]
}

/// Naive reference: per set, entries from least to most recently used.
struct ModelTlb {
    sets: Vec<Vec<TlbEntry>>,
    ways: usize,
}

impl ModelTlb {
    fn set(&mut self, vpn: u64) -> &mut Vec<TlbEntry> {
        let n = self.sets.len() as u64;
        &mut self.sets[(vpn % n) as usize]
    }

    fn find(set: &[TlbEntry], vpn: u64, o: Owner, core: usize) -> Option<usize> {
        set.iter().position(|e| e.linear_page == vpn && e.owner == o && e.inserted_by == core)
    }

    fn lookup(&mut self, vpn: u64, o: Owner, core: usize) -> Option<TlbEntry> {
        let set = self.set(vpn);
        let i = Self::find(set, vpn, o, core)?;
        let e = set.remove(i);
        set.push(e);
        Some(e)
    }

    fn insert(&mut self, e: TlbEntry) -> Option<TlbEntry> {
        let ways = self.ways;
        let set = self.set(e.linear_page);
        if let Some(i) = Self::find(set, e.linear_page, e.owner, e.inserted_by) {
            set.remove(i);
            set.push(e);
            return None;
        }
        let evicted = (set.len() == ways).then(|| set.remove(0));
        set.push(e);
        evicted
    }

    fn flush(&mut self, pred: impl Fn(&TlbEntry) -> bool) -> usize {
        let mut n = 0;
        for s in &mut self.sets {
            let before = s.len();
            s.retain(|e| !pred(e));
            n += before - s.len();
        }
        n
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tlb_matches_naive_lru(ops in prop::collection::vec(tlb_op(), 1..200)) {
        let mut t = Tlb::new(4, 3);
        let mut m = ModelTlb { sets: vec![Vec::new(); 4], ways: 3 };
        for op in ops {
            match op {
                TlbOp::Insert { vpn, owner: o, core, dirty } => {
                    let e = TlbEntry {
                        linear_page: vpn,
                        frame: Frame::Epc(vpn as u32 + 7),
                        rights: Rights::RW,
                        dirty_cached: dirty,
                        owner: owner(o),
                        inserted_by: core,
                    };
                    prop_assert_eq!(t.insert(e), m.insert(e));
                }
                TlbOp::Lookup { vpn, owner: o, core } => {
                    let got = t.lookup(vpn, owner(o), core).map(|s| *t.entry(s));
                    prop_assert_eq!(got, m.lookup(vpn, owner(o), core));
                }
                TlbOp::FlushCore(c) => prop_assert_eq!(t.flush(|e| e.inserted_by == c), m.flush(|e| e.inserted_by == c)),
                TlbOp::FlushVpn(v) => prop_assert_eq!(t.flush(|e| e.linear_page == v), m.flush(|e| e.linear_page == v)),
            }
            for s in 0..4 {
                let got: Vec<TlbEntry> = t.set_lru_order(s).into_iter().copied().collect();
                prop_assert_eq!(&got, &m.sets[s]);
            }
        }
        prop_assert_eq!(t.len(), m.sets.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn equal_tlbs_hash_equal_regardless_of_history(vpns in prop::collection::vec(0u64..40, 1..30)) {
        use std::hash::Hasher;
        let e = |vpn: u64| TlbEntry {
            linear_page: vpn,
            frame: Frame::Untrusted(vpn),
            rights: Rights::RO,
            dirty_cached: false,
            owner: Owner::Untrusted,
            inserted_by: 0,
        };
        let mut a = Tlb::new(8, 2);
        let mut b = Tlb::new(8, 2);
        // `b` takes a detour through extra lookups that do not change the order.
        for &v in &vpns {
            a.insert(e(v));
            b.insert(e(v));
            b.lookup(v, Owner::Untrusted, 0);
        }
        let (mut ha, mut hb) = (std::collections::hash_map::DefaultHasher::new(), std::collections::hash_map::DefaultHasher::new());
        a.hash_state(&mut ha);
        b.hash_state(&mut hb);
        prop_assert_eq!(ha.finish(), hb.finish());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn txsplit_preserves_output_and_respects_the_bound(n in 0i64..12, init in 1i64..400, skp in 1usize..20) {
        let run = |tx: Option<TxSplitConfig>| {
            let mut spec = ScenarioSpec::new(ScenarioKind::Fib { n }, Defense::Sw);
            spec.txsplit = tx;
            let s = Scenario::build(spec).unwrap();
            let mut m = s.machine(&[3]).unwrap();
            while !m.terminated() {
                m.apply(Tick::Step(0)).unwrap();
            }
            (m.peek_symbol(sc::OUT_PAGE, 0), m.stats.tx_commits - 1)
        };
        let (reference, none) = run(None);
        prop_assert_eq!(none, 0);
        let cfg = TxSplitConfig { init_cntr: init, func_skp: skp };
        let (out, commits) = run(Some(cfg.clone()));
        prop_assert_eq!(out, reference);
        let user = sc::fib_template(n);
        let (_, report) = instrument(&user, &cfg).unwrap();
        let size = |f: &str| if report.instrumented.iter().any(|x| x == f) {
            user.function(f).unwrap().size() as u64
        } else {
            0
        };
        fn calls(n: i64) -> u64 {
            if n < 2 { 1 } else { 1 + calls(n - 1) + calls(n - 2) }
        }
        let mass = size(sc::BODY) + calls(n) * size(sc::FIB);
        prop_assert!(commits <= commit_bound(mass, init), "{} > bound({}, {})", commits, mass, init);
        if mass <= init as u64 {
            prop_assert_eq!(commits, 0);
        }
    }

    #[test]
    fn write_capacity_is_a_sharp_threshold(cap in 1usize..300, extra in 0usize..3, over in any::<bool>()) {
        let lines = if over { cap + 1 + extra } else { cap.saturating_sub(extra) };
        let mut spec = ScenarioSpec::new(ScenarioKind::TsxWrites { lines }, Defense::None);
        spec.tsx = TsxConfig { write_capacity_lines: cap, ..TsxConfig::default() };
        let s = Scenario::build(spec).unwrap();
        let mut m = s.machine(&[]).unwrap();
        while !m.terminated() {
            m.apply(Tick::Step(0)).unwrap();
        }
        let committed = m.peek_symbol(sc::RESULT_PAGE, 0) == Some(1);
        prop_assert_eq!(committed, lines <= cap);
    }

    #[test]
    fn hw_otp_random_schedules_never_diverge(seed in any::<u64>(), index in 0u64..1_000) {
        let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Otp, Defense::Hw)).unwrap();
        let sched = RandomSchedule::default().generate(seed, index, &s.placement);
        for st in [Attack::Composite, Attack::SingleStepper, Attack::WalkProber] {
            let r = run_pair(&s, st, &s.secrets[0], &s.secrets[1], &sched, &RunOptions::default()).unwrap();
            prop_assert!(r.traces_equal, "{}: {:?}", st, r.first_divergence);
        }
    }

    #[test]
    fn random_schedules_are_reproducible(seed in any::<u64>(), index in any::<u64>()) {
        let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Genome { width: 1 }, Defense::None)).unwrap();
        let g = RandomSchedule::default();
        let sched = g.generate(seed, index, &s.placement);
        prop_assert_eq!(&sched, &g.generate(seed, index, &s.placement));
        let trace = |secret: &[i64]| {
            let mut sim = Sim::new(&s, secret, Attack::Composite).unwrap();
            heisenlab::sim::run(&mut sim, &sched, 1_000_000).unwrap();
            sim.trace
        };
        prop_assert_eq!(trace(&s.secrets[1]), trace(&s.secrets[1]));
    }
}

proptest! {
    #[test]
    fn preload_cost_is_additive(x in 0usize..5_000, ro in 0usize..5_000, rw in 0usize..5_000, runs in 0u64..100) {
        let m = CostModel::default();
        let p = PageCounts { x, ro, rw };
        let t = estimate_overhead(&m, &p, &PreloadRuns { entries: runs, ..Default::default() });
        let parts = x as f64 * 0.030 + ro as f64 * 0.008 + rw as f64 * 0.007;
        prop_assert!((t.preload_us - parts).abs() < 1e-9);
        prop_assert!((t.total_us - runs as f64 * parts).abs() < 1e-6);
    }

    #[test]
    fn load_medians_track_the_rate(rate in 50.0f64..200_000.0, seed in any::<u64>()) {
        let s = simulate_load(&LoadPreset::new("p", rate, rate / 10.0), 200, seed).unwrap();
        prop_assert!((s.median_interrupts - rate).abs() <= 0.2 * rate);
        prop_assert_eq!(s.per_second.len(), 200);
    }

    #[test]
    fn straight_programs_round_trip_through_asm(len in 0usize..120) {
        let p = sc::straight_region(len);
        prop_assert_eq!(asm::parse(&asm::print(&p)).unwrap(), p);
    }

    #[test]
    fn platform_config_round_trips(sets in 1usize..512, ways in 1usize..16, ht in any::<bool>(), paired in any::<bool>()) {
        let mut c = ScenarioConfig::default();
        c.platform = PlatformConfig { tlb_sets: sets, tlb_ways: ways, hyperthreading: ht, paired_aex_hw: paired, ..PlatformConfig::default() };
        prop_assert_eq!(ScenarioConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
