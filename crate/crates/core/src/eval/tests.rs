use super::*;
use crate::attacker::Observation;
use crate::scenario::{Defense, ScenarioKind, ScenarioSpec};

fn genome(defense: Defense) -> Scenario {
    Scenario::build(ScenarioSpec::new(ScenarioKind::Genome { width: 1 }, defense)).unwrap()
}

fn interleaved_pair(s: &Scenario, st: Strategy) -> LeakageReport {
    run_pair(s, st, &s.secrets[0], &s.secrets[1], &Schedule::interleaved(), &RunOptions::default()).unwrap()
}

#[test]
fn undefended_genome_leaks_through_faults() {
    let s = genome(Defense::None);
    let r = interleaved_pair(&s, Strategy::PageFaultEvict);
    assert!(!r.traces_equal, "{r:?}");
    let d = r.first_divergence.unwrap();
    assert!(d.a.iter().chain(d.b.iter()).any(|o| o.starts_with("fault")), "{d:?}");
}

#[test]
fn same_secret_never_diverges() {
    let s = genome(Defense::None);
    for st in crate::attacker::builtin_strategies() {
        let r = run_pair(&s, st, &s.secrets[1], &s.secrets[1], &Schedule::interleaved(), &RunOptions::default())
            .unwrap();
        assert!(r.traces_equal, "{st}: {r:?}");
    }
}

#[test]
fn hw_genome_equal_under_interleaving() {
    let s = genome(Defense::Hw);
    for st in crate::attacker::builtin_strategies() {
        let r = interleaved_pair(&s, st);
        assert!(r.traces_equal, "{st}: {r:?}");
    }
}

#[test]
fn exit_less_channels_see_no_exit() {
    let s = genome(Defense::None);
    for st in [Strategy::AdPoller, Strategy::WalkProber] {
        let mut sim = Sim::new(&s, &s.secrets[1], st).unwrap();
        crate::sim::run(&mut sim, &Schedule::interleaved(), 1_000_000).unwrap();
        assert_eq!(sim.trace.exits(), 0, "{st}");
        assert!(!sim.trace.is_empty());
    }
}

#[test]
fn random_exploration_finds_leak_and_reports_index() {
    let s = genome(Defense::None);
    let r = explore(&s, Strategy::PageFaultEvict, &s.secrets, &ExploreMode::random(7, 50), &RunOptions::default())
        .unwrap();
    assert!(!r.traces_equal);
    let d = r.first_divergence.unwrap();
    assert_eq!(r.schedules_explored, d.schedule.unwrap() + 1);
}

#[test]
fn exhaustive_small_depth_hw() {
    let s = genome(Defense::Hw);
    let r = explore(&s, Strategy::PageFaultEvict, &s.secrets, &ExploreMode::exhaustive(8), &RunOptions::default())
        .unwrap();
    assert!(r.traces_equal, "{r:?}");
    assert!(r.schedules_explored > 1);
}

#[test]
fn exhaustive_finds_undefended_leak() {
    let s = genome(Defense::None);
    let r = explore(&s, Strategy::PageFaultEvict, &s.secrets, &ExploreMode::exhaustive(4), &RunOptions::default())
        .unwrap();
    assert!(!r.traces_equal);
}

#[test]
fn budget_is_enforced() {
    let s = genome(Defense::Hw);
    let mode = ExploreMode::Exhaustive { depth: 30, budget: 10 };
    let e = explore(&s, Strategy::Composite, &s.secrets, &mode, &RunOptions::default()).unwrap_err();
    assert_eq!(e, EvalError::BudgetExceeded { budget: 10 });
}

#[test]
fn timing_flag_adds_timestamps() {
    let s = genome(Defense::None);
    let mut sim = Sim::new(&s, &s.secrets[1], Strategy::PageFaultEvict).unwrap().with_timing(true);
    crate::sim::run(&mut sim, &Schedule::interleaved(), 1_000_000).unwrap();
    assert!(matches!(sim.trace.items.first(), Some(Observation::Timestamp(_))));
}

#[test]
fn csv_has_the_documented_columns() {
    let s = genome(Defense::None);
    let r = interleaved_pair(&s, Strategy::PageFaultEvict);
    let csv = report::to_csv(&[r]).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(report::CSV_HEADER));
    assert!(lines.next().unwrap().starts_with("genome1,none,page-fault-evict,1,false,"));
}
