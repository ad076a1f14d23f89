use std::sync::Arc;

use heisenlab::defense_hw::NOT_ON_SAME_PHYSICAL_CORE;
use heisenlab::defense_sw::TsxConfig;
use heisenlab::eval::rendezvous::{explore_rendezvous, micro_image, replay, RendezvousConfig};
use heisenlab::machine::{Machine, PlatformConfig, ThreadStatus, Tick};

fn small(depth: usize) -> RendezvousConfig {
    RendezvousConfig { depth_per_core: depth, ..RendezvousConfig::default() }
}

#[test]
fn shallow_default_is_sound_and_live() {
    let r = explore_rendezvous(&small(24)).unwrap();
    assert!(r.sound(), "{r:?}");
    assert!(r.deadlock.is_none(), "{r:?}");
    assert!(r.successes > 0);
}

#[test]
fn without_paired_aex_a_stale_id_is_accepted() {
    let cfg = RendezvousConfig { paired_aex_hw: false, ..RendezvousConfig::default() };
    let r = explore_rendezvous(&cfg).unwrap();
    let path = r.not_coresident.clone().or(r.unsound.clone()).expect("some unsound schedule");
    // The reported schedule replays to the same verdict.
    let tokens: Vec<&str> = path.split_whitespace().filter(|t| t.starts_with('s') || t.starts_with('i')).collect();
    let (again, events) = replay(&cfg, &tokens.join(" ")).unwrap();
    assert!(!again.sound(), "{again:?}");
    assert!(!events.is_empty());
}

#[test]
fn original_listing_without_release_deadlocks() {
    let cfg = RendezvousConfig { release_on_success: false, interrupts: false, ..RendezvousConfig::default() };
    let r = explore_rendezvous(&cfg).unwrap();
    assert!(r.deadlock.is_some(), "{r:?}");
}

#[test]
fn absent_peer_never_succeeds() {
    for coalesce in [true, false] {
        let cfg = RendezvousConfig { peer_enters: false, coalesce_private: coalesce, ..RendezvousConfig::default() };
        let r = explore_rendezvous(&cfg).unwrap();
        assert_eq!(r.successes, 0, "{r:?}");
        assert!(r.sound());
    }
}

#[test]
fn budget_stops_the_search() {
    let cfg = RendezvousConfig { budget: 100, ..RendezvousConfig::default() };
    assert!(explore_rendezvous(&cfg).is_err());
}

/// Threads on different physical cores never pass the rendezvous: the
/// entry call reports the mismatch and the body does not run.
#[test]
fn threads_on_two_physical_cores_are_refused() {
    let cfg = RendezvousConfig::default();
    let (platform, image) = micro_image(&cfg).unwrap();
    let platform = PlatformConfig { physical_cores: 2, ..platform };
    let siblings = platform.logical_cores() / platform.physical_cores;
    let mut m = Machine::new(platform, TsxConfig::default(), Arc::new(image), &[0, siblings], &[]).unwrap();
    for i in 0..40_000 {
        if m.terminated() {
            break;
        }
        let c = if i % 2 == 0 { 0 } else { siblings };
        m.apply(Tick::Step(c)).unwrap();
    }
    for t in &m.threads {
        assert!(matches!(t.status, ThreadStatus::Failed { code, .. } if code == NOT_ON_SAME_PHYSICAL_CORE), "{t:?}");
    }
}
