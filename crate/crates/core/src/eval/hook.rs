//! Interrupt placement sweep over the block-eresume hook: every position of
//! a protected region, followed by nested interrupts of the handler and the
//! resume hook.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense_hw::{self, hook_name, HwOptions};
use crate::defense_sw::TsxConfig;
use crate::machine::event::EventKind;
use crate::machine::{Machine, MachineError, PlatformConfig, ThreadStatus, Tick, SSA_RIP, SSA_RSP};
use crate::program::isa::NUM_REGS;
use crate::program::{scenarios, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HookConfig {
    pub region_len: usize,
    /// Deepest chain of interrupts after the first one.
    pub max_nesting: usize,
    /// Random mixed-delay chains per region position.
    pub random_chains: usize,
    pub seed: u64,
    pub max_ticks: u64,
}

impl Default for HookConfig {
    fn default() -> Self {
        HookConfig { region_len: 200, max_nesting: 5, random_chains: 4, seed: 1, max_ticks: 200_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookReport {
    pub runs: u64,
    pub restores: u64,
    pub max_cssa: usize,
    /// Enclave instructions from the handler's entry to the restore in an
    /// undisturbed hook.
    pub hook_path: u64,
    pub failures: Vec<String>,
}

impl HookReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.max_cssa <= 2
    }
}

/// Saved registers, rip and rsp.
type Context = ([i64; NUM_REGS], i64, i64);

struct Fixture {
    platform: PlatformConfig,
    image: Arc<Image>,
    region_start: u64,
    restore_rip: u64,
    reference: Vec<i64>,
}

fn out_words(m: &Machine) -> Vec<i64> {
    (0..32).map(|w| m.peek_symbol(scenarios::OUT_PAGE, w).unwrap_or(0)).collect()
}

impl Fixture {
    fn new(cfg: &HookConfig) -> Result<Fixture, MachineError> {
        let platform = PlatformConfig::default();
        let (_, img) = defense_hw::link(&scenarios::straight_region(cfg.region_len), &HwOptions::default(), &platform)
            .map_err(|e| MachineError::Internal(e.to_string()))?;
        let region_start = img.function(scenarios::BODY).map(|f| f.start).ok_or_else(|| missing("main"))?;
        let bail = img.symbol(&format!("{}.bail", hook_name(0))).ok_or_else(|| missing("hook bail"))?;
        let restore_rip = bail - img.instr_bytes;
        let image = Arc::new(img);
        let mut m = Machine::new(platform.clone(), TsxConfig::default(), image.clone(), &[0], &[])?;
        for _ in 0..cfg.max_ticks {
            if m.terminated() {
                break;
            }
            m.apply(Tick::Step(0))?;
        }
        let reference = out_words(&m);
        Ok(Fixture { platform, image, region_start, restore_rip, reference })
    }

    /// Interrupts the region at instruction `k`, then again after each
    /// delay (counted in enclave instructions since the last interrupt),
    /// as long as the hook has not restored the context yet.
    fn case(&self, k: usize, delays: &[u64], cfg: &HookConfig, r: &mut HookReport) -> Result<(), MachineError> {
        let mut m = Machine::new(self.platform.clone(), TsxConfig::default(), self.image.clone(), &[0], &[])?;
        m.set_verbose(true);
        r.runs += 1;
        let target = self.region_start + k as u64 * self.image.instr_bytes;
        let mut first: Option<Context> = None;
        let mut restored = false;
        let (mut level, mut count) = (0usize, 0u64);
        let tag = || format!("k={k} delays={delays:?}");
        for _ in 0..cfg.max_ticks {
            if m.terminated() {
                break;
            }
            let inside = m.cores[0].in_enclave();
            let t = if first.is_none() && inside && m.cores[0].rip == target {
                Tick::Interrupt(0)
            } else if first.is_some() && !restored && inside && level < delays.len() && count >= delays[level] {
                level += 1;
                count = 0;
                Tick::Interrupt(0)
            } else {
                Tick::Step(0)
            };
            m.apply(t)?;
            if t == Tick::Step(0) && inside && first.is_some() {
                count += 1;
            }
            if t == Tick::Interrupt(0) && first.is_none() {
                let base = m.ssa_frame_addr(0, 0);
                let mut regs = [0; NUM_REGS];
                for (i, v) in regs.iter_mut().enumerate() {
                    *v = m.peek_word(base + 8 * i as u64).unwrap_or(0);
                }
                let rip = m.peek_word(base + 8 * SSA_RIP).unwrap_or(0);
                let rsp = m.peek_word(base + 8 * SSA_RSP).unwrap_or(0);
                if rip as u64 != target {
                    r.failures.push(format!("{}: first save holds rip {rip:#x}", tag()));
                }
                first = Some((regs, rip, rsp));
            }
            let hit = m.log.events.iter().any(|e| e.kind == EventKind::Retire { rip: self.restore_rip });
            m.log.events.clear();
            if hit {
                r.restores += 1;
                restored = true;
                let c = &m.cores[0];
                let now: Context = (c.regs, c.rip as i64, c.rsp as i64);
                if Some(now) != first {
                    r.failures.push(format!("{}: restored {:?} but first saved {:?}", tag(), now, first));
                }
            }
        }
        r.max_cssa = r.max_cssa.max(m.stats.max_cssa);
        if m.stats.max_cssa > 2 {
            r.failures.push(format!("{}: SSA depth {}", tag(), m.stats.max_cssa));
        }
        match &m.threads[0].status {
            ThreadStatus::Done(_) if out_words(&m) == self.reference => {}
            s => r.failures.push(format!("{}: ended {:?} with output {:?}", tag(), s, out_words(&m))),
        }
        if !restored {
            r.failures.push(format!("{}: context never restored", tag()));
        }
        Ok(())
    }

    /// Instructions from handler entry through the restore, undisturbed.
    fn hook_path(&self, cfg: &HookConfig) -> Result<u64, MachineError> {
        let mut m = Machine::new(self.platform.clone(), TsxConfig::default(), self.image.clone(), &[0], &[])?;
        m.set_verbose(true);
        let mut armed = false;
        let mut n = 0;
        for _ in 0..cfg.max_ticks {
            let inside = m.cores[0].in_enclave();
            let t = if !armed && inside && m.cores[0].rip == self.region_start { Tick::Interrupt(0) } else { Tick::Step(0) };
            m.apply(t)?;
            if t == Tick::Interrupt(0) {
                armed = true;
            } else if armed && inside {
                n += 1;
            }
            let hit = m.log.events.iter().any(|e| e.kind == EventKind::Retire { rip: self.restore_rip });
            m.log.events.clear();
            if hit {
                return Ok(n);
            }
        }
        Err(MachineError::Internal("hook never restored".into()))
    }
}

fn missing(what: &str) -> MachineError {
    MachineError::Internal(format!("{what} not found in the linked image"))
}

pub fn explore_hook(cfg: &HookConfig) -> Result<HookReport, MachineError> {
    let fx = Fixture::new(cfg)?;
    let mut r = HookReport { hook_path: fx.hook_path(cfg)?, ..HookReport::default() };
    let path = r.hook_path;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..cfg.region_len {
        fx.case(k, &[], cfg, &mut r)?;
        // One nested interrupt at every point of the handler and the hook.
        for d in 0..path {
            fx.case(k, &[d], cfg, &mut r)?;
        }
        // Deeper chains: the same delay repeated, and random mixes.
        for depth in 2..=cfg.max_nesting {
            for d in (0..path).step_by(((k % 7) + 1).max(1)) {
                fx.case(k, &vec![d; depth], cfg, &mut r)?;
            }
            for _ in 0..cfg.random_chains {
                let v: Vec<u64> = (0..depth).map(|_| rng.gen_range(0..path)).collect();
                fx.case(k, &v, cfg, &mut r)?;
            }
        }
        if r.failures.len() > 20 {
            break;
        }
    }
    Ok(r)
}
