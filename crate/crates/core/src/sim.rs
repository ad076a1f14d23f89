//! Schedule-driven runs of one scenario against one attacker strategy, with
//! the attacker-visible projection of the event log.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacker::{AttackView, AttackerAction, Observation, ObservationTrace, Strategy, WalkKind, THRASH_BASE_VPN};
use crate::machine::event::EventKind;
use crate::machine::{Machine, MachineError, Tick};
use crate::program::RightsClass;
use crate::scenario::Scenario;

/// Upper bound on ticks for a completion run before it counts as exhausted.
pub const DEFAULT_MAX_TICKS: u64 = 50_000_000;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("schedule exhausted after {ticks} ticks before the enclave terminated")]
    ScheduleExhausted { ticks: u64 },
    #[error("{0}")]
    Machine(#[from] MachineError),
}

/// How a run continues once the explicit ticks are used up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Completion {
    /// The prefix is the whole schedule.
    Strict,
    /// Step the thread cores round-robin until every thread finished, then
    /// give the attacker one last tick.
    #[default]
    RoundRobin,
    /// As `RoundRobin`, with an attacker tick before every step.
    Interleaved,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub prefix: Vec<Tick>,
    pub completion: Completion,
}

impl Schedule {
    pub fn strict(prefix: Vec<Tick>) -> Self {
        Schedule { prefix, completion: Completion::Strict }
    }

    /// The default schedule: the attacker acts before every enclave step.
    pub fn interleaved() -> Self {
        Schedule { prefix: Vec::new(), completion: Completion::Interleaved }
    }
}

/// Parameters of random schedule prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSchedule {
    pub depth: usize,
    pub p_attacker: f64,
    pub p_interrupt: f64,
    pub p_conflict: f64,
}

impl Default for RandomSchedule {
    fn default() -> Self {
        RandomSchedule { depth: 200, p_attacker: 0.3, p_interrupt: 0.05, p_conflict: 0.01 }
    }
}

impl RandomSchedule {
    /// Schedule number `index` of the stream for `seed`; independent of
    /// how many others were drawn.
    pub fn generate(&self, seed: u64, index: u64, cores: &[usize]) -> Schedule {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut prefix = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            let c = cores[rng.gen_range(0..cores.len())];
            let x: f64 = rng.gen();
            let t = if x < self.p_attacker {
                Tick::Attacker
            } else if x < self.p_attacker + self.p_interrupt {
                Tick::Interrupt(c)
            } else if x < self.p_attacker + self.p_interrupt + self.p_conflict {
                Tick::Conflict(c)
            } else {
                Tick::Step(c)
            };
            prefix.push(t);
        }
        Schedule { prefix, completion: Completion::RoundRobin }
    }
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq)]
pub enum RunEnd {
    Terminated,
    /// The enclave (or the platform) stopped with an error, e.g. the
    /// transaction retry budget.
    Halted(MachineError),
    /// An empty strict schedule: nothing ran.
    Idle,
}

impl RunEnd {
    pub fn describe(&self) -> String {
        match self {
            RunEnd::Terminated => "terminated".into(),
            RunEnd::Halted(e) => format!("halted: {e}"),
            RunEnd::Idle => "idle".into(),
        }
    }
}

/// One machine plus the attacker's state.
#[derive(Clone, Debug)]
pub struct Sim {
    pub machine: Machine,
    pub strategy: Strategy,
    pub trace: ObservationTrace,
    pub timing: bool,
    /// Keeps the whole event log instead of compacting it.
    pub keep_log: bool,
    pages: Arc<[(u64, RightsClass)]>,
    target: Option<u64>,
    attacker_core: Option<usize>,
    walk_cursor: usize,
    obs_cursor: usize,
}

impl Sim {
    pub fn new(scenario: &Scenario, secret: &[i64], strategy: Strategy) -> Result<Sim, MachineError> {
        Ok(Sim {
            machine: scenario.machine(secret)?,
            strategy,
            trace: ObservationTrace::default(),
            timing: false,
            keep_log: false,
            pages: scenario.pages.clone().into(),
            target: scenario.target,
            attacker_core: scenario.attacker_core,
            walk_cursor: 0,
            obs_cursor: 0,
        })
    }

    pub fn with_timing(mut self, on: bool) -> Self {
        self.timing = on;
        self
    }

    pub fn with_log(mut self, on: bool) -> Self {
        self.keep_log = on;
        self
    }

    pub fn terminated(&self) -> bool {
        self.machine.terminated()
    }

    /// Runs one tick and records what the attacker observes.
    pub fn tick(&mut self, t: Tick) -> Result<(), MachineError> {
        let r = match t {
            Tick::Attacker => {
                let r = self.attack();
                self.machine.end_tick();
                r
            }
            t => self.machine.apply(t),
        };
        self.project();
        r
    }

    fn attack(&mut self) -> Result<(), MachineError> {
        let enclave_cores = self.machine.thread_cores();
        let actions = {
            let m = &self.machine;
            let ptes = |vpn: u64| m.image.page_index(vpn).map(|i| m.ptes[i]);
            let view = AttackView {
                tick: m.tick,
                pages: &self.pages,
                target: self.target,
                enclave_cores: &enclave_cores,
                ptes: &ptes,
                tlb_ways: m.config.tlb_ways,
                trace: &self.trace,
            };
            self.strategy.actions(&view)
        };
        for a in actions {
            self.act(a)?;
        }
        Ok(())
    }

    /// Executes one attacker action in untrusted mode.
    pub fn act(&mut self, a: AttackerAction) -> Result<(), MachineError> {
        match a {
            AttackerAction::EvictPage(vpn) => self.machine.evict_epc_page(vpn)?,
            AttackerAction::SetPte { vpn, field, value } => self.machine.set_pte(vpn, field, value),
            AttackerAction::PollAd(vpns) => {
                let snap = self.machine.poll_ad(&vpns);
                self.project();
                if !snap.is_empty() {
                    self.observe(Observation::AdSnapshot(snap));
                }
            }
            AttackerAction::ProbeWalks => {
                self.project();
                let walks: Vec<(u64, WalkKind)> = self.machine.log.events[self.walk_cursor..]
                    .iter()
                    .filter_map(|e| match e.kind {
                        EventKind::PageWalk { vpn, .. } => Some((vpn, WalkKind::Walk)),
                        EventKind::PteWrite { vpn } => Some((vpn, WalkKind::PteWrite)),
                        _ => None,
                    })
                    .collect();
                self.walk_cursor = self.machine.log.len();
                if !walks.is_empty() {
                    self.observe(Observation::WalkSet(walks));
                }
            }
            AttackerAction::SiblingThrash(n) => {
                if let Some(core) = self.thrash_core() {
                    let sets = self.machine.config.tlb_sets as u64;
                    let mut seen: Vec<u64> = self.pages.iter().map(|(v, _)| v % sets).collect();
                    seen.sort_unstable();
                    seen.dedup();
                    for s in seen {
                        for k in 0..n as u64 {
                            self.machine.untrusted_access(core, THRASH_BASE_VPN + k * sets + s);
                        }
                    }
                }
            }
            AttackerAction::InjectInterrupt(c) => self.machine.arm_interrupt(c),
            AttackerAction::NoOp => {}
        }
        self.project();
        Ok(())
    }

    /// The HT sibling of the first enclave thread when it is free, else the
    /// attacker's own core.
    fn thrash_core(&self) -> Option<usize> {
        let m = &self.machine;
        let home = *m.thread_cores().first()?;
        match m.cores[home].sibling_id {
            Some(s) if !m.cores[s].in_enclave() && m.cores[s].thread.is_none() => Some(s),
            _ => self.attacker_core,
        }
    }

    fn observe(&mut self, o: Observation) {
        if self.timing {
            self.trace.push(Observation::Timestamp(self.machine.tick));
        }
        self.trace.push(o);
    }

    fn project(&mut self) {
        let n = self.machine.log.len();
        for i in self.obs_cursor..n {
            let e = &self.machine.log.events[i];
            let o = match &e.kind {
                EventKind::Fault(f) => Observation::Fault(*f),
                EventKind::Aex { cause } => Observation::EnclaveExit(cause.name().to_string()),
                _ => continue,
            };
            if self.timing {
                self.trace.push(Observation::Timestamp(e.tick));
            }
            self.trace.push(o);
        }
        self.obs_cursor = n;
    }

    /// Drops log events that no cursor needs any more.
    pub fn compact(&mut self) {
        let keep = self.walk_cursor.min(self.obs_cursor);
        if keep > 0 && !self.keep_log {
            self.machine.log.events.drain(..keep);
            self.walk_cursor -= keep;
            self.obs_cursor -= keep;
        }
    }

    /// Hash of the walk events a future probe would still report.
    pub fn pending_walk_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = crate::machine::state_hasher();
        for e in &self.machine.log.events[self.walk_cursor..] {
            match e.kind {
                EventKind::PageWalk { vpn, .. } => (0u8, vpn).hash(&mut h),
                EventKind::PteWrite { vpn } => (1u8, vpn).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Everything that determines this run's future observations.
    pub fn memo_key(&self) -> (u64, (usize, usize, usize), u64) {
        (self.machine.state_hash(), self.strategy.memo_key(&self.trace, self.target), self.pending_walk_hash())
    }

    /// Ticks of one completion round: a step for every running thread.
    pub fn completion_round(&self, completion: Completion) -> Vec<Tick> {
        let m = &self.machine;
        let mut v = Vec::new();
        for t in &m.threads {
            if t.status == crate::machine::host::ThreadStatus::Running {
                if completion == Completion::Interleaved {
                    v.push(Tick::Attacker);
                }
                v.push(Tick::Step(t.core));
            }
        }
        v
    }
}

/// Drives `sims` in lockstep through `schedule`. `check` runs after every
/// tick and may stop the run early by returning `false`.
pub fn drive(
    sims: &mut [Sim],
    schedule: &Schedule,
    max_ticks: u64,
    mut check: impl FnMut(&[Sim]) -> bool,
) -> Result<Vec<RunEnd>, SimError> {
    let mut ends: Vec<Option<RunEnd>> = vec![None; sims.len()];
    let mut ticks = 0u64;
    let mut step_all = |sims: &mut [Sim], ends: &mut [Option<RunEnd>], t: Tick| -> bool {
        for (s, e) in sims.iter_mut().zip(ends.iter_mut()) {
            if e.is_none() {
                if let Err(err) = s.tick(t) {
                    *e = Some(RunEnd::Halted(err));
                }
            }
        }
        check(sims)
    };
    for &t in &schedule.prefix {
        if ends.iter().all(Option::is_some) || sims.iter().zip(&ends).all(|(s, e)| e.is_some() || s.terminated()) {
            break;
        }
        ticks += 1;
        if !step_all(sims, &mut ends, t) {
            return Ok(finish(sims, ends));
        }
    }
    if schedule.completion == Completion::Strict {
        if schedule.prefix.is_empty() {
            return Ok(vec![RunEnd::Idle; sims.len()]);
        }
        if sims.iter().zip(&ends).any(|(s, e)| e.is_none() && !s.terminated()) {
            return Err(SimError::ScheduleExhausted { ticks });
        }
        return Ok(finish(sims, ends));
    }
    loop {
        let live: Vec<usize> = (0..sims.len()).filter(|&i| ends[i].is_none() && !sims[i].terminated()).collect();
        let Some(&lead) = live.first() else {
            break;
        };
        // Lockstep runs share one schedule; take the round of the first
        // live run and apply it to all of them.
        let round = sims[lead].completion_round(schedule.completion);
        for t in round {
            ticks += 1;
            if ticks > max_ticks {
                return Err(SimError::ScheduleExhausted { ticks });
            }
            if !step_all(sims, &mut ends, t) {
                return Ok(finish(sims, ends));
            }
        }
        if ticks.is_multiple_of(4096) {
            for s in sims.iter_mut() {
                s.compact();
            }
        }
    }
    step_all(sims, &mut ends, Tick::Attacker);
    Ok(finish(sims, ends))
}

fn finish(sims: &[Sim], ends: Vec<Option<RunEnd>>) -> Vec<RunEnd> {
    ends.into_iter()
        .zip(sims)
        .map(|(e, s)| e.unwrap_or(if s.terminated() { RunEnd::Terminated } else { RunEnd::Idle }))
        .collect()
}

/// Runs a single simulation to the end of `schedule`.
pub fn run(sim: &mut Sim, schedule: &Schedule, max_ticks: u64) -> Result<RunEnd, SimError> {
    let mut ends = drive(std::slice::from_mut(sim), schedule, max_ticks, |_| true)?;
    Ok(ends.remove(0))
}
