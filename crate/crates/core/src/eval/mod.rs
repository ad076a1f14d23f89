//! Noninterference harness: lockstep runs over secret pairs, random and
//! exhaustive schedule exploration, plus the cost and load models.

pub mod cost;
pub mod hook;
pub mod load;
pub mod rendezvous;
pub mod report;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::attacker::{Observation, Strategy};
use crate::machine::{MachineError, Tick};
use crate::scenario::Scenario;
use crate::sim::{drive, Completion, RandomSchedule, RunEnd, Schedule, Sim, SimError, DEFAULT_MAX_TICKS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub index: usize,
    /// Observation (or run outcome) of each side at `index`; `None` when
    /// that trace had already ended.
    pub a: Option<String>,
    pub b: Option<String>,
    /// The schedule that exposed it, as its random index when known.
    pub schedule: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub scenario: String,
    pub defense: String,
    pub strategy: String,
    pub secrets: Vec<Vec<i64>>,
    pub traces_equal: bool,
    pub first_divergence: Option<Divergence>,
    pub schedules_explored: u64,
    /// Whether the defense claims noninterference on this platform.
    pub protection_claimed: bool,
    pub protection: String,
}

impl LeakageReport {
    fn new(s: &Scenario, strategy: Strategy, secrets: Vec<Vec<i64>>) -> Self {
        LeakageReport {
            scenario: s.id(),
            defense: s.spec.defense.name().into(),
            strategy: strategy.name().into(),
            secrets,
            traces_equal: true,
            first_divergence: None,
            schedules_explored: 0,
            protection_claimed: s.claims_protection(),
            protection: s.protection_label().into(),
        }
    }

    /// A leak was found although the defense claims protection.
    pub fn violation(&self) -> bool {
        self.protection_claimed && !self.traces_equal
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Machine(#[from] MachineError),
    #[error("exploration budget of {budget} states exceeded")]
    BudgetExceeded { budget: u64 },
    #[error("need at least one secret")]
    NoSecrets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub timing: bool,
    pub max_ticks: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { timing: false, max_ticks: DEFAULT_MAX_TICKS }
    }
}

/// First point where two traces differ, looking only at `from..`.
fn diverge_from(a: &[Observation], b: &[Observation], from: usize) -> Option<usize> {
    let n = a.len().min(b.len());
    (from..n).find(|&i| a[i] != b[i]).or((a.len() != b.len()).then_some(n))
}

fn divergence_at(a: &Sim, b: &Sim, i: usize) -> Divergence {
    Divergence {
        index: i,
        a: a.trace.items.get(i).map(|o| o.to_string()),
        b: b.trace.items.get(i).map(|o| o.to_string()),
        schedule: None,
    }
}

/// Compares two lockstep runs tick by tick; `None` when equal so far.
fn compare_ticks(sims: &[Sim], checked: &mut usize) -> Option<Divergence> {
    let (a, b) = (&sims[0], &sims[1]);
    match diverge_from(&a.trace.items, &b.trace.items, *checked) {
        Some(i) => Some(divergence_at(a, b, i)),
        None => {
            *checked = a.trace.len();
            None
        }
    }
}

fn compare_ends(sims: &[Sim], ends: &[RunEnd]) -> Option<Divergence> {
    if ends[0] == ends[1] {
        return None;
    }
    Some(Divergence {
        index: sims[0].trace.len().max(sims[1].trace.len()),
        a: Some(ends[0].describe()),
        b: Some(ends[1].describe()),
        schedule: None,
    })
}

fn pair(s: &Scenario, strategy: Strategy, a: &[i64], b: &[i64], opts: &RunOptions) -> Result<[Sim; 2], MachineError> {
    Ok([
        Sim::new(s, a, strategy)?.with_timing(opts.timing),
        Sim::new(s, b, strategy)?.with_timing(opts.timing),
    ])
}

fn run_pair_inner(
    s: &Scenario,
    strategy: Strategy,
    a: &[i64],
    b: &[i64],
    schedule: &Schedule,
    opts: &RunOptions,
) -> Result<Option<Divergence>, EvalError> {
    let mut sims = pair(s, strategy, a, b, opts)?;
    let mut checked = 0;
    let mut found = None;
    let ends = drive(&mut sims, schedule, opts.max_ticks, |ss| {
        found = compare_ticks(ss, &mut checked);
        found.is_none()
    })?;
    Ok(found.or_else(|| compare_ends(&sims, &ends)))
}

/// Runs `a` and `b` under one schedule and compares the traces.
pub fn run_pair(
    s: &Scenario,
    strategy: Strategy,
    a: &[i64],
    b: &[i64],
    schedule: &Schedule,
    opts: &RunOptions,
) -> Result<LeakageReport, EvalError> {
    let mut r = LeakageReport::new(s, strategy, vec![a.to_vec(), b.to_vec()]);
    r.first_divergence = run_pair_inner(s, strategy, a, b, schedule, opts)?;
    r.traces_equal = r.first_divergence.is_none();
    r.schedules_explored = 1;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ExploreMode {
    Random { seed: u64, samples: u64, schedule: RandomSchedule },
    Exhaustive { depth: usize, budget: u64 },
}

impl ExploreMode {
    pub fn random(seed: u64, samples: u64) -> Self {
        ExploreMode::Random { seed, samples, schedule: RandomSchedule::default() }
    }

    pub fn exhaustive(depth: usize) -> Self {
        ExploreMode::Exhaustive { depth, budget: 5_000_000 }
    }
}

fn secret_pairs(secrets: &[Vec<i64>]) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 0..secrets.len() {
        for j in i + 1..secrets.len() {
            v.push((i, j));
        }
    }
    v
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Explores schedules for every pair of `secrets`; the result is the
/// conjunction over all runs and reports the earliest divergence.
pub fn explore(
    s: &Scenario,
    strategy: Strategy,
    secrets: &[Vec<i64>],
    mode: &ExploreMode,
    opts: &RunOptions,
) -> Result<LeakageReport, EvalError> {
    if secrets.is_empty() {
        return Err(EvalError::NoSecrets);
    }
    let mut report = LeakageReport::new(s, strategy, secrets.to_vec());
    let pairs = secret_pairs(secrets);
    for (i, j) in pairs {
        let (a, b) = (&secrets[i], &secrets[j]);
        let (d, n) = match mode {
            ExploreMode::Random { seed, samples, schedule } => {
                explore_random(s, strategy, a, b, *seed, *samples, schedule, opts)?
            }
            ExploreMode::Exhaustive { depth, budget } => explore_exhaustive(s, strategy, a, b, *depth, *budget, opts)?,
        };
        report.schedules_explored += n;
        if let Some(d) = d {
            report.traces_equal = false;
            report.first_divergence = Some(d);
            report.secrets = vec![a.clone(), b.clone()];
            return Ok(report);
        }
    }
    if report.schedules_explored == 0 {
        // A single secret: the trivially equal pair.
        report.schedules_explored = 1;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn explore_random(
    s: &Scenario,
    strategy: Strategy,
    a: &[i64],
    b: &[i64],
    seed: u64,
    samples: u64,
    gen: &RandomSchedule,
    opts: &RunOptions,
) -> Result<(Option<Divergence>, u64), EvalError> {
    let cores = s.placement.clone();
    let best = AtomicU64::new(u64::MAX);
    let one = |k: u64| -> Result<Option<Divergence>, EvalError> {
        let sched = gen.generate(seed, k, &cores);
        let d = run_pair_inner(s, strategy, a, b, &sched, opts)?;
        Ok(d.map(|mut d| {
            d.schedule = Some(k);
            d
        }))
    };
    let w = workers().min(samples.max(1) as usize);
    let results: Vec<Result<Option<Divergence>, EvalError>> = if w <= 1 {
        let mut out = Vec::new();
        for k in 0..samples {
            let r = one(k);
            let stop = !matches!(r, Ok(None));
            out.push(r);
            if stop {
                break;
            }
        }
        out
    } else {
        std::thread::scope(|sc| {
            let hs: Vec<_> = (0..w)
                .map(|wi| {
                    let (one, best) = (&one, &best);
                    sc.spawn(move || {
                        let mut k = wi as u64;
                        while k < samples && k < best.load(Ordering::Relaxed) {
                            let r = one(k);
                            if !matches!(r, Ok(None)) {
                                best.fetch_min(k, Ordering::Relaxed);
                                return Some(r);
                            }
                            k += w as u64;
                        }
                        None
                    })
                })
                .collect();
            hs.into_iter().filter_map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut first: Option<(u64, Result<Option<Divergence>, EvalError>)> = None;
    for r in results {
        let k = match &r {
            Ok(Some(d)) => d.schedule.unwrap_or(u64::MAX),
            Ok(None) => continue,
            Err(_) => u64::MAX - 1,
        };
        if first.as_ref().is_none_or(|(fk, _)| k < *fk) {
            first = Some((k, r));
        }
    }
    match first {
        None => Ok((None, samples)),
        Some((_, Err(e))) => Err(e),
        Some((k, Ok(d))) => Ok((d, k + 1)),
    }
}

struct Dfs<'a> {
    budget: u64,
    nodes: u64,
    leaves: u64,
    memo: HashMap<[u64; 6], usize>,
    opts: &'a RunOptions,
    cores: Vec<usize>,
}

fn choices(sims: &[Sim], cores: &[usize]) -> Vec<Tick> {
    let mut v = Vec::new();
    for &c in cores {
        let running = sims.iter().any(|s| {
            s.machine.cores[c].thread.is_some_and(|t| s.machine.threads[t].status == crate::machine::ThreadStatus::Running)
        });
        if running {
            v.push(Tick::Step(c));
        }
        if sims.iter().any(|s| s.machine.cores[c].in_enclave()) {
            v.push(Tick::Interrupt(c));
            if sims.iter().any(|s| s.machine.cores[c].tx.is_some()) {
                v.push(Tick::Conflict(c));
            }
        }
    }
    v.push(Tick::Attacker);
    v
}

impl Dfs<'_> {
    fn key(sims: &[Sim]) -> [u64; 6] {
        let (ha, (fa, ra, ea), wa) = sims[0].memo_key();
        let (hb, (fb, rb, eb), wb) = sims[1].memo_key();
        let pack = |f: usize, r: usize, e: usize| (f as u64) << 48 | (r as u64) << 32 | e as u64;
        [ha, hb, wa, wb, pack(fa, ra, ea), pack(fb, rb, eb)]
    }

    fn leaf(&mut self, mut sims: [Sim; 2]) -> Result<Option<Divergence>, EvalError> {
        self.leaves += 1;
        let mut checked = 0;
        let mut found = None;
        let sched = Schedule { prefix: Vec::new(), completion: Completion::RoundRobin };
        let ends = drive(&mut sims, &sched, self.opts.max_ticks, |ss| {
            found = compare_ticks(ss, &mut checked);
            found.is_none()
        })?;
        Ok(found.or_else(|| compare_ends(&sims, &ends)))
    }

    fn visit(&mut self, sims: [Sim; 2], depth: usize) -> Result<Option<Divergence>, EvalError> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(EvalError::BudgetExceeded { budget: self.budget });
        }
        let key = Dfs::key(&sims);
        if self.memo.get(&key).is_some_and(|&d| d >= depth) {
            return Ok(None);
        }
        self.memo.insert(key, depth);
        if depth == 0 || sims.iter().all(Sim::terminated) {
            return self.leaf(sims);
        }
        let cs = choices(&sims, &self.cores);
        let base = sims[0].trace.len().min(sims[1].trace.len());
        let mut sims = Some(sims);
        for (n, t) in cs.iter().copied().enumerate() {
            let mut next = if n + 1 == cs.len() { sims.take().expect("unused") } else { sims.clone().expect("unused") };
            let mut halted = [None, None];
            for (k, s) in next.iter_mut().enumerate() {
                if let Err(e) = s.tick(t) {
                    halted[k] = Some(e);
                }
            }
            if let Some(i) = diverge_from(&next[0].trace.items, &next[1].trace.items, base) {
                return Ok(Some(divergence_at(&next[0], &next[1], i)));
            }
            if halted[0] != halted[1] {
                let ends = halted.map(|h| h.map_or(RunEnd::Terminated, RunEnd::Halted));
                return Ok(compare_ends(&next, &ends));
            }
            if halted[0].is_some() {
                continue;
            }
            for s in next.iter_mut() {
                s.compact();
            }
            if let Some(d) = self.visit(next, depth - 1)? {
                return Ok(Some(d));
            }
        }
        Ok(None)
    }
}

/// Depth-first search over all schedules of `depth` ticks (each followed by
/// the standard completion), merging states already explored at least as
/// deep. Returns the divergence, if any, and the number of leaf schedules.
pub fn explore_exhaustive(
    s: &Scenario,
    strategy: Strategy,
    a: &[i64],
    b: &[i64],
    depth: usize,
    budget: u64,
    opts: &RunOptions,
) -> Result<(Option<Divergence>, u64), EvalError> {
    let sims = pair(s, strategy, a, b, opts)?;
    let mut dfs = Dfs { budget, nodes: 0, leaves: 0, memo: HashMap::new(), opts, cores: s.placement.clone() };
    let d = dfs.visit(sims, depth)?;
    Ok((d, dfs.leaves))
}

/// Explores every built-in strategy with the scenario's secrets.
pub fn explore_all(
    s: &Scenario,
    mode: &ExploreMode,
    opts: &RunOptions,
) -> Result<Vec<LeakageReport>, EvalError> {
    let mut v = Vec::new();
    for st in crate::attacker::builtin_strategies() {
        v.push(explore(s, st, &s.secrets, mode, opts)?);
    }
    Ok(v)
}

#[cfg(test)]
mod tests;
