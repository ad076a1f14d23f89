//! System-load model: memoryless arrivals of interrupts and conflicting
//! accesses, and runs of a scenario under such load.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::attacker::Strategy;
use crate::machine::{RunStats, Tick};
use crate::scenario::Scenario;
use crate::sim::{RunEnd, Sim};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadPreset {
    pub name: String,
    /// Expected interrupts per second.
    pub interrupt_rate: f64,
    /// Expected conflicting accesses per second.
    pub conflict_rate: f64,
}

impl LoadPreset {
    pub fn new(name: &str, interrupt_rate: f64, conflict_rate: f64) -> Self {
        LoadPreset { name: name.into(), interrupt_rate, conflict_rate }
    }

    /// Medians measured on an idle, a write-heavy, an I/O-stressed and a
    /// compile-loaded system.
    pub fn builtin() -> Vec<LoadPreset> {
        vec![
            LoadPreset::new("idle", 980.0, 43.0),
            LoadPreset::new("writes", 12_854.0, 67.0),
            LoadPreset::new("iostress", 20_282.0, 43.0),
            LoadPreset::new("llvm", 79_067.0, 27_913.0),
        ]
    }

    pub fn by_name(name: &str) -> Option<LoadPreset> {
        LoadPreset::builtin().into_iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        for (k, v) in [("interrupt_rate", self.interrupt_rate), ("conflict_rate", self.conflict_rate)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LoadError::BadRate(k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("`{0}` must be a finite non-negative rate")]
    BadRate(&'static str),
    #[error("unknown load preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    pub preset: String,
    /// Per simulated second: (interrupt aborts, conflict aborts).
    pub per_second: Vec<(u64, u64)>,
    pub median_interrupts: f64,
    pub median_conflicts: f64,
}

pub fn median(v: &mut [u64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).map_or(0, |d| d.sample(rng) as u64)
}

/// Abort counts of an always-running transaction for `duration_s` seconds.
pub fn simulate_load(preset: &LoadPreset, duration_s: u64, seed: u64) -> Result<LoadSample, LoadError> {
    preset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_second: Vec<(u64, u64)> = (0..duration_s)
        .map(|_| (poisson(&mut rng, preset.interrupt_rate), poisson(&mut rng, preset.conflict_rate)))
        .collect();
    let mut i: Vec<u64> = per_second.iter().map(|p| p.0).collect();
    let mut c: Vec<u64> = per_second.iter().map(|p| p.1).collect();
    Ok(LoadSample {
        preset: preset.name.clone(),
        median_interrupts: median(&mut i),
        median_conflicts: median(&mut c),
        per_second,
    })
}

/// A run of a scenario under load, with each tick one instruction at
/// `ticks_per_second`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadRun {
    pub ticks_per_second: f64,
    pub max_ticks: u64,
}

impl Default for LoadRun {
    fn default() -> Self {
        LoadRun { ticks_per_second: 1e9, max_ticks: 200_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOutcome {
    pub end: RunEnd,
    pub ticks: u64,
    pub stats: RunStats,
    pub interrupts: u64,
    pub conflicts: u64,
}

struct Arrivals {
    exp: Option<Exp<f64>>,
    next: f64,
}

impl Arrivals {
    fn new(rate_per_tick: f64, rng: &mut ChaCha8Rng) -> Self {
        let exp = (rate_per_tick > 0.0).then(|| Exp::new(rate_per_tick).expect("positive rate"));
        let mut a = Arrivals { exp, next: f64::INFINITY };
        a.advance(0.0, rng);
        a
    }

    fn advance(&mut self, now: f64, rng: &mut ChaCha8Rng) {
        self.next = match &self.exp {
            Some(e) => now + e.sample(rng),
            None => f64::INFINITY,
        };
    }
}

/// Runs `scenario` round-robin with interrupts and conflicts arriving on
/// the enclave cores at the preset's rates. Without an attacker.
pub fn run_under_load(
    scenario: &Scenario,
    secret: &[i64],
    preset: &LoadPreset,
    cfg: &LoadRun,
    seed: u64,
) -> Result<LoadOutcome, crate::machine::MachineError> {
    preset.validate().map_err(|e| crate::machine::MachineError::Internal(e.to_string()))?;
    let mut sim = Sim::new(scenario, secret, Strategy::Passive)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ints = Arrivals::new(preset.interrupt_rate / cfg.ticks_per_second, &mut rng);
    let mut confs = Arrivals::new(preset.conflict_rate / cfg.ticks_per_second, &mut rng);
    let cores = scenario.placement.clone();
    let (mut ni, mut nc) = (0u64, 0u64);
    let mut tick = 0u64;
    let end = loop {
        if sim.terminated() {
            break RunEnd::Terminated;
        }
        if tick >= cfg.max_ticks {
            break RunEnd::Idle;
        }
        let now = tick as f64;
        let t = if ints.next <= now {
            ints.advance(now, &mut rng);
            ni += 1;
            Tick::Interrupt(cores[rng.gen_range(0..cores.len())])
        } else if confs.next <= now {
            confs.advance(now, &mut rng);
            nc += 1;
            Tick::Conflict(cores[rng.gen_range(0..cores.len())])
        } else {
            Tick::Step(cores[(tick as usize) % cores.len()])
        };
        tick += 1;
        if let Err(e) = sim.machine.apply(t) {
            break RunEnd::Halted(e);
        }
        if tick.is_multiple_of(65_536) {
            sim.machine.log.events.clear();
        }
    };
    Ok(LoadOutcome { end, ticks: tick, stats: sim.machine.stats.clone(), interrupts: ni, conflicts: nc })
}
