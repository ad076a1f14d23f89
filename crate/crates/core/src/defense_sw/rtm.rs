//! RTM-style transactional memory engine used by the machine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::program::isa::NUM_REGS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsxConfig {
    pub write_capacity_lines: usize,
    pub read_capacity_lines: usize,
    pub line_size: u64,
    /// Load-model conflict probability per tick; used by schedule builders.
    pub conflict_rate: f64,
    pub deterministic_capacity: bool,
    /// Consecutive aborts on one core after which the run is declared
    /// non-terminating.
    pub abort_budget: u64,
}

impl Default for TsxConfig {
    fn default() -> Self {
        TsxConfig {
            write_capacity_lines: 488,
            read_capacity_lines: 33_280,
            line_size: 64,
            conflict_rate: 0.0,
            deterministic_capacity: true,
            abort_budget: 10_000,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TsxConfigError {
    #[error("transaction capacities must be positive")]
    ZeroCapacity,
    #[error("line size must be a power of two between 8 and 4096")]
    BadLineSize,
    #[error("conflict rate must lie in [0, 1]")]
    BadRate,
}

impl TsxConfig {
    pub fn validate(&self) -> Result<(), TsxConfigError> {
        if self.write_capacity_lines == 0 || self.read_capacity_lines == 0 {
            return Err(TsxConfigError::ZeroCapacity);
        }
        if !self.line_size.is_power_of_two() || !(8..=4096).contains(&self.line_size) {
            return Err(TsxConfigError::BadLineSize);
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return Err(TsxConfigError::BadRate);
        }
        Ok(())
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size
    }

    /// Write capacity of the `n`-th transaction on a core. Exact unless
    /// `deterministic_capacity` is off, in which case up to 1/8 of the
    /// capacity is lost to a pseudo-random amount of competing cache use.
    pub fn write_capacity_for(&self, n: u64) -> usize {
        if self.deterministic_capacity {
            return self.write_capacity_lines;
        }
        let slack = (self.write_capacity_lines / 8).max(1) as u64;
        self.write_capacity_lines - (splitmix(n) % slack) as usize
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbortCause {
    Interrupt,
    Capacity,
    Conflict,
    Illegal,
    /// A page fault inside the transaction; delivered as an AEX afterwards.
    Fault,
}

impl AbortCause {
    pub const ALL: [AbortCause; 5] =
        [AbortCause::Interrupt, AbortCause::Capacity, AbortCause::Conflict, AbortCause::Illegal, AbortCause::Fault];

    pub fn name(self) -> &'static str {
        match self {
            AbortCause::Interrupt => "interrupt",
            AbortCause::Capacity => "capacity",
            AbortCause::Conflict => "conflict",
            AbortCause::Illegal => "illegal",
            AbortCause::Fault => "fault",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum TxStatus {
    Active,
    Aborted(AbortCause),
}

/// One flat transaction of a logical core.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Transaction {
    pub status: TxStatus,
    pub abort_target: u64,
    pub read_set: BTreeSet<u64>,
    pub write_lines: BTreeSet<u64>,
    /// Buffered word writes: address to (EPC frame, new value).
    pub write_buf: BTreeMap<u64, (u32, i64)>,
    pub saved_regs: [i64; NUM_REGS],
    pub saved_rsp: u64,
    pub write_capacity: usize,
    pub read_capacity: usize,
}

/// Outcome of tracking one access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Ok,
    Overflow,
}

impl Transaction {
    pub fn begin(abort_target: u64, regs: [i64; NUM_REGS], rsp: u64, write_capacity: usize, read_capacity: usize) -> Self {
        Transaction {
            status: TxStatus::Active,
            abort_target,
            read_set: BTreeSet::new(),
            write_lines: BTreeSet::new(),
            write_buf: BTreeMap::new(),
            saved_regs: regs,
            saved_rsp: rsp,
            write_capacity,
            read_capacity,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == TxStatus::Active
    }

    pub fn track_read(&mut self, line: u64) -> Track {
        if self.write_lines.contains(&line) || self.read_set.contains(&line) {
            return Track::Ok;
        }
        if self.read_set.len() >= self.read_capacity {
            return Track::Overflow;
        }
        self.read_set.insert(line);
        Track::Ok
    }

    pub fn track_write(&mut self, line: u64) -> Track {
        if self.write_lines.contains(&line) {
            return Track::Ok;
        }
        if self.write_lines.len() >= self.write_capacity {
            return Track::Overflow;
        }
        self.write_lines.insert(line);
        Track::Ok
    }

    pub fn buffered(&self, addr: u64) -> Option<i64> {
        self.write_buf.get(&addr).map(|&(_, v)| v)
    }

    pub fn buffer_write(&mut self, addr: u64, frame: u32, value: i64) {
        self.write_buf.insert(addr, (frame, value));
    }

    pub fn touches(&self, line: u64) -> bool {
        self.read_set.contains(&line) || self.write_lines.contains(&line)
    }

    pub fn writes_line(&self, line: u64) -> bool {
        self.write_lines.contains(&line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_is_an_exact_threshold() {
        let cfg = TsxConfig::default();
        let mut tx = Transaction::begin(0, [0; NUM_REGS], 0, cfg.write_capacity_for(0), cfg.read_capacity_lines);
        for l in 0..488 {
            assert_eq!(tx.track_write(l), Track::Ok);
        }
        assert_eq!(tx.track_write(3), Track::Ok);
        assert_eq!(tx.track_write(488), Track::Overflow);
    }

    #[test]
    fn derived_capacities() {
        let cfg = TsxConfig::default();
        assert_eq!(cfg.write_capacity_lines as u64 * cfg.line_size, 30 * 1024 + 512);
        assert_eq!(cfg.read_capacity_lines as u64 * cfg.line_size, 2080 * 1024);
    }

    #[test]
    fn validation() {
        assert!(TsxConfig::default().validate().is_ok());
        let bad = TsxConfig { write_capacity_lines: 0, ..TsxConfig::default() };
        assert_eq!(bad.validate(), Err(TsxConfigError::ZeroCapacity));
    }
}
