//! Analytic preload cost model.

use serde::{Deserialize, Serialize};

use crate::defense_hw::preload::{page_set, PreloadSpec};
use crate::machine::RunStats;
use crate::program::{Image, RightsClass};
use crate::scenario::Defense;

/// Per-page preload costs in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub cost_x_page: f64,
    pub cost_ro_page: f64,
    pub cost_rw_page: f64,
    /// Cost of one protected call without any preloading.
    pub base_call: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { cost_x_page: 0.030, cost_ro_page: 0.008, cost_rw_page: 0.007, base_call: 0.0 }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
#[error("cost `{0}` must be a finite non-negative number")]
pub struct NegativeCost(pub &'static str);

impl CostModel {
    pub fn validate(&self) -> Result<(), NegativeCost> {
        for (n, v) in [
            ("cost_x_page", self.cost_x_page),
            ("cost_ro_page", self.cost_ro_page),
            ("cost_rw_page", self.cost_rw_page),
            ("base_call", self.base_call),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(NegativeCost(n));
            }
        }
        Ok(())
    }

    pub fn page_cost(&self, c: RightsClass) -> f64 {
        match c {
            RightsClass::X => self.cost_x_page,
            RightsClass::Ro => self.cost_ro_page,
            RightsClass::Rw => self.cost_rw_page,
        }
    }

    /// Time of one preload over `pages`.
    pub fn preload_cost(&self, pages: &PageCounts) -> f64 {
        pages.x as f64 * self.cost_x_page + pages.ro as f64 * self.cost_ro_page + pages.rw as f64 * self.cost_rw_page
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageCounts {
    pub x: usize,
    pub ro: usize,
    pub rw: usize,
}

impl PageCounts {
    pub fn total(&self) -> usize {
        self.x + self.ro + self.rw
    }

    /// Pages of `image` selected by the preload spec, classed by how the
    /// preload touches them.
    pub fn of(image: &Image, spec: &PreloadSpec) -> PageCounts {
        let set = page_set(image, spec);
        PageCounts { x: set.count(RightsClass::X), ro: set.count(RightsClass::Ro), rw: set.count(RightsClass::Rw) }
    }
}

/// Number of times the preload runs, read off a run's statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreloadRuns {
    pub entries: u64,
    pub reentries: u64,
    pub commits: u64,
}

impl PreloadRuns {
    pub fn total(&self) -> u64 {
        self.entries + self.reentries + self.commits
    }

    pub fn from_stats(defense: Defense, stats: &RunStats) -> PreloadRuns {
        match defense {
            Defense::None => PreloadRuns::default(),
            Defense::Hw => PreloadRuns {
                entries: stats.eenters.saturating_sub(stats.handler_entries),
                reentries: stats.handler_entries,
                commits: 0,
            },
            // Every transaction start runs the preload: the first one, the
            // retries after aborts and the restarts after each split commit.
            Defense::Sw => {
                let entries = stats.eenters.min(stats.tx_begins);
                let aborts = stats.tx_aborts.total();
                PreloadRuns { entries, reentries: aborts, commits: stats.tx_begins.saturating_sub(entries + aborts) }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeledTime {
    pub preload_us: f64,
    pub preloads: u64,
    pub total_us: f64,
}

pub fn estimate_overhead(model: &CostModel, pages: &PageCounts, runs: &PreloadRuns) -> ModeledTime {
    let preload_us = model.preload_cost(pages);
    ModeledTime { preload_us, preloads: runs.total(), total_us: model.base_call + runs.total() as f64 * preload_us }
}

/// Modeled preload time for `n` pages of one class, for `n` in `counts`.
pub fn sweep(model: &CostModel, class: RightsClass, counts: impl IntoIterator<Item = usize>) -> Vec<(usize, f64)> {
    counts
        .into_iter()
        .map(|n| {
            let mut p = PageCounts::default();
            match class {
                RightsClass::X => p.x = n,
                RightsClass::Ro => p.ro = n,
                RightsClass::Rw => p.rw = n,
            }
            (n, estimate_overhead(model, &p, &PreloadRuns { entries: 1, ..Default::default() }).total_us)
        })
        .collect()
}
