//! TOML scenario configuration. Every key has a default; unknown keys are
//! rejected with the offending line and key.
//!
//! ```toml
//! defense = "sw"
//! strategy = "composite"
//!
//! [scenario]
//! name = "fib"
//! n = 10
//!
//! [txsplit]
//! init_cntr = 50
//!
//! [explore]
//! mode = "exhaustive"
//! depth = 30
//! ```

use serde::{Deserialize, Serialize};

use crate::attacker::Strategy;
use crate::defense_hw::PreloadSpec;
use crate::defense_sw::TsxConfig;
use crate::eval::load::{LoadPreset, LoadRun};
use crate::eval::{ExploreMode, RunOptions};
use crate::machine::PlatformConfig;
use crate::scenario::{Defense, ScenarioKind, ScenarioSpec};
use crate::sim::RandomSchedule;
use crate::txsplit::TxSplitConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown load preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Random,
    Exhaustive,
}

/// Schedule exploration. Defaults: random, seed 0, 1000 samples, depth 30,
/// budget 5,000,000 states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub mode: ModeName,
    pub seed: u64,
    pub samples: u64,
    /// Exhaustive schedule depth in ticks.
    pub depth: usize,
    pub budget: u64,
    /// Shape of random schedule prefixes.
    pub schedule: RandomSchedule,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            mode: ModeName::Random,
            seed: 0,
            samples: 1_000,
            depth: 30,
            budget: 5_000_000,
            schedule: RandomSchedule::default(),
        }
    }
}

impl ExploreConfig {
    pub fn mode(&self) -> ExploreMode {
        match self.mode {
            ModeName::Random => {
                ExploreMode::Random { seed: self.seed, samples: self.samples, schedule: self.schedule.clone() }
            }
            ModeName::Exhaustive => ExploreMode::Exhaustive { depth: self.depth, budget: self.budget },
        }
    }
}

/// Load model. Defaults: preset `idle`, 1000 simulated seconds, seed 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    pub preset: String,
    /// Overrides the preset's interrupt rate.
    pub interrupt_rate: Option<f64>,
    /// Overrides the preset's conflict rate.
    pub conflict_rate: Option<f64>,
    pub duration_s: u64,
    pub seed: u64,
    pub run: LoadRun,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            preset: "idle".into(),
            interrupt_rate: None,
            conflict_rate: None,
            duration_s: 1_000,
            seed: 0,
            run: LoadRun::default(),
        }
    }
}

impl LoadConfig {
    pub fn preset(&self) -> Result<LoadPreset, ConfigFileError> {
        let mut p = LoadPreset::by_name(&self.preset).ok_or_else(|| ConfigFileError::UnknownPreset(self.preset.clone()))?;
        if let Some(r) = self.interrupt_rate {
            p.interrupt_rate = r;
        }
        if let Some(r) = self.conflict_rate {
            p.conflict_rate = r;
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Built-in scenario and its parameter, e.g. `name = "fib"`, `n = 10`.
    pub scenario: ScenarioKind,
    pub defense: Defense,
    pub strategy: Strategy,
    /// Secret set; defaults to the scenario's own.
    pub secrets: Option<Vec<Vec<i64>>>,
    pub platform: PlatformConfig,
    pub tsx: TsxConfig,
    /// Transaction splitting, applied for defense `sw` only.
    pub txsplit: Option<TxSplitConfig>,
    pub preload: PreloadSpec,
    pub explore: ExploreConfig,
    pub load: LoadConfig,
    pub run: RunOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::default(),
            defense: Defense::None,
            strategy: Strategy::PageFaultEvict,
            secrets: None,
            platform: PlatformConfig::default(),
            tsx: TsxConfig::default(),
            txsplit: None,
            preload: PreloadSpec::default(),
            explore: ExploreConfig::default(),
            load: LoadConfig::default(),
            run: RunOptions::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigFileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn read(path: &std::path::Path) -> Result<ScenarioConfig, ConfigFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigFileError::Io { path: path.display().to_string(), source })?;
        ScenarioConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.scenario.clone(),
            defense: self.defense,
            platform: self.platform.clone(),
            tsx: self.tsx.clone(),
            txsplit: self.txsplit.clone().filter(|_| self.defense == Defense::Sw),
            preload: self.preload.clone(),
            secrets: self.secrets.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ScenarioConfig::parse("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn sections_and_tagged_scenario() {
        let c = ScenarioConfig::parse(
            "defense = \"sw\"\nstrategy = \"ad-poller\"\n[scenario]\nname = \"fib\"\nn = 7\n\
             [txsplit]\ninit_cntr = 50\n[platform]\nhyperthreading = true\n[explore]\nmode = \"exhaustive\"\n",
        )
        .unwrap();
        assert_eq!(c.scenario, ScenarioKind::Fib { n: 7 });
        assert_eq!(c.strategy, Strategy::AdPoller);
        assert_eq!(c.txsplit.as_ref().unwrap().init_cntr, 50);
        assert_eq!(c.txsplit.as_ref().unwrap().func_skp, 1);
        assert!(c.platform.hyperthreading);
        assert_eq!(c.explore.mode(), ExploreMode::Exhaustive { depth: 30, budget: 5_000_000 });
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let e = ScenarioConfig::parse("defense = \"hw\"\n[tsx]\nwrite_capacity = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        assert!(e.contains("write_capacity"), "{e}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ScenarioConfig::default();
        c.scenario = ScenarioKind::Tlbfill { rw_pages: 325 };
        c.txsplit = Some(TxSplitConfig::default());
        c.load.interrupt_rate = Some(5.0);
        assert_eq!(ScenarioConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn txsplit_dropped_without_sw() {
        let mut c = ScenarioConfig::default();
        c.txsplit = Some(TxSplitConfig::default());
        assert!(c.spec().txsplit.is_none());
        c.defense = Defense::Sw;
        assert!(c.spec().txsplit.is_some());
    }
}
