//! Scenario descriptions: a built-in program, a defense and the platform it
//! runs on, linked into a loaded image.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::defense_hw::{self, HwOptions, PreloadSpec};
use crate::defense_sw::{self, TsxConfig};
use crate::machine::{Machine, MachineError, PlatformConfig};
use crate::program::scenarios as sc;
use crate::program::{asm, load, Image, LoadError, Program, RightsClass};
use crate::txsplit::{self, PassReport, TxSplitConfig, TxSplitError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    #[default]
    None,
    Hw,
    Sw,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Hw => "hw",
            Defense::Sw => "sw",
        }
    }

    pub fn parse(s: &str) -> Option<Defense> {
        match s {
            "none" => Some(Defense::None),
            "hw" => Some(Defense::Hw),
            "sw" => Some(Defense::Sw),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", deny_unknown_fields)]
pub enum ScenarioKind {
    Genome { width: usize },
    Otp,
    Fib { n: i64 },
    Tlbfill { rw_pages: usize },
    TsxWrites { lines: usize },
    Straight { len: usize },
    Empty,
    Large { pages: usize },
    Spin { iterations: i64 },
}

impl Default for ScenarioKind {
    fn default() -> Self {
        ScenarioKind::Genome { width: 1 }
    }
}

impl ScenarioKind {
    pub fn id(&self) -> String {
        match self {
            ScenarioKind::Genome { width } => format!("genome{width}"),
            ScenarioKind::Otp => "otp".into(),
            ScenarioKind::Fib { n } => format!("fib{n}"),
            ScenarioKind::Tlbfill { rw_pages } => format!("tlbfill{rw_pages}"),
            ScenarioKind::TsxWrites { lines } => format!("tsx_writes{lines}"),
            ScenarioKind::Straight { len } => format!("straight{len}"),
            ScenarioKind::Empty => "empty".into(),
            ScenarioKind::Large { pages } => format!("large{pages}"),
            ScenarioKind::Spin { iterations } => format!("spin{iterations}"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Genome { .. } => "genome",
            ScenarioKind::Otp => "otp",
            ScenarioKind::Fib { .. } => "fib",
            ScenarioKind::Tlbfill { .. } => "tlbfill",
            ScenarioKind::TsxWrites { .. } => "tsx_writes",
            ScenarioKind::Straight { .. } => "straight",
            ScenarioKind::Empty => "empty",
            ScenarioKind::Large { .. } => "large",
            ScenarioKind::Spin { .. } => "spin",
        }
    }

    /// Names accepted by [`ScenarioKind::from_name`].
    pub const NAMES: [&'static str; 9] =
        ["genome", "otp", "fib", "tlbfill", "tsx_writes", "straight", "empty", "large", "spin"];

    /// Builds a kind from its name and a single size parameter.
    pub fn from_name(name: &str, param: Option<i64>) -> Option<ScenarioKind> {
        let p = |d: i64| param.unwrap_or(d);
        Some(match name {
            "genome" => ScenarioKind::Genome { width: p(1) as usize },
            "otp" => ScenarioKind::Otp,
            "fib" => ScenarioKind::Fib { n: p(10) },
            "tlbfill" => ScenarioKind::Tlbfill { rw_pages: p(324) as usize },
            "tsx_writes" => ScenarioKind::TsxWrites { lines: p(488) as usize },
            "straight" => ScenarioKind::Straight { len: p(200) as usize },
            "empty" => ScenarioKind::Empty,
            "large" => ScenarioKind::Large { pages: p(439) as usize },
            "spin" => ScenarioKind::Spin { iterations: p(100_000) },
            _ => return None,
        })
    }

    pub fn program(&self) -> Program {
        match *self {
            ScenarioKind::Genome { width } => sc::genome_template(width),
            ScenarioKind::Otp => sc::otp_template(),
            ScenarioKind::Fib { n } => sc::fib_template(n),
            ScenarioKind::Tlbfill { rw_pages } => sc::tlbfill(rw_pages),
            ScenarioKind::TsxWrites { lines } => sc::tsx_writes(lines),
            ScenarioKind::Straight { len } => sc::straight_region(len),
            ScenarioKind::Empty => sc::empty_body(),
            ScenarioKind::Large { pages } => sc::large(pages),
            ScenarioKind::Spin { iterations } => sc::spin(iterations),
        }
    }

    pub fn default_secrets(&self) -> Vec<Vec<i64>> {
        match *self {
            ScenarioKind::Genome { width } => sc::genome_secrets(width),
            ScenarioKind::Otp => sc::otp_secrets(),
            ScenarioKind::Fib { .. } => sc::fib_secrets(),
            _ => vec![vec![]],
        }
    }

    /// Whether the program brings its own entry point.
    pub fn is_raw(&self) -> bool {
        matches!(self, ScenarioKind::TsxWrites { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub defense: Defense,
    pub platform: PlatformConfig,
    pub tsx: TsxConfig,
    pub txsplit: Option<TxSplitConfig>,
    pub preload: PreloadSpec,
    /// Overrides the scenario's default secret set.
    pub secrets: Option<Vec<Vec<i64>>>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, defense: Defense) -> Self {
        ScenarioSpec { kind, defense, ..ScenarioSpec::default() }
    }

    pub fn with_ht(mut self, ht: bool) -> Self {
        self.platform.hyperthreading = ht;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("load failed: {0}")]
    Load(#[from] LoadError),
    #[error("txsplit: {0}")]
    TxSplit(#[from] TxSplitError),
    #[error("assembly: {0}")]
    Asm(#[from] asm::ParseError),
    #[error("{0}")]
    Machine(#[from] MachineError),
    #[error("{0}")]
    Unsupported(String),
}

/// A linked scenario, shared read-only by all runs.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub user: Program,
    pub program: Program,
    pub image: Arc<Image>,
    pub secrets: Vec<Vec<i64>>,
    /// Page the targeted strategies aim at.
    pub target: Option<u64>,
    pub pages: Vec<(u64, RightsClass)>,
    /// Logical core of each enclave thread.
    pub placement: Vec<usize>,
    pub attacker_core: Option<usize>,
    pub pass_report: Option<PassReport>,
}

pub fn link_none(user: &Program, platform: &PlatformConfig) -> Result<(Program, Image), LoadError> {
    let rt = asm::parse(&format!(
        ".entry __ecall\n.thread __ecall\n.func __ecall\n  call {}\n  loadi r0, 0\n  eexit\n",
        sc::BODY
    ))
    .expect("runtime assembles");
    if user.function(sc::BODY).is_none() {
        return Err(LoadError::UnknownSymbol(sc::BODY.into()));
    }
    let mut p = defense_hw::attach_runtime(rt, user, false);
    p.nssa = user.nssa.max(1);
    let img = load(&p, platform)?;
    Ok((p, img))
}

impl Scenario {
    pub fn build(spec: ScenarioSpec) -> Result<Scenario, ScenarioError> {
        let user = spec.kind.program();
        Scenario::from_user(spec, user)
    }

    /// Builds a scenario around a custom body program (must define `main`,
    /// or its own threads for defense `none`).
    pub fn from_user(spec: ScenarioSpec, user: Program) -> Result<Scenario, ScenarioError> {
        spec.platform.validate().map_err(MachineError::from)?;
        spec.tsx.validate().map_err(MachineError::from)?;
        let raw = !user.threads.is_empty();
        if raw && spec.defense != Defense::None {
            return Err(ScenarioError::Unsupported(format!(
                "scenario `{}` has its own entry point and runs without a defense",
                spec.kind.id()
            )));
        }
        let (instrumented, pass_report) = match (&spec.txsplit, spec.defense) {
            (Some(cfg), Defense::Sw) => {
                let (p, r) = txsplit::instrument(&user, cfg)?;
                (p, Some(r))
            }
            (Some(_), _) => return Err(ScenarioError::Unsupported("txsplit applies to defense sw only".into())),
            (None, _) => (user.clone(), None),
        };
        let (program, image) = match spec.defense {
            Defense::None if raw => {
                let img = load(&user, &spec.platform)?;
                (user.clone(), img)
            }
            Defense::None => link_none(&instrumented, &spec.platform)?,
            Defense::Hw => {
                let opts = HwOptions { hyperthreading: spec.platform.hyperthreading, preload: spec.preload.clone() };
                defense_hw::link(&instrumented, &opts, &spec.platform)?
            }
            Defense::Sw => defense_sw::link(&instrumented, &spec.preload, &spec.platform)?,
        };
        let secrets = spec.secrets.clone().unwrap_or_else(|| spec.kind.default_secrets());
        let target = target_page(&spec.kind, &image);
        let pages = image.pages.iter().map(|p| (p.vpn, p.class())).collect();
        let placement: Vec<usize> = (0..image.threads.len()).collect();
        let nl = spec.platform.logical_cores();
        // The OS prefers the HT sibling of the first enclave thread.
        let attacker_core = (0..nl).find(|c| !placement.contains(c));
        Ok(Scenario {
            spec,
            user,
            program,
            image: Arc::new(image),
            secrets,
            target,
            pages,
            placement,
            attacker_core,
            pass_report,
        })
    }

    pub fn id(&self) -> String {
        self.spec.kind.id()
    }

    pub fn machine(&self, secret: &[i64]) -> Result<Machine, MachineError> {
        Machine::new(
            self.spec.platform.clone(),
            self.spec.tsx.clone(),
            self.image.clone(),
            &self.placement,
            secret,
        )
    }

    /// Whether the defense claims noninterference on this platform.
    pub fn claims_protection(&self) -> bool {
        match self.spec.defense {
            Defense::None => false,
            Defense::Hw => true,
            Defense::Sw => defense_sw::full_protection(&self.spec.platform),
        }
    }

    /// Report tag for the protection level.
    pub fn protection_label(&self) -> &'static str {
        match self.spec.defense {
            Defense::None => "none",
            _ if self.claims_protection() => "full",
            _ => "raised-bar only",
        }
    }
}

fn target_page(kind: &ScenarioKind, image: &Image) -> Option<u64> {
    match kind {
        ScenarioKind::Genome { .. } => image.function(sc::ADD_DESCRIPTION).map(|f| f.start / crate::program::PAGE_SIZE),
        ScenarioKind::Otp => image.vpn_of(sc::TABLE_PAGES[1]),
        ScenarioKind::Fib { .. } => image.vpn_of(sc::OUT_PAGE),
        _ => image.pages.iter().find(|p| p.kind == crate::program::layout::PageKind::Data).map(|p| p.vpn),
    }
}
