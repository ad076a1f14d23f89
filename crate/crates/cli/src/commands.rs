use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use heisenlab::attacker::{builtin_strategies, Strategy};
use heisenlab::config::{ConfigFileError, ModeName, ScenarioConfig};
use heisenlab::defense_hw::PreloadSpec;
use heisenlab::eval::cost::{estimate_overhead, CostModel, PageCounts, PreloadRuns};
use heisenlab::eval::load::{run_under_load, simulate_load, LoadPreset};
use heisenlab::eval::{explore, report, EvalError, LeakageReport};
use heisenlab::machine::{RunStats, PlatformConfig};
use heisenlab::program::{asm, scenarios};
use heisenlab::scenario::{Defense, Scenario, ScenarioError, ScenarioKind};
use heisenlab::sim::{self, Schedule, Sim, SimError};
use heisenlab::txsplit::{self, PassReport, TxSplitConfig, TxSplitError};
use serde::Serialize;

use crate::{CommonArgs, Command, Emit, ExploreArgs, LoadArgs, Mode, RunArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigFileError),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    TxSplit(#[from] TxSplitError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        2
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn dispatch(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Explore(a) => explore_cmd(a),
        Command::Instrument(a) => instrument(a),
        Command::LoadSim(a) => load_sim(a),
        Command::List => {
            print!("{}", listing());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Config file (or defaults) with the flags applied on top.
fn config(a: &CommonArgs) -> Result<ScenarioConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => ScenarioConfig::read(p)?,
        None => ScenarioConfig::default(),
    };
    let name = a.scenario.clone().unwrap_or_else(|| c.scenario.name().to_string());
    if a.scenario.is_some() || a.n.is_some() {
        c.scenario = ScenarioKind::from_name(&name, a.n)
            .ok_or_else(|| usage(format!("unknown scenario `{name}` (try `heisenlab list`)")))?;
    }
    if let Some(d) = &a.defense {
        c.defense = Defense::parse(d).ok_or_else(|| usage(format!("unknown defense `{d}` (none, hw, sw)")))?;
    }
    if let Some(s) = a.strategy.as_deref().filter(|s| *s != "all") {
        c.strategy = Strategy::parse(s).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(ht) = a.hyperthreading {
        c.platform.hyperthreading = ht;
    }
    if a.init_cntr.is_some() || a.func_skp.is_some() {
        let t = c.txsplit.get_or_insert_with(TxSplitConfig::default);
        if let Some(v) = a.init_cntr {
            t.init_cntr = v;
        }
        if let Some(v) = a.func_skp {
            t.func_skp = v;
        }
    }
    if a.preload_read_only {
        c.preload = PreloadSpec::read_only_fallback();
    }
    Ok(c)
}

fn emits(a: &CommonArgs) -> Vec<Emit> {
    if a.emit.is_empty() {
        vec![Emit::Report]
    } else {
        a.emit.clone()
    }
}

fn write_out(out: Option<&Path>, file: &str, content: &str) -> Result<(), CliError> {
    match out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(dir) => {
            let io = |source| CliError::Io { path: dir.join(file).display().to_string(), source };
            std::fs::create_dir_all(dir).map_err(io)?;
            std::fs::write(dir.join(file), content).map_err(io)
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct RunReport {
    scenario: String,
    defense: &'static str,
    protection: &'static str,
    strategy: &'static str,
    secret: Vec<i64>,
    end: String,
    stats: RunStats,
    trace_len: usize,
    enclave_exits: usize,
    preloads: PreloadRuns,
    /// Transactions committed early by the splitting pass.
    intermediate_commits: u64,
    pass_report: Option<PassReport>,
    pages: PageCounts,
    modeled_preload_us: f64,
    output: Option<Vec<i64>>,
}

fn run(a: RunArgs) -> Result<ExitCode, CliError> {
    if a.common.strategy.as_deref() == Some("all") {
        return Err(usage("run takes a single strategy"));
    }
    let c = config(&a.common)?;
    let s = Scenario::build(c.spec())?;
    let secret = s
        .secrets
        .get(a.secret)
        .ok_or_else(|| usage(format!("secret index {} out of range (have {})", a.secret, s.secrets.len())))?
        .clone();
    let em = emits(&a.common);
    let mut sm = Sim::new(&s, &secret, c.strategy)
        .map_err(|e| CliError::Eval(e.into()))?
        .with_timing(c.run.timing)
        .with_log(em.contains(&Emit::Log));
    let end = sim::run(&mut sm, &Schedule::interleaved(), c.run.max_ticks)?;
    let stats = sm.machine.stats.clone();
    let preloads = PreloadRuns::from_stats(s.spec.defense, &stats);
    let pages = match s.spec.defense {
        Defense::None => PageCounts::default(),
        _ => PageCounts::of(&s.image, &s.spec.preload),
    };
    let modeled = estimate_overhead(&CostModel::default(), &pages, &preloads);
    let output = s
        .image
        .vpn_of(scenarios::OUT_PAGE)
        .map(|_| (0..4).map(|w| sm.machine.peek_symbol(scenarios::OUT_PAGE, w).unwrap_or(0)).collect());
    let r = RunReport {
        scenario: s.id(),
        defense: s.spec.defense.name(),
        protection: s.protection_label(),
        strategy: c.strategy.name(),
        secret,
        end: end.describe(),
        trace_len: sm.trace.len(),
        enclave_exits: sm.trace.exits(),
        intermediate_commits: preloads.commits,
        preloads,
        pass_report: s.pass_report.clone(),
        pages,
        modeled_preload_us: modeled.total_us,
        output,
        stats,
    };
    let out = a.common.out.as_deref();
    for e in em {
        match e {
            Emit::Log => write_out(out, "events.log", &sm.machine.log.to_lines())?,
            Emit::Trace => write_out(out, "trace.txt", &sm.trace.to_lines())?,
            Emit::Report => write_out(out, "report.json", &json(&r))?,
            Emit::Csv => {
                let mut w = String::from("scenario,defense,strategy,end,ticks,retired,aex,tx_commits,intermediate_commits,trace_len\n");
                let _ = writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.scenario,
                    r.defense,
                    r.strategy,
                    r.end.replace(',', ";"),
                    r.stats.ticks,
                    r.stats.retired,
                    r.stats.aex.total(),
                    r.stats.tx_commits,
                    r.intermediate_commits,
                    r.trace_len
                );
                write_out(out, "run.csv", &w)?
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn explore_cmd(a: ExploreArgs) -> Result<ExitCode, CliError> {
    let mut c = config(&a.common)?;
    if let Some(m) = a.mode {
        c.explore.mode = match m {
            Mode::Random => ModeName::Random,
            Mode::Exhaustive => ModeName::Exhaustive,
        };
    }
    if let Some(d) = a.schedule_depth {
        c.explore.depth = d;
        c.explore.schedule.depth = d;
    }
    if let Some(n) = a.samples {
        c.explore.samples = n;
    }
    if let Some(s) = a.seed {
        c.explore.seed = s;
    }
    if let Some(b) = a.budget {
        c.explore.budget = b;
    }
    let strategies =
        if a.common.strategy.as_deref() == Some("all") { builtin_strategies() } else { vec![c.strategy] };
    let s = Scenario::build(c.spec())?;
    let mode = c.explore.mode();
    let mut reports: Vec<LeakageReport> = Vec::new();
    for st in strategies {
        let r = explore(&s, st, &s.secrets, &mode, &c.run)?;
        eprintln!("{}", report::summary_line(&r));
        reports.push(r);
    }
    let out = a.common.out.as_deref();
    for e in emits(&a.common) {
        match e {
            Emit::Report => write_out(out, "reports.jsonl", &report::to_json_lines(&reports))?,
            Emit::Csv => write_out(out, "explore.csv", &report::to_csv(&reports).map_err(|e| usage(e.to_string()))?)?,
            Emit::Log | Emit::Trace => return Err(usage("explore emits `report` and `csv`; use `run` for logs and traces")),
        }
    }
    if reports.iter().any(LeakageReport::violation) {
        eprintln!("property violation: traces differ although the defense claims protection");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn instrument(a: CommonArgs) -> Result<ExitCode, CliError> {
    let c = config(&a)?;
    let tx = c.txsplit.clone().unwrap_or_default();
    let (p, r) = txsplit::instrument(&c.scenario.program(), &tx)?;
    let out = a.out.as_deref();
    write_out(out, "instrumented.s", &asm::print(&p))?;
    for e in emits(&a) {
        match e {
            Emit::Report => {
                if out.is_some() {
                    write_out(out, "pass.json", &json(&r))?;
                } else {
                    eprint!("{}", json(&r));
                }
            }
            _ => return Err(usage("instrument emits `report` only")),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_sim(a: LoadArgs) -> Result<ExitCode, CliError> {
    let c = config(&a.common)?;
    let presets: Vec<LoadPreset> = match a.preset.as_deref() {
        Some("all") => LoadPreset::builtin(),
        None if a.common.config.is_none() => LoadPreset::builtin(),
        Some(name) => {
            let mut l = c.load.clone();
            l.preset = name.into();
            vec![l.preset()?]
        }
        None => vec![c.load.preset()?],
    };
    let duration = a.duration.unwrap_or(c.load.duration_s);
    let seed = a.seed.unwrap_or(c.load.seed);
    let scenario = match a.common.scenario {
        Some(_) => Some(Scenario::build(c.spec())?),
        None => None,
    };
    let mut table = String::from("preset,interrupt_rate,conflict_rate,median_interrupts,median_conflicts");
    table.push_str(if scenario.is_some() { ",run_end,run_ticks\n" } else { "\n" });
    let mut samples = Vec::new();
    let mut per_second = String::from("preset,second,interrupt_aborts,conflict_aborts\n");
    for p in &presets {
        let s = simulate_load(p, duration, seed).map_err(|e| usage(e.to_string()))?;
        let _ = write!(table, "{},{},{},{},{}", p.name, p.interrupt_rate, p.conflict_rate, s.median_interrupts, s.median_conflicts);
        if let Some(sc) = &scenario {
            let secret = sc.secrets.first().cloned().unwrap_or_default();
            let o = run_under_load(sc, &secret, p, &c.load.run, seed).map_err(|e| CliError::Eval(e.into()))?;
            let _ = write!(table, ",{},{}", o.end.describe().replace(',', ";"), o.ticks);
        }
        table.push('\n');
        for (i, (ni, nc)) in s.per_second.iter().enumerate() {
            let _ = writeln!(per_second, "{},{i},{ni},{nc}", p.name);
        }
        samples.push(s);
    }
    let out = a.common.out.as_deref();
    for e in emits(&a.common) {
        match e {
            Emit::Report => write_out(out, "load.csv", &table)?,
            Emit::Csv => write_out(out, "load_per_second.csv", &per_second)?,
            _ => return Err(usage("load-sim emits `report` and `csv`")),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn listing() -> String {
    let mut s = String::from("scenarios:");
    for n in ScenarioKind::NAMES {
        let k = ScenarioKind::from_name(n, None).expect("listed names parse");
        let _ = write!(s, " {n}({})", k.id());
    }
    s.push_str("\ndefenses: none hw sw\nstrategies:");
    for st in Strategy::ALL {
        let _ = write!(s, " {st}");
    }
    s.push_str("\npresets:");
    for p in LoadPreset::builtin() {
        let _ = write!(s, " {}({}/s)", p.name, p.interrupt_rate);
    }
    let p = PlatformConfig::default();
    let _ = writeln!(s, "\nplatform: tlb {}x{}, {} physical cores, hyperthreading {}", p.tlb_sets, p.tlb_ways, p.physical_cores, p.hyperthreading);
    s
}
