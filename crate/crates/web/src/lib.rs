//! Browser bindings: three small experiments returning JSON for the page in
//! `www/`.

use heisenlab::attacker::Strategy;
use heisenlab::eval::cost::PreloadRuns;
use heisenlab::eval::{run_pair, RunOptions};
use heisenlab::program::scenarios;
use heisenlab::scenario::{Defense, Scenario, ScenarioKind, ScenarioSpec};
use heisenlab::sim::{self, Schedule, Sim};
use heisenlab::txsplit::TxSplitConfig;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(e: impl std::fmt::Display) -> Value {
    json!({ "error": e.to_string() })
}

fn genome_traces(defense: &str, strategy: &str) -> Result<Value, String> {
    let defense = Defense::parse(defense).ok_or_else(|| format!("unknown defense `{defense}`"))?;
    let strategy = Strategy::parse(strategy).map_err(|e| e.to_string())?;
    let s = Scenario::build(ScenarioSpec::new(ScenarioKind::Genome { width: 1 }, defense)).map_err(|e| e.to_string())?;
    let r = run_pair(&s, strategy, &s.secrets[0], &s.secrets[1], &Schedule::interleaved(), &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    for secret in &s.secrets {
        let mut m = Sim::new(&s, secret, strategy).map_err(|e| e.to_string())?;
        sim::run(&mut m, &Schedule::interleaved(), 1_000_000).map_err(|e| e.to_string())?;
        traces.push(json!({
            "secret": secret,
            "exits": m.trace.exits(),
            "trace": m.trace.items.iter().map(|o| o.to_string()).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({
        "defense": defense.name(),
        "strategy": strategy.name(),
        "equal": r.traces_equal,
        "divergence": r.first_divergence.map(|d| d.index),
        "protection": s.protection_label(),
        "runs": traces,
    }))
}

/// Genome lookup with secrets 0 and 1 under one interleaved schedule: both
/// attacker traces and whether they differ.
#[wasm_bindgen]
pub fn compare_traces(defense: &str, strategy: &str) -> String {
    genome_traces(defense, strategy).unwrap_or_else(error).to_string()
}

fn tsx(lines: usize) -> Result<Value, String> {
    let s = Scenario::build(ScenarioSpec::new(ScenarioKind::TsxWrites { lines }, Defense::None)).map_err(|e| e.to_string())?;
    let mut m = Sim::new(&s, &[], Strategy::Passive).map_err(|e| e.to_string())?;
    sim::run(&mut m, &Schedule::interleaved(), 10_000_000).map_err(|e| e.to_string())?;
    Ok(json!({
        "lines": lines,
        "capacity": s.spec.tsx.write_capacity_lines,
        "committed": m.machine.peek_symbol(scenarios::RESULT_PAGE, 0) == Some(1),
        "aborts": m.machine.stats.tx_aborts.total(),
    }))
}

/// One transaction writing `lines` distinct cache lines.
#[wasm_bindgen]
pub fn tsx_write_set(lines: u32) -> String {
    tsx(lines as usize).unwrap_or_else(error).to_string()
}

fn split(n: i64, init_cntr: i64) -> Result<Value, String> {
    let mut spec = ScenarioSpec::new(ScenarioKind::Fib { n }, Defense::Sw);
    spec.txsplit = Some(TxSplitConfig { init_cntr, func_skp: 1 });
    let s = Scenario::build(spec).map_err(|e| e.to_string())?;
    let mut m = Sim::new(&s, &[0], Strategy::Passive).map_err(|e| e.to_string())?;
    let end = sim::run(&mut m, &Schedule::interleaved(), 50_000_000).map_err(|e| e.to_string())?;
    let runs = PreloadRuns::from_stats(Defense::Sw, &m.machine.stats);
    Ok(json!({
        "n": n,
        "init_cntr": init_cntr,
        "end": end.describe(),
        "output": m.machine.peek_symbol(scenarios::OUT_PAGE, 0),
        "intermediate_commits": runs.commits,
        "instructions": m.machine.stats.retired,
        "instrumented": s.pass_report.map(|r| r.instrumented),
    }))
}

/// Recursive Fibonacci under the SW defense with transaction splitting.
#[wasm_bindgen]
pub fn split_fib(n: i32, init_cntr: i32) -> String {
    split(n as i64, init_cntr as i64).unwrap_or_else(error).to_string()
}
