//! Transaction splitting: a function-prologue counter that commits the
//! running transaction once an instruction budget is used up.

use serde::{Deserialize, Serialize};

use crate::defense_sw::COMMIT;
use crate::program::isa::{AluOp, Instr, Operand};
use crate::program::{Addr, DataPage, Program, Rights, Stmt};

pub const COUNTER_PAGE: &str = "__hb_counter";
const SKIP_LABEL: &str = "__txs_skip";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxSplitConfig {
    pub init_cntr: i64,
    pub func_skp: usize,
}

impl Default for TxSplitConfig {
    fn default() -> Self {
        TxSplitConfig { init_cntr: 1_800, func_skp: 1 }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TxSplitError {
    #[error("init_cntr must be at least 1, got {0}")]
    BadInit(i64),
    #[error("func_skp must be at least 1")]
    BadSkip,
    #[error("function `{0}` already uses the reserved label `{SKIP_LABEL}`")]
    LabelClash(String),
}

impl TxSplitConfig {
    pub fn validate(&self) -> Result<(), TxSplitError> {
        if self.init_cntr < 1 {
            return Err(TxSplitError::BadInit(self.init_cntr));
        }
        if self.func_skp < 1 {
            return Err(TxSplitError::BadSkip);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PassReport {
    pub instrumented: Vec<String>,
    pub skipped: Vec<String>,
    pub commit_sites: usize,
}

fn prologue(size: usize, init: i64) -> Vec<Stmt> {
    let counter = || Addr::sym(COUNTER_PAGE, 0);
    vec![
        Stmt::Instr(Instr::Read { dst: 7, addr: counter() }),
        Stmt::Instr(Instr::Alu { op: AluOp::Sub, dst: 7, src: Operand::Imm(size as i64) }),
        Stmt::Instr(Instr::Write { addr: counter(), src: 7 }),
        Stmt::Instr(Instr::Alu { op: AluOp::Lt, dst: 7, src: Operand::Imm(0) }),
        Stmt::Instr(Instr::BranchIfZero { reg: 7, label: SKIP_LABEL.into() }),
        Stmt::Instr(Instr::Call { function: COMMIT.into() }),
        Stmt::Instr(Instr::LoadImm { dst: 7, value: init }),
        Stmt::Instr(Instr::Write { addr: counter(), src: 7 }),
        Stmt::Label(SKIP_LABEL.into()),
    ]
}

/// Instruments every non-runtime function of at least `func_skp`
/// instructions. Size is the static instruction count before
/// instrumentation. Loops are left alone.
pub fn instrument(program: &Program, config: &TxSplitConfig) -> Result<(Program, PassReport), TxSplitError> {
    config.validate()?;
    let mut out = program.clone();
    let mut report = PassReport::default();
    for f in &mut out.functions {
        if f.name.starts_with("__") {
            continue;
        }
        let size = f.size();
        if size < config.func_skp {
            report.skipped.push(f.name.clone());
            continue;
        }
        if f.body.iter().any(|s| matches!(s, Stmt::Label(l) if l == SKIP_LABEL)) {
            return Err(TxSplitError::LabelClash(f.name.clone()));
        }
        let mut body = prologue(size, config.init_cntr);
        body.append(&mut f.body);
        f.body = body;
        report.instrumented.push(f.name.clone());
        report.commit_sites += 1;
    }
    if report.commit_sites > 0 {
        out.data_pages.push(DataPage::new(COUNTER_PAGE, Rights::RW).word(0, config.init_cntr));
    }
    Ok((out, report))
}

/// Upper bound on intermediate commits given the executed prologue mass.
pub fn commit_bound(prologue_mass: u64, init_cntr: i64) -> u64 {
    prologue_mass.div_ceil(init_cntr.max(1) as u64) + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::scenarios;

    #[test]
    fn boundary_of_the_size_guard() {
        let p = scenarios::fib_template(3);
        let fib = p.function(scenarios::FIB).unwrap().size();
        let main = p.function(scenarios::BODY).unwrap().size();
        let cfg = TxSplitConfig { init_cntr: 50, func_skp: fib };
        let (_, r) = instrument(&p, &cfg).unwrap();
        assert_eq!(r.instrumented, vec![scenarios::FIB.to_string()]);
        assert_eq!(r.skipped, vec![scenarios::BODY.to_string()]);
        assert!(main < fib);
        let cfg = TxSplitConfig { init_cntr: 50, func_skp: fib + 1 };
        let (q, r) = instrument(&p, &cfg).unwrap();
        assert_eq!(r.commit_sites, 0);
        assert_eq!(q, p);
    }

    #[test]
    fn prologue_shape() {
        let p = scenarios::fib_template(3);
        let (q, r) = instrument(&p, &TxSplitConfig { init_cntr: 50, func_skp: 1 }).unwrap();
        assert_eq!(r.commit_sites, 2);
        let f = q.function(scenarios::FIB).unwrap();
        assert_eq!(f.size(), p.function(scenarios::FIB).unwrap().size() + 8);
        assert_eq!(q.data_page(COUNTER_PAGE).unwrap().init, vec![(0, 50)]);
    }

    #[test]
    fn rejects_bad_config() {
        let p = scenarios::empty_body();
        assert_eq!(instrument(&p, &TxSplitConfig { init_cntr: 0, func_skp: 1 }).unwrap_err(), TxSplitError::BadInit(0));
        assert_eq!(instrument(&p, &TxSplitConfig { init_cntr: 1, func_skp: 0 }).unwrap_err(), TxSplitError::BadSkip);
    }
}
