//! Text assembly format.
//!
//! ```text
//! .nssa 2
//! .entry main
//! .thread main
//! .secret key 0
//! .func main own_page
//! loop:
//!   read r1, [key+8]
//!   bnz r1, loop
//!   ret
//! .page key rw
//! .word 0 42
//! ```

use std::fmt::Write as _;

use super::isa::{Addr, AluOp, Instr, Operand, Reg, NUM_REGS};
use super::{DataPage, Function, Program, Rights, SecretSlot, Stmt, ThreadSpec};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub fn print(p: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".nssa {}", p.nssa);
    for e in &p.entry_points {
        let _ = writeln!(out, ".entry {e}");
    }
    for t in &p.threads {
        match &t.handler {
            Some(h) => {
                let _ = writeln!(out, ".thread {} {h}", t.entry);
            }
            None => {
                let _ = writeln!(out, ".thread {}", t.entry);
            }
        }
    }
    for s in &p.secret_slots {
        let _ = writeln!(out, ".secret {} {}", s.page, s.word);
    }
    for f in &p.functions {
        let _ = writeln!(out, ".func {}{}", f.name, if f.own_page { " own_page" } else { "" });
        for s in &f.body {
            match s {
                Stmt::Label(l) => {
                    let _ = writeln!(out, "{l}:");
                }
                Stmt::Instr(i) => {
                    let _ = writeln!(out, "  {i}");
                }
            }
        }
    }
    for d in &p.data_pages {
        let r = if d.rights.w { "rw" } else { "ro" };
        let _ = writeln!(out, ".page {} {r}", d.name);
        for (w, v) in &d.init {
            let _ = writeln!(out, ".word {w} {v}");
        }
    }
    out
}

enum Section {
    None,
    Func(usize),
    Page(usize),
}

pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut p = Program::default();
    let mut section = Section::None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |message: String| ParseError { line, message };
        let stripped = raw.split(';').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        if let Some(dir) = stripped.strip_prefix('.') {
            let mut parts = dir.split_whitespace();
            let name = parts.next().unwrap_or("");
            let args: Vec<&str> = parts.collect();
            let want = |k: usize| -> Result<(), ParseError> {
                if args.len() < k {
                    Err(err(format!(".{name} expects {k} argument(s)")))
                } else {
                    Ok(())
                }
            };
            match name {
                "nssa" => {
                    want(1)?;
                    p.nssa = args[0].parse().map_err(|_| err(format!("bad count `{}`", args[0])))?;
                }
                "entry" => {
                    want(1)?;
                    p.entry_points.push(args[0].to_string());
                }
                "thread" => {
                    want(1)?;
                    p.threads.push(ThreadSpec {
                        entry: args[0].to_string(),
                        handler: args.get(1).map(|s| s.to_string()),
                    });
                }
                "secret" => {
                    want(2)?;
                    let word = args[1].parse().map_err(|_| err(format!("bad word index `{}`", args[1])))?;
                    p.secret_slots.push(SecretSlot { page: args[0].to_string(), word });
                }
                "func" => {
                    want(1)?;
                    let mut f = Function::new(args[0]);
                    match args.get(1) {
                        None => {}
                        Some(&"own_page") => f.own_page = true,
                        Some(other) => return Err(err(format!("unknown function flag `{other}`"))),
                    }
                    p.functions.push(f);
                    section = Section::Func(p.functions.len() - 1);
                }
                "page" => {
                    want(2)?;
                    let rights = match args[1] {
                        "ro" => Rights::RO,
                        "rw" => Rights::RW,
                        other => return Err(err(format!("page rights must be ro or rw, got `{other}`"))),
                    };
                    p.data_pages.push(DataPage::new(args[0], rights));
                    section = Section::Page(p.data_pages.len() - 1);
                }
                "word" => {
                    want(2)?;
                    let Section::Page(i) = section else {
                        return Err(err(".word outside of a .page".into()));
                    };
                    let w = args[0].parse().map_err(|_| err(format!("bad word index `{}`", args[0])))?;
                    let v = parse_imm(args[1]).ok_or_else(|| err(format!("bad value `{}`", args[1])))?;
                    p.data_pages[i].init.push((w, v));
                }
                other => return Err(err(format!("unknown directive `.{other}`"))),
            }
            continue;
        }
        let Section::Func(fi) = section else {
            return Err(err("instruction outside of a .func".into()));
        };
        if let Some(label) = stripped.strip_suffix(':') {
            if !is_ident(label) {
                return Err(err(format!("bad label `{label}`")));
            }
            p.functions[fi].body.push(Stmt::Label(label.to_string()));
            continue;
        }
        let instr = parse_instr(stripped).map_err(err)?;
        p.functions[fi].body.push(Stmt::Instr(instr));
    }
    Ok(p)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_imm(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()? as i64
    } else {
        body.parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_reg(s: &str) -> Option<Reg> {
    let n: usize = s.strip_prefix('r')?.parse().ok()?;
    (n < NUM_REGS && s.len() == 2).then_some(n as Reg)
}

fn parse_addr(s: &str) -> Result<Addr, String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, got `{s}`"))?
        .trim();
    let mut addr = Addr { base: None, sym: None, offset: 0 };
    let mut rest = inner;
    let mut sign = 1i64;
    let mut first = true;
    while !rest.is_empty() {
        if !first {
            match rest.as_bytes()[0] {
                b'+' => sign = 1,
                b'-' => sign = -1,
                _ => return Err(format!("bad memory operand `{s}`")),
            }
            rest = rest[1..].trim_start();
        } else if let Some(r) = rest.strip_prefix('-') {
            sign = -1;
            rest = r;
        }
        first = false;
        let end = rest.find(['+', '-']).unwrap_or(rest.len());
        let term = rest[..end].trim();
        rest = rest[end..].trim_start();
        if let Some(r) = parse_reg(term) {
            if sign < 0 || addr.base.is_some() {
                return Err(format!("bad base register in `{s}`"));
            }
            addr.base = Some(r);
        } else if let Some(v) = parse_imm(term) {
            addr.offset = addr.offset.wrapping_add(sign.wrapping_mul(v));
        } else if is_ident(term) {
            if sign < 0 || addr.sym.is_some() {
                return Err(format!("bad symbol in `{s}`"));
            }
            addr.sym = Some(term.to_string());
        } else {
            return Err(format!("bad term `{term}` in `{s}`"));
        }
    }
    Ok(addr)
}

fn split_operands(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

fn parse_instr(text: &str) -> Result<Instr, String> {
    let (mn, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let ops = split_operands(rest);
    let argc = |k: usize| -> Result<(), String> {
        if ops.len() == k {
            Ok(())
        } else {
            Err(format!("`{mn}` takes {k} operand(s), got {}", ops.len()))
        }
    };
    let reg = |i: usize| parse_reg(ops[i]).ok_or_else(|| format!("expected register, got `{}`", ops[i]));
    let imm = |i: usize| parse_imm(ops[i]).ok_or_else(|| format!("expected immediate, got `{}`", ops[i]));
    let ident = |i: usize| {
        if is_ident(ops[i]) {
            Ok(ops[i].to_string())
        } else {
            Err(format!("expected name, got `{}`", ops[i]))
        }
    };
    if let Some(op) = AluOp::from_mnemonic(mn) {
        argc(2)?;
        let src = match parse_reg(ops[1]) {
            Some(r) => Operand::Reg(r),
            None => Operand::Imm(imm(1)?),
        };
        return Ok(Instr::Alu { op, dst: reg(0)?, src });
    }
    Ok(match mn {
        "loadi" => {
            argc(2)?;
            Instr::LoadImm { dst: reg(0)?, value: imm(1)? }
        }
        "lea" => {
            if ops.len() == 3 {
                Instr::LoadAddr { dst: reg(0)?, sym: ident(1)?, offset: imm(2)? }
            } else {
                argc(2)?;
                Instr::LoadAddr { dst: reg(0)?, sym: ident(1)?, offset: 0 }
            }
        }
        "read" => {
            argc(2)?;
            Instr::Read { dst: reg(0)?, addr: parse_addr(ops[1])? }
        }
        "write" => {
            argc(2)?;
            Instr::Write { addr: parse_addr(ops[0])?, src: reg(1)? }
        }
        "bz" => {
            argc(2)?;
            Instr::BranchIfZero { reg: reg(0)?, label: ident(1)? }
        }
        "bnz" => {
            argc(2)?;
            Instr::BranchIfNonZero { reg: reg(0)?, label: ident(1)? }
        }
        "jmp" => {
            argc(1)?;
            Instr::Jump { label: ident(0)? }
        }
        "call" => {
            argc(1)?;
            Instr::Call { function: ident(0)? }
        }
        "ret" => {
            argc(0)?;
            Instr::Ret
        }
        "push" => {
            argc(1)?;
            Instr::Push { src: reg(0)? }
        }
        "pop" => {
            argc(1)?;
            Instr::Pop { dst: reg(0)? }
        }
        "eexit" => {
            argc(0)?;
            Instr::EExit
        }
        "xbegin" => {
            argc(1)?;
            Instr::XBegin { abort: ident(0)? }
        }
        "xend" => {
            argc(0)?;
            Instr::XEnd
        }
        "preload" => {
            argc(1)?;
            Instr::PreloadMarker { set: imm(0)? as u32 }
        }
        "cmpxchg" => {
            argc(4)?;
            Instr::CmpXchg { dst: reg(0)?, addr: parse_addr(ops[1])?, expected: reg(2)?, new: reg(3)? }
        }
        "physid" => {
            argc(1)?;
            Instr::ReadPhysCoreId { dst: reg(0)? }
        }
        "slot" => {
            argc(1)?;
            Instr::ReadThreadSlot { dst: reg(0)? }
        }
        "regint" => {
            argc(0)?;
            Instr::RegisterInterrupt
        }
        "fence" => {
            argc(0)?;
            Instr::Fence
        }
        "ssaaddr" => {
            argc(2)?;
            Instr::SsaFrameAddr { dst: reg(0)?, delta: imm(1)? }
        }
        "restore" => {
            argc(1)?;
            Instr::RestoreContext { addr: parse_addr(ops[0])? }
        }
        "simaex" => {
            argc(0)?;
            Instr::SimulateAex
        }
        "callstub" => {
            argc(1)?;
            Instr::CallStub { vpn: imm(0)? as u64 }
        }
        "egetkey" => {
            argc(1)?;
            Instr::EGetKey { dst: reg(0)? }
        }
        other => return Err(format!("unknown mnemonic `{other}`")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_memory_forms() {
        assert_eq!(parse_addr("[key+8]").unwrap(), Addr::sym("key", 8));
        assert_eq!(parse_addr("[r7+__hb_rt+8]").unwrap(), Addr::reg_sym(7, "__hb_rt", 8));
        assert_eq!(parse_addr("[r1-16]").unwrap(), Addr::reg(1, -16));
        assert_eq!(parse_addr("[0x100000]").unwrap(), Addr::abs(0x100000));
        assert!(parse_addr("[r1+r2]").is_err());
    }

    #[test]
    fn rejects_stray_instruction() {
        let e = parse("loadi r0, 1").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn doc_example_round_trips() {
        let src = "\
.nssa 2
.entry main
.thread main
.secret key 0
.func main own_page
loop:
  read r1, [key+8]
  bnz r1, loop
  ret
.page key rw
.word 0 42
";
        let p = parse(src).unwrap();
        assert_eq!(print(&p), src);
        assert!(p.functions[0].own_page);
        assert_eq!(p.functions[0].size(), 3);
    }
}
