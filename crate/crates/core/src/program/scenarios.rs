//! Built-in demo programs. Each exposes a `main` body function that the
//! defense linkers wrap into an entry point.

use super::isa::{Addr, AluOp, Instr, Operand, Reg};
use super::{DataPage, Function, Program, Rights, SecretSlot};

pub const BODY: &str = "main";

fn alu(op: AluOp, dst: Reg, src: Operand) -> Instr {
    Instr::Alu { op, dst, src }
}
fn imm(v: i64) -> Operand {
    Operand::Imm(v)
}
fn reg(r: Reg) -> Operand {
    Operand::Reg(r)
}
fn li(dst: Reg, value: i64) -> Instr {
    Instr::LoadImm { dst, value }
}
fn rd(dst: Reg, addr: Addr) -> Instr {
    Instr::Read { dst, addr }
}
fn wr(addr: Addr, src: Reg) -> Instr {
    Instr::Write { addr, src }
}
fn bz(r: Reg, l: &str) -> Instr {
    Instr::BranchIfZero { reg: r, label: l.into() }
}
fn bnz(r: Reg, l: &str) -> Instr {
    Instr::BranchIfNonZero { reg: r, label: l.into() }
}
fn call(f: &str) -> Instr {
    Instr::Call { function: f.into() }
}

pub const GENOME_PAGE: &str = "genome";
pub const REPORT_PAGE: &str = "report";
pub const ADD_DESCRIPTION: &str = "add_description_xyz";

/// Template of the mutation scan: for every genome word, calls
/// `add_description_xyz` iff the word is non-zero. Both sides of each branch
/// retire the same number of instructions.
pub fn genome_template(width: usize) -> Program {
    let mut desc = Function::new(ADD_DESCRIPTION).on_own_page();
    desc.push(alu(AluOp::Add, 4, imm(1)))
        .push(li(2, 0x58595a))
        .push(wr(Addr::sym(REPORT_PAGE, 16), 2))
        .push(alu(AluOp::Mov, 3, reg(4)))
        .push(alu(AluOp::Shl, 3, imm(8)))
        .push(alu(AluOp::Or, 3, reg(2)))
        .push(wr(Addr::sym(REPORT_PAGE, 24), 3))
        .push(Instr::Ret);
    let callee = desc.size();

    let mut main = Function::new(BODY);
    main.push(li(4, 0));
    for i in 0..width {
        let skip = format!("skip{i}");
        let join = format!("join{i}");
        main.push(rd(1, Addr::sym(GENOME_PAGE, 8 * i as i64)))
            .push(alu(AluOp::And, 1, imm(1)))
            .push(bz(1, &skip))
            .push(call(ADD_DESCRIPTION))
            .push(Instr::Jump { label: join.clone() })
            .label(skip);
        for _ in 0..callee + 2 {
            main.push(Instr::Fence);
        }
        main.label(join);
    }
    main.push(wr(Addr::sym(REPORT_PAGE, 0), 4)).push(Instr::Ret);

    Program {
        functions: vec![main, desc],
        data_pages: vec![DataPage::new(GENOME_PAGE, Rights::RO), DataPage::new(REPORT_PAGE, Rights::RW)],
        secret_slots: (0..width).map(|i| SecretSlot { page: GENOME_PAGE.into(), word: i }).collect(),
        ..Program::default()
    }
}

/// `genome_template` with the secret bits filled in.
pub fn genome(secret: &[bool]) -> Program {
    let mut p = genome_template(secret.len());
    let vals: Vec<i64> = secret.iter().map(|&b| b as i64).collect();
    set_secret(&mut p, &vals);
    p
}

/// All bit vectors of `width` bits, least significant bit first.
pub fn genome_secrets(width: usize) -> Vec<Vec<i64>> {
    (0..1u64 << width).map(|v| (0..width).map(|i| ((v >> i) & 1) as i64).collect()).collect()
}

pub const KEY_PAGE: &str = "key";
pub const TABLE_PAGES: [&str; 2] = ["table0", "table1"];
pub const OUT_PAGE: &str = "out";
pub const OTP_ROUNDS: i64 = 4;

/// One-time password generator: mixes the key with a counter through a
/// two-page lookup table, writes the password and bumps the counter.
pub fn otp_template() -> Program {
    let mut main = Function::new(BODY);
    main.push(rd(1, Addr::sym(KEY_PAGE, 0)))
        .push(rd(2, Addr::sym(KEY_PAGE, 8)))
        .push(alu(AluOp::Mov, 3, reg(1)))
        .push(alu(AluOp::Xor, 3, reg(2)))
        .push(li(5, OTP_ROUNDS))
        .label("round")
        .push(alu(AluOp::Mov, 0, reg(3)))
        .push(alu(AluOp::And, 0, imm(1023)))
        .push(alu(AluOp::Shl, 0, imm(3)))
        .push(rd(0, Addr::reg_sym(0, TABLE_PAGES[0], 0)))
        .push(alu(AluOp::Mul, 3, imm(31)))
        .push(alu(AluOp::Add, 3, reg(0)))
        .push(alu(AluOp::Shr, 3, imm(1)))
        .push(alu(AluOp::Sub, 5, imm(1)))
        .push(bnz(5, "round"))
        .push(wr(Addr::sym(OUT_PAGE, 0), 3))
        .push(alu(AluOp::Add, 2, imm(1)))
        .push(wr(Addr::sym(KEY_PAGE, 8), 2))
        .push(Instr::Ret);

    let mut tables = Vec::new();
    for (t, name) in TABLE_PAGES.iter().enumerate() {
        let mut page = DataPage::new(*name, Rights::RO);
        for w in 0..512usize {
            let i = (t * 512 + w) as i64;
            page = page.word(w, (i.wrapping_mul(2_654_435_761)) & 0xffff);
        }
        tables.push(page);
    }
    let mut data_pages = vec![DataPage::new(KEY_PAGE, Rights::RW)];
    data_pages.extend(tables);
    data_pages.push(DataPage::new(OUT_PAGE, Rights::RW));
    Program {
        functions: vec![main],
        data_pages,
        secret_slots: vec![SecretSlot { page: KEY_PAGE.into(), word: 0 }],
        ..Program::default()
    }
}

/// Two keys whose first table index falls on different table pages.
pub fn otp_secrets() -> Vec<Vec<i64>> {
    vec![vec![0x0000_1234_0000_0005], vec![0x0000_1234_0000_0205]]
}

pub const ARGS_PAGE: &str = "args";
pub const FIB: &str = "fib";

/// Recursive Fibonacci of the non-secret `n`, plus a secret salt.
pub fn fib_template(n: i64) -> Program {
    let mut main = Function::new(BODY);
    main.push(rd(1, Addr::sym(ARGS_PAGE, 0)))
        .push(call(FIB))
        .push(rd(2, Addr::sym(ARGS_PAGE, 8)))
        .push(alu(AluOp::Add, 0, reg(2)))
        .push(wr(Addr::sym(OUT_PAGE, 0), 0))
        .push(Instr::Ret);
    let mut fib = Function::new(FIB);
    fib.push(alu(AluOp::Mov, 2, reg(1)))
        .push(alu(AluOp::Lt, 2, imm(2)))
        .push(bz(2, "rec"))
        .push(alu(AluOp::Mov, 0, reg(1)))
        .push(Instr::Ret)
        .label("rec")
        .push(Instr::Push { src: 1 })
        .push(alu(AluOp::Sub, 1, imm(1)))
        .push(call(FIB))
        .push(Instr::Pop { dst: 1 })
        .push(Instr::Push { src: 0 })
        .push(Instr::Push { src: 1 })
        .push(alu(AluOp::Sub, 1, imm(2)))
        .push(call(FIB))
        .push(Instr::Pop { dst: 1 })
        .push(Instr::Pop { dst: 2 })
        .push(alu(AluOp::Add, 0, reg(2)))
        .push(Instr::Ret);
    Program {
        functions: vec![main, fib],
        data_pages: vec![DataPage::new(ARGS_PAGE, Rights::RO).word(0, n), DataPage::new(OUT_PAGE, Rights::RW)],
        secret_slots: vec![SecretSlot { page: ARGS_PAGE.into(), word: 1 }],
        ..Program::default()
    }
}

pub fn fib_secrets() -> Vec<Vec<i64>> {
    vec![vec![0], vec![12_345]]
}

pub const SCRATCH_PAGES: usize = 3;
/// Lines the `tlbfill` body writes inside its transaction.
pub const BODY_WRITE_LINES: usize = 164;
/// Read-write pages every program carries besides its own data: one stack
/// and one SSA page.
pub const THREAD_RW_PAGES: usize = 2;

/// TLB-fill microbenchmark: `rw_pages` read-write pages in total (data,
/// scratch, stack and SSA), with a body writing [`BODY_WRITE_LINES`] lines
/// spread over the scratch pages.
pub fn tlbfill(rw_pages: usize) -> Program {
    let data = rw_pages.saturating_sub(SCRATCH_PAGES + THREAD_RW_PAGES).max(1);
    let mut data_pages: Vec<DataPage> =
        (0..data).map(|i| DataPage::new(format!("d{i}"), Rights::RW).word(0, i as i64)).collect();
    for s in 0..SCRATCH_PAGES {
        data_pages.push(DataPage::new(format!("scratch{s}"), Rights::RW));
    }
    let mut main = Function::new(BODY);
    main.push(rd(1, Addr::sym("d0", 0))).push(rd(2, Addr::sym(format!("d{}", data - 1), 0)));
    // Lines 0..63 of each scratch page except the last one (which holds the
    // preload word).
    main.push(li(3, 0)).push(li(4, BODY_WRITE_LINES as i64)).push(Instr::LoadAddr {
        dst: 5,
        sym: "scratch0".into(),
        offset: 0,
    });
    main.label("loop")
        .push(wr(Addr::reg(5, 0), 1))
        .push(alu(AluOp::Add, 5, imm(64)))
        .push(alu(AluOp::Mov, 0, reg(5)))
        .push(alu(AluOp::Shr, 0, imm(6)))
        .push(alu(AluOp::And, 0, imm(63)))
        .push(alu(AluOp::Ne, 0, imm(63)))
        .push(bnz(0, "next"))
        .push(alu(AluOp::Add, 5, imm(64)))
        .label("next")
        .push(alu(AluOp::Add, 3, imm(1)))
        .push(alu(AluOp::Mov, 0, reg(3)))
        .push(alu(AluOp::Lt, 0, reg(4)))
        .push(bnz(0, "loop"));
    main.push(Instr::Ret);
    Program { functions: vec![main], data_pages, ..Program::default() }
}

pub const RESULT_PAGE: &str = "result";
pub const BUF_PAGES: usize = 16;

/// Raw transactional write benchmark (no defense runtime): writes `lines`
/// distinct cache lines inside one transaction, then records 1 on commit or
/// 2 on abort in `result[0]`.
pub fn tsx_writes(lines: usize) -> Program {
    let mut main = Function::new("tsx_main");
    main.push(li(1, 0))
        .push(Instr::LoadAddr { dst: 2, sym: "buf0".into(), offset: 0 })
        .push(Instr::XBegin { abort: "aborted".into() });
    if lines > 0 {
        main.label("loop")
            .push(wr(Addr::reg(2, 0), 1))
            .push(alu(AluOp::Add, 2, imm(64)))
            .push(alu(AluOp::Add, 1, imm(1)))
            .push(alu(AluOp::Mov, 3, reg(1)))
            .push(alu(AluOp::Lt, 3, imm(lines as i64)))
            .push(bnz(3, "loop"));
    }
    main.push(Instr::XEnd)
        .push(li(0, 1))
        .push(wr(Addr::sym(RESULT_PAGE, 0), 0))
        .push(li(0, 0))
        .push(Instr::EExit)
        .label("aborted")
        .push(li(5, 2))
        .push(wr(Addr::sym(RESULT_PAGE, 0), 5))
        .push(li(0, 0))
        .push(Instr::EExit);
    let mut data_pages: Vec<DataPage> =
        (0..BUF_PAGES.max(lines.div_ceil(64))).map(|i| DataPage::new(format!("buf{i}"), Rights::RW)).collect();
    data_pages.push(DataPage::new(RESULT_PAGE, Rights::RW));
    Program { functions: vec![main], data_pages, ..Program::default() }.with_entry("tsx_main")
}

/// A straight-line body of `len` instructions in which every instruction
/// changes the register file, so that any two interrupt placements leave
/// distinguishable contexts.
pub fn straight_region(len: usize) -> Program {
    let mut main = Function::new(BODY);
    for i in 0..len {
        let r = (i % 6) as Reg;
        if i % 10 == 9 {
            main.push(wr(Addr::sym(OUT_PAGE, 8 * (i % 32) as i64), r));
        } else {
            main.push(alu(AluOp::Add, r, imm(i as i64 + 1)));
        }
    }
    main.push(Instr::Ret);
    Program { functions: vec![main], data_pages: vec![DataPage::new(OUT_PAGE, Rights::RW)], ..Program::default() }
}

/// Minimal body for protocol exploration.
pub fn empty_body() -> Program {
    let mut main = Function::new(BODY);
    main.push(Instr::Ret);
    Program { functions: vec![main], ..Program::default() }
}

/// Large-enclave stand-in: a small body plus enough read-only data pages to
/// bring the loaded image to `total_pages` (given the defense-free layout of
/// one code page, one stack page and one SSA page).
pub fn large(total_pages: usize) -> Program {
    let data = total_pages.saturating_sub(1 + THREAD_RW_PAGES + 1);
    let mut main = Function::new(BODY);
    main.push(rd(1, Addr::sym("blob0", 0))).push(wr(Addr::sym(OUT_PAGE, 0), 1)).push(Instr::Ret);
    let mut data_pages: Vec<DataPage> = (0..data).map(|i| DataPage::new(format!("blob{i}"), Rights::RO)).collect();
    data_pages.push(DataPage::new(OUT_PAGE, Rights::RW));
    Program { functions: vec![main], data_pages, ..Program::default() }
}

/// Writes `values` into the program's secret slots.
pub fn set_secret(p: &mut Program, values: &[i64]) {
    for (slot, &v) in p.secret_slots.clone().iter().zip(values) {
        if let Some(page) = p.data_pages.iter_mut().find(|d| d.name == slot.page) {
            page.init.retain(|(w, _)| *w != slot.word);
            page.init.push((slot.word, v));
        }
    }
}

/// Long-running protected region: a compute loop of `iterations` rounds
/// (six instructions each) that keeps its state in registers and writes the
/// result once.
pub fn spin(iterations: i64) -> Program {
    let mut main = Function::new(BODY);
    main.push(li(1, 0)).push(li(2, 1));
    main.label("loop")
        .push(alu(AluOp::Add, 2, reg(1)))
        .push(alu(AluOp::Xor, 2, imm(0x5a)))
        .push(alu(AluOp::Add, 1, imm(1)))
        .push(alu(AluOp::Mov, 3, reg(1)))
        .push(alu(AluOp::Lt, 3, imm(iterations)))
        .push(bnz(3, "loop"));
    main.push(wr(Addr::sym(OUT_PAGE, 0), 2)).push(Instr::Ret);
    Program { functions: vec![main], data_pages: vec![DataPage::new(OUT_PAGE, Rights::RW)], ..Program::default() }
}
