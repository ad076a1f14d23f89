//! Heisenberg-HW: block-eresume hooking runtime, TLB preload and the
//! sibling rendezvous protocol.

pub mod preload;

use std::fmt::Write as _;

use crate::machine::{PlatformConfig, SSA_BLOCK, SSA_RIP, SSA_RSP};
use crate::program::isa::{Instr, NUM_REGS};
use crate::program::layout::PRELOAD_WORD;
use crate::program::scenarios::BODY;
use crate::program::{asm, Image, LoadError, Program, Stmt};

pub use preload::{link_with_preload, page_set, PagePick, PreloadSpec, Touch, PRELOAD_FN};

pub const ECALL: &str = "__hb_ecall";
pub const SIBLING: &str = "__hb_sibling";
pub const PROACTIVE: &str = "__hb_proactive";
pub const RENDEZVOUS: &str = "__hb_rendezvous";
pub const RT_PAGE: &str = "__hb_rt";

/// Word indices on the runtime page.
pub const MUTEX_WORD: usize = 0;
pub const ID_WORD: usize = 1;
pub const DONE_WORD: usize = 3;

/// Byte offset of `in_hook` on a context page.
pub const IN_HOOK_OFFSET: u64 = 128;

/// Return values of the rendezvous.
pub const RENDEZVOUS_SUCCESS: i64 = 0;
pub const NOT_ON_SAME_PHYSICAL_CORE: i64 = 2;
pub const PEER_FINISHED: i64 = 3;

pub fn handler_name(k: usize) -> String {
    format!("__hb_interrupt_handler_{k}")
}

pub fn hook_name(k: usize) -> String {
    format!("__hb_resume_hook_{k}")
}

pub fn ctx_page(k: usize) -> String {
    format!("__hb_ctx{k}")
}

pub fn hook_stack_page(k: usize) -> String {
    format!("__hb_hstack{k}")
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HwOptions {
    /// Emit the sibling thread and the rendezvous.
    pub hyperthreading: bool,
    pub preload: PreloadSpec,
}

fn block_write(s: &mut String, v: i64) {
    let _ = writeln!(s, "  ssaaddr r6, 0\n  loadi r7, {v}\n  write [r6+{}], r7", SSA_BLOCK * 8);
}

fn runtime_asm(ht: bool) -> String {
    let mut s = String::from(".nssa 2\n");
    let threads = if ht { 2 } else { 1 };
    let entries: Vec<&str> = if ht { vec![ECALL, SIBLING] } else { vec![ECALL] };
    for (k, e) in entries.iter().enumerate() {
        let _ = writeln!(s, ".entry {e}\n.entry {h}\n.thread {e} {h}", h = handler_name(k));
    }
    let done = if ht { format!("  loadi r7, 1\n  write [{RT_PAGE}+{}], r7\n", DONE_WORD * 8) } else { String::new() };

    let _ = writeln!(s, ".func {ECALL}");
    block_write(&mut s, 1);
    let _ = writeln!(s, "  call {PROACTIVE}\n  bnz r0, fail\n  call {BODY}\n  loadi r0, 0\nfail:");
    block_write(&mut s, 0);
    let _ = writeln!(s, "{done}  eexit");

    if ht {
        let _ = writeln!(s, ".func {SIBLING}");
        block_write(&mut s, 1);
        let _ = writeln!(
            s,
            "  call {PROACTIVE}\n  bnz r0, fail\nwait:\n  read r7, [{RT_PAGE}+{}]\n  bz r7, wait\n  loadi r0, 0\nfail:",
            DONE_WORD * 8
        );
        block_write(&mut s, 0);
        s.push_str("  eexit\n");
    }

    let _ = writeln!(s, ".func {PROACTIVE}");
    if ht {
        let _ = writeln!(
            s,
            "  read r7, [{RT_PAGE}+{d}]\n  bnz r7, load\n  call {RENDEZVOUS}\n  mov r7, r0\n  eq r7, {PEER_FINISHED}\n  bnz r7, load\n  bnz r0, out",
            d = DONE_WORD * 8
        );
    }
    let _ = writeln!(s, "load:\n  call {PRELOAD_FN}\n  loadi r0, 0\nout:\n  ret");

    if ht {
        s.push_str(&rendezvous_asm(true));
    }

    let (rip, rsp, blk) = (SSA_RIP * 8, SSA_RSP * 8, SSA_BLOCK * 8);
    for k in 0..threads {
        let (ctx, hook) = (ctx_page(k), hook_name(k));
        let _ = writeln!(s, ".func {}", handler_name(k));
        let _ = writeln!(
            s,
            "  ssaaddr r1, -1\n  read r2, [r1+{blk}]\n  eq r2, 1\n  bz r2, fail\n  read r2, [{ctx}+{IN_HOOK_OFFSET}]\n  bnz r2, hook\n  read r3, [r1+{rip}]\n  lea r4, {hook}\n  mov r5, r3\n  lt r5, r4\n  bnz r5, save\n  lea r4, {hook}.__end\n  mov r5, r3\n  lt r5, r4\n  bnz r5, hook\nsave:"
        );
        for w in 0..NUM_REGS + 2 {
            let _ = writeln!(s, "  read r2, [r1+{o}]\n  write [{ctx}+{o}], r2", o = 8 * w);
        }
        let _ = writeln!(
            s,
            "hook:\n  loadi r2, 1\n  write [{ctx}+{IN_HOOK_OFFSET}], r2\n  lea r2, {hook}\n  write [r1+{rip}], r2\n  lea r2, {hs}, {top}\n  write [r1+{rsp}], r2\n  loadi r2, 0",
            hs = hook_stack_page(k),
            top = PRELOAD_WORD * 8
        );
        for w in 0..NUM_REGS {
            let _ = writeln!(s, "  write [r1+{}], r2", 8 * w);
        }
        let _ = writeln!(s, "  write [r1+{blk}], r2\n  loadi r0, 0\n  eexit\nfail:\n  loadi r0, 1\n  eexit");

        let _ = writeln!(s, ".func {hook}\nstart:");
        block_write(&mut s, 1);
        let _ = writeln!(
            s,
            "  call {PROACTIVE}\n  bnz r0, bail\n  loadi r7, 0\n  write [{ctx}+{IN_HOOK_OFFSET}], r7\n  restore [{ctx}]\nbail:\n  simaex\n  jmp start"
        );
    }

    let _ = writeln!(s, ".page {RT_PAGE} rw\n.word {MUTEX_WORD} -1\n.word {} -1\n.word {} -1", ID_WORD, ID_WORD + 1);
    for k in 0..threads {
        let _ = writeln!(s, ".page {} rw\n.page {} rw", ctx_page(k), hook_stack_page(k));
    }
    s
}

/// The rendezvous protocol. With `release_on_success` off, the lock is kept
/// on success exactly as in the original listing.
pub fn rendezvous_asm(release_on_success: bool) -> String {
    let id = ID_WORD * 8;
    let done = DONE_WORD * 8;
    let release = if release_on_success { "  loadi r6, -1\n  write [r4], r6\n" } else { "" };
    format!(
        ".func {RENDEZVOUS}
  physid r1
  regint
  slot r2
  mov r3, r2
  xor r3, 1
  lea r4, {RT_PAGE}
  loadi r5, 0
lock:
  loadi r6, -1
  cmpxchg r7, [r4], r6, r2
  bnz r7, locked
  cmpxchg r7, [r4], r2, r2
  bz r7, lock
locked:
  bnz r5, set
  mov r7, r3
  shl r7, 3
  add r7, r4
erase:
  write [r7+{id}], r6
  loadi r5, 1
set:
  physid r1
  mov r7, r2
  shl r7, 3
  add r7, r4
setid:
  write [r7+{id}], r1
  mov r7, r3
  shl r7, 3
  add r7, r4
  read r0, [r7+{id}]
  mov r7, r0
  eq r7, -1
  bnz r7, release
  ne r0, r1
  bnz r0, mismatch
success:
{release}  loadi r0, {RENDEZVOUS_SUCCESS}
  ret
mismatch:
  loadi r6, -1
  write [r4], r6
  loadi r0, {NOT_ON_SAME_PHYSICAL_CORE}
  ret
release:
  write [r4], r6
  read r7, [r4+{done}]
  bnz r7, finished
  jmp lock
finished:
  loadi r0, {PEER_FINISHED}
  ret
"
    )
}

/// Combines a runtime with a user program: runtime functions first, user
/// data pages first, threads and SSA depth from the runtime. Preload
/// markers in user code become preload calls when `preload` is set.
pub fn attach_runtime(runtime: Program, user: &Program, preload: bool) -> Program {
    let mut functions = runtime.functions;
    for f in &user.functions {
        let mut f = f.clone();
        for st in &mut f.body {
            if let Stmt::Instr(Instr::PreloadMarker { .. }) = st {
                if preload {
                    *st = Stmt::Instr(Instr::Call { function: PRELOAD_FN.into() });
                }
            }
        }
        functions.push(f);
    }
    let mut data_pages = user.data_pages.clone();
    data_pages.extend(runtime.data_pages);
    Program {
        functions,
        data_pages,
        secret_slots: user.secret_slots.clone(),
        entry_points: runtime.entry_points,
        threads: runtime.threads,
        nssa: runtime.nssa,
    }
}

/// Links `user` (which must define `main`) with the HW runtime.
pub fn link(user: &Program, opts: &HwOptions, platform: &PlatformConfig) -> Result<(Program, Image), LoadError> {
    link_custom(user, &runtime_asm(opts.hyperthreading), &opts.preload, platform)
}

/// As [`link`], with the rendezvous replaced by `rendezvous` (for protocol
/// variants under exploration).
pub fn link_with_rendezvous(
    user: &Program,
    opts: &HwOptions,
    platform: &PlatformConfig,
    rendezvous: &str,
) -> Result<(Program, Image), LoadError> {
    let rt = runtime_asm(opts.hyperthreading);
    let rt = match rt.find(&format!(".func {RENDEZVOUS}\n")) {
        Some(start) => {
            let end = rt[start + 1..].find("\n.func ").map_or(rt.len(), |e| start + 1 + e + 1);
            format!("{}{}{}", &rt[..start], rendezvous, &rt[end..])
        }
        None => rt,
    };
    link_custom(user, &rt, &opts.preload, platform)
}

fn link_custom(
    user: &Program,
    runtime: &str,
    spec: &PreloadSpec,
    platform: &PlatformConfig,
) -> Result<(Program, Image), LoadError> {
    if user.function(BODY).is_none() {
        return Err(LoadError::UnknownSymbol(BODY.into()));
    }
    link_with_preload(platform, spec, |pre| {
        let rt = asm::parse(&format!("{runtime}{pre}")).expect("runtime assembles");
        attach_runtime(rt, user, true)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::scenarios;

    #[test]
    fn runtime_assembles_with_and_without_ht() {
        for ht in [false, true] {
            let opts = HwOptions { hyperthreading: ht, ..HwOptions::default() };
            let (p, img) = link(&scenarios::empty_body(), &opts, &PlatformConfig::with_ht(ht)).unwrap();
            assert_eq!(p.threads.len(), if ht { 2 } else { 1 });
            assert_eq!(p.nssa, 2);
            assert!(img.function(&hook_name(0)).is_some());
        }
    }

    #[test]
    fn rendezvous_variant_replaces_only_the_protocol() {
        let opts = HwOptions { hyperthreading: true, ..HwOptions::default() };
        let pc = PlatformConfig::with_ht(true);
        let (a, _) = link(&scenarios::empty_body(), &opts, &pc).unwrap();
        let (b, _) = link_with_rendezvous(&scenarios::empty_body(), &opts, &pc, &rendezvous_asm(false)).unwrap();
        assert_eq!(a.functions.len(), b.functions.len());
        let ra = a.function(RENDEZVOUS).unwrap().size();
        let rb = b.function(RENDEZVOUS).unwrap().size();
        assert_eq!(ra, rb + 2);
    }

    #[test]
    fn missing_body_is_rejected() {
        let p = Program::default();
        assert!(matches!(
            link(&p, &HwOptions::default(), &PlatformConfig::default()),
            Err(LoadError::UnknownSymbol(_))
        ));
    }
}
