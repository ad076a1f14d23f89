//! Heisenberg-SW: transaction-wrapped regions that preload the TLB inside
//! every transaction.

pub mod rtm;

pub use rtm::{AbortCause, Track, Transaction, TsxConfig, TsxConfigError};

use crate::defense_hw::{attach_runtime, link_with_preload, PreloadSpec, ECALL, PRELOAD_FN};
use crate::machine::PlatformConfig;
use crate::program::scenarios::BODY;
use crate::program::{asm, Image, LoadError, Program};

pub const COMMIT: &str = "__hb_commit";

fn runtime_asm() -> String {
    format!(
        ".entry {ECALL}
.thread {ECALL}
.func {ECALL}
retry:
  xbegin aborted
  loadi r7, 0
  jmp started
aborted:
  loadi r7, -1
  jmp retry
started:
  call {PRELOAD_FN}
  call {BODY}
  xend
  loadi r0, 0
  eexit
.func {COMMIT}
  xend
retry:
  xbegin aborted
  loadi r7, 0
  jmp started
aborted:
  loadi r7, -1
  jmp retry
started:
  call {PRELOAD_FN}
  ret
"
    )
}

/// Links `user` (which must define `main`) with the SW runtime.
pub fn link(user: &Program, preload: &PreloadSpec, platform: &PlatformConfig) -> Result<(Program, Image), LoadError> {
    if user.function(BODY).is_none() {
        return Err(LoadError::UnknownSymbol(BODY.into()));
    }
    let rt = runtime_asm();
    link_with_preload(platform, preload, |pre| {
        let p = asm::parse(&format!("{rt}{pre}")).expect("runtime assembles");
        attach_runtime(p, user, true)
    })
}

/// Whether the SW defense can claim full protection on `platform`.
pub fn full_protection(platform: &PlatformConfig) -> bool {
    !platform.hyperthreading || platform.ht_disabled_attested
}
