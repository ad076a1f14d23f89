//! TLB preloading: a generated function touching a fixed, secret-independent
//! sequence of pages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::machine::PlatformConfig;
use crate::program::layout::{PageKind, PRELOAD_WORD};
use crate::program::{load, Image, LoadError, PageSet, Program, RightsClass};

pub const PRELOAD_FN: &str = "__hb_preload";

/// Which pages the preload touches, in layout order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagePick {
    #[default]
    All,
    /// Data pages and functions by name; code pages of a named function are
    /// all pages it spans.
    Named(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreloadSpec {
    pub pages: PagePick,
    /// Touch read-write data pages with a read only. Cheaper in
    /// transactional write capacity; dirty bits are then left to the body.
    pub rw_read_only: bool,
}

impl PreloadSpec {
    pub fn read_only_fallback() -> Self {
        PreloadSpec { rw_read_only: true, ..PreloadSpec::default() }
    }
}

/// One step of the preload sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Touch {
    Exec(u64),
    Read(String),
    ReadWrite(String),
}

/// The page set selected by `spec` on a loaded image, in preload order.
pub fn page_set(image: &Image, spec: &PreloadSpec) -> PageSet {
    let pages = touches(image, spec)
        .into_iter()
        .map(|t| match t {
            Touch::Exec(v) => (v, RightsClass::X),
            Touch::Read(n) => (image.vpn_of(&n).unwrap_or(0), RightsClass::Ro),
            Touch::ReadWrite(n) => (image.vpn_of(&n).unwrap_or(0), RightsClass::Rw),
        })
        .collect();
    PageSet::new(pages).expect("layout pages are distinct")
}

fn selected(image: &Image, spec: &PreloadSpec, idx: usize) -> bool {
    let PagePick::Named(names) = &spec.pages else {
        return true;
    };
    let p = &image.pages[idx];
    if let Some(n) = &p.name {
        if names.contains(n) {
            return true;
        }
    }
    if p.kind == PageKind::Code {
        let lo = p.vpn * crate::program::PAGE_SIZE;
        let hi = lo + crate::program::PAGE_SIZE;
        return image.functions.iter().any(|f| names.contains(&f.name) && f.start < hi && f.end > lo);
    }
    false
}

pub fn touches(image: &Image, spec: &PreloadSpec) -> Vec<Touch> {
    let mut out = Vec::new();
    for (i, p) in image.pages.iter().enumerate() {
        if !selected(image, spec, i) {
            continue;
        }
        match p.kind {
            PageKind::Code => out.push(Touch::Exec(p.vpn)),
            _ => {
                let name = p.name.clone().expect("data pages are named");
                let user_rw = p.kind == PageKind::Data && !name.starts_with("__");
                if p.rights.w && !(spec.rw_read_only && user_rw) {
                    out.push(Touch::ReadWrite(name));
                } else {
                    out.push(Touch::Read(name));
                }
            }
        }
    }
    out
}

/// Assembly of the preload function for a touch sequence.
pub fn preload_asm(name: &str, ts: &[Touch]) -> String {
    let off = PRELOAD_WORD * 8;
    let mut s = format!(".func {name}\n");
    for t in ts {
        let _ = match t {
            Touch::Exec(v) => writeln!(s, "  callstub {v:#x}"),
            Touch::Read(p) => writeln!(s, "  read r6, [{p}+{off}]"),
            Touch::ReadWrite(p) => writeln!(s, "  read r6, [{p}+{off}]\n  write [{p}+{off}], r6"),
        };
    }
    s.push_str("  ret\n");
    s
}

/// Builds and loads `build(preload_asm)` until the preload sequence matches
/// the layout it is part of.
pub fn link_with_preload(
    platform: &PlatformConfig,
    spec: &PreloadSpec,
    build: impl Fn(&str) -> Program,
) -> Result<(Program, Image), LoadError> {
    let mut ts: Vec<Touch> = Vec::new();
    for _ in 0..16 {
        let p = build(&preload_asm(PRELOAD_FN, &ts));
        let img = load(&p, platform)?;
        let next = touches(&img, spec);
        if next == ts {
            return Ok((p, img));
        }
        ts = next;
    }
    Err(LoadError::PreloadUnstable)
}
