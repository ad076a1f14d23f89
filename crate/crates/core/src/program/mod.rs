//! Enclave programs: functions, data pages, secret slots and threads.

pub mod asm;
pub mod isa;
pub mod layout;
pub mod scenarios;

use serde::{Deserialize, Serialize};

pub use isa::{Addr, AluOp, Instr, Op, Operand, Reg};
pub use layout::{load, Image, LoadError, PageInfo, ThreadInfo};

pub const PAGE_SIZE: u64 = 4096;
pub const WORDS_PER_PAGE: usize = 512;

/// Access rights of a page, as a tiny bit set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rights {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Rights {
    pub const RO: Rights = Rights { r: true, w: false, x: false };
    pub const RW: Rights = Rights { r: true, w: true, x: false };
    pub const RX: Rights = Rights { r: true, w: false, x: true };
    pub const NONE: Rights = Rights { r: false, w: false, x: false };

    pub fn contains(self, other: Rights) -> bool {
        (self.r || !other.r) && (self.w || !other.w) && (self.x || !other.x)
    }

    pub fn intersect(self, other: Rights) -> Rights {
        Rights { r: self.r && other.r, w: self.w && other.w, x: self.x && other.x }
    }

    pub fn bits(self) -> u8 {
        self.r as u8 | (self.w as u8) << 1 | (self.x as u8) << 2
    }
}

/// Preload class of a page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RightsClass {
    Ro,
    Rw,
    X,
}

/// Ordered pages to preload. The order is attacker-visible.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageSet {
    pages: Vec<(u64, RightsClass)>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("page {0:#x} appears twice in a page set")]
pub struct DuplicatePage(pub u64);

impl PageSet {
    pub fn new(pages: Vec<(u64, RightsClass)>) -> Result<Self, DuplicatePage> {
        let mut seen = std::collections::HashSet::new();
        for (vpn, _) in &pages {
            if !seen.insert(*vpn) {
                return Err(DuplicatePage(*vpn));
            }
        }
        Ok(PageSet { pages })
    }

    pub fn pages(&self) -> &[(u64, RightsClass)] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn count(&self, class: RightsClass) -> usize {
        self.pages.iter().filter(|(_, c)| *c == class).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stmt {
    Label(String),
    Instr(Instr),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    /// Start this function on a fresh code page and keep the next one off
    /// its last page.
    pub own_page: bool,
    pub body: Vec<Stmt>,
}

impl Function {
    pub fn new(name: impl Into<String>) -> Self {
        Function { name: name.into(), own_page: false, body: Vec::new() }
    }

    pub fn on_own_page(mut self) -> Self {
        self.own_page = true;
        self
    }

    pub fn push(&mut self, i: Instr) -> &mut Self {
        self.body.push(Stmt::Instr(i));
        self
    }

    pub fn label(&mut self, l: impl Into<String>) -> &mut Self {
        self.body.push(Stmt::Label(l.into()));
        self
    }

    /// Static instruction count (labels excluded).
    pub fn size(&self) -> usize {
        self.body.iter().filter(|s| matches!(s, Stmt::Instr(_))).count()
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.body.iter().filter_map(|s| match s {
            Stmt::Instr(i) => Some(i),
            Stmt::Label(_) => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageType {
    Regular,
    Ssa,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataPage {
    pub name: String,
    pub rights: Rights,
    /// Initial contents as (word index, value); everything else is zero.
    pub init: Vec<(usize, i64)>,
}

impl DataPage {
    pub fn new(name: impl Into<String>, rights: Rights) -> Self {
        DataPage { name: name.into(), rights, init: Vec::new() }
    }

    pub fn word(mut self, index: usize, value: i64) -> Self {
        self.init.push((index, value));
        self
    }
}

/// A word whose initial value is the experiment's secret input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecretSlot {
    pub page: String,
    pub word: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreadSpec {
    pub entry: String,
    pub handler: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub functions: Vec<Function>,
    pub data_pages: Vec<DataPage>,
    pub secret_slots: Vec<SecretSlot>,
    pub entry_points: Vec<String>,
    pub threads: Vec<ThreadSpec>,
    pub nssa: usize,
}

impl Default for Program {
    fn default() -> Self {
        Program {
            functions: Vec::new(),
            data_pages: Vec::new(),
            secret_slots: Vec::new(),
            entry_points: Vec::new(),
            threads: Vec::new(),
            nssa: 1,
        }
    }
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn data_page(&self, name: &str) -> Option<&DataPage> {
        self.data_pages.iter().find(|p| p.name == name)
    }

    /// Convenience for single-threaded programs: one thread entering at
    /// `entry`.
    pub fn with_entry(mut self, entry: &str) -> Self {
        if !self.entry_points.iter().any(|e| e == entry) {
            self.entry_points.push(entry.to_string());
        }
        self.threads = vec![ThreadSpec { entry: entry.to_string(), handler: None }];
        self
    }
}
