//! Set-associative TLB with LRU replacement and owner tags.

use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::program::Rights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Owner {
    Untrusted,
    Enclave(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Frame {
    Epc(u32),
    Untrusted(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct TlbEntry {
    pub linear_page: u64,
    pub frame: Frame,
    pub rights: Rights,
    pub dirty_cached: bool,
    pub owner: Owner,
    pub inserted_by: usize,
}

#[derive(Clone, Debug, Default)]
struct Set {
    slots: Vec<Option<TlbEntry>>,
    stamps: Vec<u64>,
    hash: OnceLock<u64>,
}

impl Set {
    fn digest(&self) -> u64 {
        *self.hash.get_or_init(|| {
            let mut ord: Vec<(u64, &TlbEntry)> =
                self.slots.iter().zip(&self.stamps).filter_map(|(e, t)| e.as_ref().map(|e| (*t, e))).collect();
            ord.sort_by_key(|(t, _)| *t);
            let mut h = super::state_hasher();
            for (_, e) in ord {
                e.hash(&mut h);
            }
            h.finish()
        })
    }
}

/// Sets are shared between clones and copied on first write, so cloning a
/// machine for search stays cheap.
#[derive(Clone, Debug)]
pub struct Tlb {
    sets: usize,
    ways: usize,
    data: Vec<Arc<Set>>,
    /// One bit per set that holds at least one entry.
    occupied: Vec<u64>,
    clock: u64,
}

fn matches(e: &TlbEntry, vpn: u64, owner: Owner, core: usize) -> bool {
    e.linear_page == vpn && e.owner == owner && e.inserted_by == core
}

impl Tlb {
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(sets > 0 && ways > 0, "TLB geometry must be non-empty");
        let empty = Arc::new(Set { slots: vec![None; ways], stamps: vec![0; ways], hash: OnceLock::new() });
        Tlb { sets, ways, data: vec![empty; sets], occupied: vec![0; sets.div_ceil(64)], clock: 0 }
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn set_index(&self, vpn: u64) -> usize {
        (vpn % self.sets as u64) as usize
    }

    fn set_mut(&mut self, s: usize) -> &mut Set {
        let set = Arc::make_mut(&mut self.data[s]);
        set.hash = OnceLock::new();
        set
    }

    /// Indices of the non-empty sets, ascending.
    fn occupied_sets(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied.iter().enumerate().flat_map(|(w, &bits)| {
            let mut b = bits;
            std::iter::from_fn(move || {
                (b != 0).then(|| {
                    let i = b.trailing_zeros() as usize;
                    b &= b - 1;
                    w * 64 + i
                })
            })
        })
    }

    fn split(&self, slot: usize) -> (usize, usize) {
        (slot / self.ways, slot % self.ways)
    }

    /// Finds a matching entry and marks it most recently used.
    pub fn lookup(&mut self, vpn: u64, owner: Owner, core: usize) -> Option<usize> {
        let s = self.set_index(vpn);
        let w = self.data[s].slots.iter().position(|e| e.as_ref().is_some_and(|e| matches(e, vpn, owner, core)))?;
        self.clock += 1;
        let clock = self.clock;
        self.set_mut(s).stamps[w] = clock;
        Some(s * self.ways + w)
    }

    /// Lookup without touching the replacement state.
    pub fn peek(&self, vpn: u64, owner: Owner, core: usize) -> Option<&TlbEntry> {
        self.data[self.set_index(vpn)].slots.iter().flatten().find(|e| matches(e, vpn, owner, core))
    }

    pub fn entry(&self, slot: usize) -> &TlbEntry {
        let (s, w) = self.split(slot);
        self.data[s].slots[w].as_ref().expect("valid slot")
    }

    pub fn entry_mut(&mut self, slot: usize) -> &mut TlbEntry {
        let (s, w) = self.split(slot);
        self.set_mut(s).slots[w].as_mut().expect("valid slot")
    }

    /// Inserts `e`, replacing a matching entry, else a free way, else the
    /// least recently used way of the set. Returns the evicted entry.
    pub fn insert(&mut self, e: TlbEntry) -> Option<TlbEntry> {
        let s = self.set_index(e.linear_page);
        self.clock += 1;
        let clock = self.clock;
        let set = self.set_mut(s);
        let mut victim = None;
        let mut free = None;
        let mut lru = 0;
        for i in 0..set.slots.len() {
            match &set.slots[i] {
                Some(old) if matches(old, e.linear_page, e.owner, e.inserted_by) => {
                    victim = Some(i);
                    break;
                }
                Some(_) => {
                    if set.stamps[i] < set.stamps[lru] || set.slots[lru].is_none() {
                        lru = i;
                    }
                }
                None => {
                    if free.is_none() {
                        free = Some(i);
                    }
                }
            }
        }
        let slot = victim.or(free).unwrap_or(lru);
        set.stamps[slot] = clock;
        let evicted = set.slots[slot].replace(e);
        self.occupied[s / 64] |= 1 << (s % 64);
        match victim {
            Some(_) => None,
            None => evicted,
        }
    }

    pub fn flush(&mut self, mut pred: impl FnMut(&TlbEntry) -> bool) -> usize {
        let mut n = 0;
        let sets: Vec<usize> = self.occupied_sets().collect();
        for i in sets {
            if !self.data[i].slots.iter().flatten().any(&mut pred) {
                continue;
            }
            let set = self.set_mut(i);
            for s in set.slots.iter_mut() {
                if s.as_ref().is_some_and(&mut pred) {
                    *s = None;
                    n += 1;
                }
            }
            if set.slots.iter().all(Option::is_none) {
                self.occupied[i / 64] &= !(1 << (i % 64));
            }
        }
        n
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.occupied_sets().flat_map(|i| self.data[i].slots.iter().flatten())
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries of one set, least recently used first.
    pub fn set_lru_order(&self, set: usize) -> Vec<&TlbEntry> {
        let d = &self.data[set];
        let mut v: Vec<(u64, &TlbEntry)> =
            d.slots.iter().zip(&d.stamps).filter_map(|(e, t)| e.as_ref().map(|e| (*t, e))).collect();
        v.sort_by_key(|(t, _)| *t);
        v.into_iter().map(|(_, e)| e).collect()
    }

    /// Hashes contents and relative LRU order, independent of the absolute
    /// clock.
    pub fn hash_state<H: Hasher>(&self, h: &mut H) {
        for set in self.occupied_sets() {
            set.hash(h);
            self.data[set].digest().hash(h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(vpn: u64, core: usize) -> TlbEntry {
        TlbEntry {
            linear_page: vpn,
            frame: Frame::Epc(vpn as u32),
            rights: Rights::RW,
            dirty_cached: false,
            owner: Owner::Enclave(1),
            inserted_by: core,
        }
    }

    #[test]
    fn evicts_exactly_the_lru_way() {
        let mut t = Tlb::new(4, 2);
        assert!(t.insert(entry(0, 0)).is_none());
        assert!(t.insert(entry(4, 0)).is_none());
        t.lookup(0, Owner::Enclave(1), 0);
        let ev = t.insert(entry(8, 0)).unwrap();
        assert_eq!(ev.linear_page, 4);
        assert!(t.peek(0, Owner::Enclave(1), 0).is_some());
    }

    #[test]
    fn tags_separate_cores() {
        let mut t = Tlb::new(128, 12);
        t.insert(entry(5, 0));
        assert!(t.lookup(5, Owner::Enclave(1), 1).is_none());
        assert!(t.lookup(5, Owner::Untrusted, 0).is_none());
        assert!(t.lookup(5, Owner::Enclave(1), 0).is_some());
    }

    #[test]
    fn reinsert_replaces_in_place() {
        let mut t = Tlb::new(1, 2);
        t.insert(entry(1, 0));
        assert!(t.insert(entry(1, 0)).is_none());
        assert_eq!(t.len(), 1);
    }
}
