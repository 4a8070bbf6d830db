use super::mem::PteEntry;

#[derive(Debug, Clone, Copy, Default)]
struct Slot {
    vpage: u64,
    pte: u64,
    generation: u64,
}

/// Direct-mapped translation cache. Entries survive page-table writes until
/// [`TlbCache::flush`] or eviction by a conflicting page.
#[derive(Debug, Clone)]
pub struct TlbCache {
    slots: Vec<Slot>,
    generation: u64,
    flushes: u64,
}

impl TlbCache {
    pub fn new(entries: usize) -> Self {
        assert!(entries > 0);
        TlbCache { slots: vec![Slot::default(); entries], generation: 1, flushes: 0 }
    }

    pub fn lookup(&self, vpage: u64) -> Option<PteEntry> {
        let s = &self.slots[(vpage % self.slots.len() as u64) as usize];
        (s.generation == self.generation && s.vpage == vpage).then_some(PteEntry::from_raw(s.pte))
    }

    pub fn insert(&mut self, vpage: u64, pte: PteEntry) {
        let n = self.slots.len() as u64;
        self.slots[(vpage % n) as usize] = Slot { vpage, pte: pte.raw(), generation: self.generation };
    }

    pub fn flush(&mut self) {
        self.generation += 1;
        self.flushes += 1;
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.generation == self.generation).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
