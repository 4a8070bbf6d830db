//! Sparse physical memory contents and x86-64 style PTEs.

use crate::dram::FlipDirection;
use crate::PAGE_SIZE;

pub const ENTRIES_PER_PT: u64 = 512;
const WORDS: usize = (PAGE_SIZE / 8) as usize;

pub const PTE_PRESENT: u64 = 1 << 0;
pub const PTE_WRITABLE: u64 = 1 << 1;
pub const PTE_USER: u64 = 1 << 2;
pub const PTE_ACCESSED: u64 = 1 << 5;
pub const PTE_DIRTY: u64 = 1 << 6;
pub const PTE_NX: u64 = 1 << 63;
pub const PTE_PFN_MASK: u64 = ((1u64 << 52) - 1) & !0xFFF;

/// Last-level page-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PteEntry(u64);

impl PteEntry {
    pub fn new(pfn: u64, present: bool, writable: bool, user: bool) -> Self {
        let mut v = (pfn << 12) & PTE_PFN_MASK;
        if present {
            v |= PTE_PRESENT;
        }
        if writable {
            v |= PTE_WRITABLE;
        }
        if user {
            v |= PTE_USER;
        }
        PteEntry(v)
    }

    /// Entry as the kernel installs it for a touched, writable file mapping.
    pub fn user_data(pfn: u64) -> Self {
        PteEntry(Self::new(pfn, true, true, true).0 | PTE_ACCESSED | PTE_DIRTY | PTE_NX)
    }

    pub fn from_raw(raw: u64) -> Self {
        PteEntry(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn present(self) -> bool {
        self.0 & PTE_PRESENT != 0
    }

    pub fn writable(self) -> bool {
        self.0 & PTE_WRITABLE != 0
    }

    pub fn user(self) -> bool {
        self.0 & PTE_USER != 0
    }

    pub fn pfn(self) -> u64 {
        (self.0 & PTE_PFN_MASK) >> 12
    }

    pub fn with_pfn(self, pfn: u64) -> Self {
        PteEntry((self.0 & !PTE_PFN_MASK) | ((pfn << 12) & PTE_PFN_MASK))
    }
}

type Page = Box<[u64; WORDS]>;

/// Contents of physical memory. Untouched pages read as zero; addresses
/// beyond the installed capacity read as all-ones and ignore writes.
#[derive(Debug, Clone)]
pub struct PhysMemory {
    total_pages: u64,
    slot_of: Vec<u32>,
    pages: Vec<Page>,
}

impl PhysMemory {
    pub fn new(total_pages: u64) -> Self {
        PhysMemory { total_pages, slot_of: vec![0; total_pages as usize], pages: Vec::new() }
    }

    pub fn total_pages(&self) -> u64 {
        self.total_pages
    }

    pub fn is_backed(&self, pfn: u64) -> bool {
        pfn < self.total_pages
    }

    /// Page contents, `None` when the page was never written (reads as zero)
    /// or is not backed by DRAM.
    pub fn page(&self, pfn: u64) -> Option<&[u64; WORDS]> {
        if pfn >= self.total_pages {
            return None;
        }
        match self.slot_of[pfn as usize] {
            0 => None,
            s => Some(&self.pages[s as usize - 1]),
        }
    }

    fn page_mut(&mut self, pfn: u64) -> Option<&mut [u64; WORDS]> {
        if pfn >= self.total_pages {
            return None;
        }
        let slot = &mut self.slot_of[pfn as usize];
        if *slot == 0 {
            self.pages.push(Box::new([0; WORDS]));
            *slot = self.pages.len() as u32;
        }
        Some(&mut self.pages[*slot as usize - 1])
    }

    pub fn read_u64(&self, phys: u64) -> u64 {
        debug_assert_eq!(phys % 8, 0, "unaligned read");
        let pfn = phys / PAGE_SIZE;
        if pfn >= self.total_pages {
            return u64::MAX;
        }
        self.page(pfn).map(|p| p[((phys % PAGE_SIZE) / 8) as usize]).unwrap_or(0)
    }

    pub fn write_u64(&mut self, phys: u64, value: u64) {
        debug_assert_eq!(phys % 8, 0, "unaligned write");
        let pfn = phys / PAGE_SIZE;
        if let Some(p) = self.page_mut(pfn) {
            p[((phys % PAGE_SIZE) / 8) as usize] = value;
        }
    }

    pub fn read_u32(&self, phys: u64) -> u32 {
        let word = self.read_u64(phys & !7);
        (word >> ((phys & 4) * 8)) as u32
    }

    pub fn write_u32(&mut self, phys: u64, value: u32) {
        let aligned = phys & !7;
        let shift = (phys & 4) * 8;
        let word = self.read_u64(aligned);
        let word = (word & !(0xFFFF_FFFFu64 << shift)) | ((value as u64) << shift);
        self.write_u64(aligned, word);
    }

    /// Flip bit `bit` of byte `phys` if the cell currently holds the value
    /// its leak direction requires. Returns whether stored data changed.
    pub fn apply_flip(&mut self, phys: u64, bit: u8, direction: FlipDirection) -> bool {
        let aligned = phys & !7;
        let pos = (phys & 7) * 8 + bit as u64;
        let word = self.read_u64(aligned);
        if !self.is_backed(aligned / PAGE_SIZE) {
            return false;
        }
        let current = (word >> pos) & 1 == 1;
        if current != direction.from_value() {
            return false;
        }
        self.write_u64(aligned, word ^ (1u64 << pos));
        true
    }

    /// Copy of one page, zero-filled when untouched.
    pub fn snapshot_page(&self, pfn: u64) -> [u64; WORDS] {
        self.page(pfn).copied().unwrap_or([0; WORDS])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn probe_value_decodes() {
        let p = PteEntry::from_raw(0x27);
        assert!(p.present() && p.writable() && p.user());
        assert_eq!(p.pfn(), 0);
    }

    #[test]
    fn unbacked_reads_all_ones() {
        let mut m = PhysMemory::new(4);
        assert_eq!(m.read_u64(4 * PAGE_SIZE), u64::MAX);
        m.write_u64(4 * PAGE_SIZE, 1);
        assert_eq!(m.read_u64(4 * PAGE_SIZE), u64::MAX);
        assert_eq!(m.read_u64(PAGE_SIZE + 8), 0);
        assert!(m.page(1).is_none());
    }

    #[test]
    fn u32_halves() {
        let mut m = PhysMemory::new(1);
        m.write_u32(16, 1000);
        m.write_u32(20, 7);
        assert_eq!(m.read_u32(16), 1000);
        assert_eq!(m.read_u32(20), 7);
        assert_eq!(m.read_u64(16), (7u64 << 32) | 1000);
    }

    #[test]
    fn flips_respect_direction() {
        let mut m = PhysMemory::new(1);
        m.write_u64(8, 0b10);
        assert!(!m.apply_flip(8, 1, FlipDirection::ZeroToOne));
        assert!(m.apply_flip(8, 1, FlipDirection::OneToZero));
        assert_eq!(m.read_u64(8), 0);
        assert!(m.apply_flip(15, 7, FlipDirection::ZeroToOne));
        assert_eq!(m.read_u64(8), 1 << 63);
    }

    proptest! {
        #[test]
        fn pte_encoding_round_trips(raw in any::<u64>()) {
            let e = PteEntry::from_raw(raw);
            let rebuilt = PteEntry::from_raw(raw & !PTE_PFN_MASK).with_pfn(e.pfn());
            prop_assert_eq!(rebuilt.raw(), raw);
            prop_assert_eq!(PteEntry::from_raw(e.raw()), e);
        }
    }
}
