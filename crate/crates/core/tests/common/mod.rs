//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use ambush_sim::buddy::{Block, BuddyAllocator, Owner, Partition, PartitionKind};
use ambush_sim::dram::{BankRow, DramGeometry, GeometryConfig, MappingSpec};
use ambush_sim::os::{Kernel, PteEntry, TmpFile, TWO_MIB};
use ambush_sim::PAGE_SIZE;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- buddy ----

/// One bit per page: the only state a correct allocator must agree on.
pub struct BitmapOracle {
    base: u64,
    free: Vec<bool>,
}

impl BitmapOracle {
    pub fn new(p: &Partition) -> Self {
        BitmapOracle { base: p.start_pfn, free: vec![true; p.pages() as usize] }
    }

    fn idx(&self, pfn: u64) -> usize {
        (pfn - self.base) as usize
    }

    pub fn take(&mut self, b: &Block) -> Result<(), String> {
        for pfn in b.pfns() {
            let i = self.idx(pfn);
            if !self.free[i] {
                return Err(format!("pfn {pfn:#x} handed out twice"));
            }
            self.free[i] = false;
        }
        Ok(())
    }

    pub fn release(&mut self, b: &Block) {
        for pfn in b.pfns() {
            let i = self.idx(pfn);
            self.free[i] = true;
        }
    }

    /// Whether some naturally aligned run of 2^order pages is entirely free.
    pub fn has_aligned_run(&self, order: u32) -> bool {
        let n = 1usize << order;
        self.free.chunks(n).any(|c| c.len() == n && c.iter().all(|&f| f))
    }

    pub fn free_set(&self) -> BTreeSet<u64> {
        (0..self.free.len()).filter(|&i| self.free[i]).map(|i| self.base + i as u64).collect()
    }
}

/// The allocator's free lists as a page bitmap of partition `p`.
fn allocator_free_map(b: &BuddyAllocator, p: &Partition) -> Result<Vec<bool>, String> {
    let mut map = vec![false; p.pages() as usize];
    let mut order_of = vec![u8::MAX; p.pages() as usize];
    let blocks = b.free_blocks(p.kind);
    for &(base, order) in &blocks {
        let i = (base - p.start_pfn) as usize;
        let run = map.get_mut(i..i + (1 << order)).ok_or(format!("free block {base:#x} outside {}", p.kind))?;
        if run.iter().any(|&f| f) {
            return Err(format!("free blocks overlap at {base:#x}"));
        }
        run.fill(true);
        order_of[i] = order as u8;
    }
    for &(base, order) in &blocks {
        let buddy = ((base - p.start_pfn) ^ (1 << order)) as usize;
        if order < b.max_order() && order_of.get(buddy) == Some(&(order as u8)) {
            return Err(format!("free buddies {base:#x}/{order} not coalesced"));
        }
    }
    Ok(map)
}

/// Random allocate/free sequence on a two-partition pool of `pages` pages,
/// checked against the bitmap after every operation.
pub fn buddy_equivalence(seed: u64, ops: usize, pages: u64, max_order: u32) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = [
        Partition { kind: PartitionKind::Kernel, start_pfn: 0, end_pfn: pages / 2 },
        Partition { kind: PartitionKind::User, start_pfn: pages / 2, end_pfn: pages },
    ];
    let mut buddy = BuddyAllocator::new(&parts, max_order).map_err(|e| e.to_string())?;
    let mut oracles = [BitmapOracle::new(&parts[0]), BitmapOracle::new(&parts[1])];
    let mut live: Vec<Block> = Vec::new();
    for op in 0..ops {
        let k = rng.random_range(0..2usize);
        let kind = parts[k].kind;
        if live.is_empty() || rng.random_bool(0.55) {
            let order = rng.random_range(0..=max_order + 1);
            match buddy.allocate(kind, order, Owner::Other) {
                Ok(b) => {
                    if b.pages != 1 << order || b.base_pfn % (1 << order) != 0 || b.partition != kind {
                        return Err(format!("op {op}: bad block {b:?} for order {order}"));
                    }
                    oracles[k].take(&b).map_err(|e| format!("op {op}: {e}"))?;
                    live.push(b);
                }
                Err(_) => {
                    if order <= max_order && oracles[k].has_aligned_run(order) {
                        return Err(format!("op {op}: order {order} refused with an aligned free run"));
                    }
                }
            }
        } else {
            let i = rng.random_range(0..live.len());
            let b = live.swap_remove(i);
            buddy.free(&b).map_err(|e| format!("op {op}: {e}"))?;
            oracles[(b.partition == PartitionKind::User) as usize].release(&b);
        }
        for (p, o) in parts.iter().zip(&oracles) {
            let got = allocator_free_map(&buddy, p).map_err(|e| format!("op {op}: {e}"))?;
            if got != o.free {
                return Err(format!("op {op}: {} free set differs from bitmap", p.kind));
            }
        }
    }
    Ok(())
}

// -------------------------------------------------------------- mapping ----

fn select(fns: &[Vec<u32>], addr: u64) -> u32 {
    fns.iter().enumerate().map(|(i, f)| f.iter().fold(0, |acc, &b| acc ^ ((addr >> b) & 1) as u32) << i).sum()
}

/// (dimm, rank, bank, row) straight from the bit description.
pub fn spec_location(spec: &MappingSpec, addr: u64) -> (u32, u32, u32, u32) {
    let (lo, hi) = spec.row_index_bit_range;
    let row = ((addr >> lo) & ((1u64 << (hi - lo + 1)) - 1)) as u32;
    (
        select(&spec.dimm_select_bits, addr),
        select(&spec.rank_select_bits, addr),
        select(&spec.bank_select_bits, addr),
        row,
    )
}

/// A column assignment making the map bijective exists exactly when every
/// bank row receives `row_size` addresses.
pub fn spec_is_bijective(cfg: &GeometryConfig) -> bool {
    let capacity = cfg.dimms as u64 * cfg.ranks_per_dimm as u64 * cfg.banks_per_rank as u64
        * cfg.rows_per_bank as u64
        * cfg.row_size;
    let rows = (capacity / cfg.row_size) as usize;
    let mut counts = vec![0u64; rows];
    for addr in 0..capacity {
        let (d, r, b, row) = spec_location(&cfg.mapping, addr);
        let i = ((d * cfg.ranks_per_dimm + r) * cfg.banks_per_rank + b) as usize * cfg.rows_per_bank as usize + row as usize;
        counts[i] += 1;
    }
    counts.iter().all(|&c| c == cfg.row_size)
}

/// A 1 MiB geometry with random XOR selector functions and row placement.
pub fn random_small_config<R: Rng>(rng: &mut R) -> GeometryConfig {
    let addr_bits = 20u32;
    let row_bits = 4u32;
    let row_lo = rng.random_range(0..=addr_bits - row_bits);
    let mut pick = |n: usize| -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let k = rng.random_range(1..=3);
                let mut bits: Vec<u32> = (0..addr_bits).collect();
                bits.shuffle(rng);
                let mut f = bits[..k].to_vec();
                f.sort_unstable();
                f
            })
            .collect()
    };
    let mapping = MappingSpec {
        dimm_select_bits: pick(1),
        rank_select_bits: pick(1),
        bank_select_bits: pick(2),
        row_index_bit_range: (row_lo, row_lo + row_bits - 1),
    };
    GeometryConfig { dimms: 2, ranks_per_dimm: 2, banks_per_rank: 4, rows_per_bank: 16, row_size: 4096, mapping }
}

/// Exhaustive forward/inverse check of a validated geometry.
pub fn exhaustive_bijection(geom: &DramGeometry) -> Result<(), String> {
    let mut seen = vec![false; geom.capacity() as usize];
    for addr in 0..geom.capacity() {
        let c = geom.map(addr).map_err(|e| e.to_string())?;
        if (c.dimm, c.rank, c.bank, c.row) != spec_location(geom.mapping(), addr) {
            return Err(format!("{addr:#x}: selectors disagree with the bit description"));
        }
        if c.column >= geom.row_size() {
            return Err(format!("{addr:#x}: column {} out of row", c.column));
        }
        let slot = ((((c.dimm * geom.ranks_per_dimm() + c.rank) * geom.banks_per_rank() + c.bank) as u64
            * geom.rows_per_bank() as u64
            + c.row as u64)
            * geom.row_size()
            + c.column) as usize;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(format!("{addr:#x}: coordinate {c:?} already taken"));
        }
        if geom.unmap(c).map_err(|e| e.to_string())? != addr {
            return Err(format!("{addr:#x}: unmap does not invert map"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------- dell map ----

/// Bank row of a Dell physical address, computed from the documented bits.
pub fn dell_bank_row(addr: u64) -> (u32, u32, u32, u32) {
    let bit = |b: u32| ((addr >> b) & 1) as u32;
    let bank = (bit(14) ^ bit(18)) | (bit(15) ^ bit(19)) << 1 | (bit(16) ^ bit(20)) << 2;
    (bit(6), bit(17) ^ bit(21), bank, ((addr >> 18) & 0x7fff) as u32)
}

pub fn dell_page_rows(pfn: u64) -> [(u32, u32, u32, u32); 2] {
    let a = pfn * PAGE_SIZE;
    [dell_bank_row(a), dell_bank_row(a + 64)]
}

/// Any page-table row directly above or below any buffer row of the same bank.
pub fn neighbor_scan(buffer: &[Block], pts: &[Block]) -> bool {
    let mut pt_rows = HashSet::new();
    for b in pts {
        for pfn in b.pfns() {
            pt_rows.extend(dell_page_rows(pfn));
        }
    }
    buffer.iter().flat_map(|b| b.pfns()).flat_map(dell_page_rows).any(|(d, r, k, row)| {
        (row > 0 && pt_rows.contains(&(d, r, k, row - 1))) || pt_rows.contains(&(d, r, k, row + 1))
    })
}

pub fn bank_row_tuple(br: &BankRow) -> (u32, u32, u32, u32) {
    (br.bank.dimm, br.bank.rank, br.bank.bank, br.row)
}

// ----------------------------------------------------------- page table ----

pub const PTE_PER_PAGE: u64 = 512;

/// Raw PTE of sprayed page `v`, read from physical memory.
pub fn raw_pte(k: &Kernel, v: u64) -> PteEntry {
    let pt = k.region().pt_pages[(v / PTE_PER_PAGE) as usize];
    PteEntry::from_raw(k.mem.read_u64(pt.base() + (v % PTE_PER_PAGE) * 8))
}

/// Brute force over every sprayed PTE: a user-writable mapping that lands on
/// a sprayed page table whose entry 1 belongs to another sprayed page.
pub fn pt_oracle(k: &Kernel) -> bool {
    let pts: HashMap<u64, u64> = k.region().pt_pages.iter().enumerate().map(|(j, b)| (b.base_pfn, j as u64)).collect();
    (0..k.region().pages()).any(|a| {
        let e = raw_pte(k, a);
        e.present() && e.user() && e.writable() && pts.get(&e.pfn()).is_some_and(|&j| j * PTE_PER_PAGE + 1 != a)
    })
}

pub fn pt_state(k: &Kernel) -> Vec<[u64; 512]> {
    k.region().pt_pages.iter().map(|b| k.mem.snapshot_page(b.base_pfn)).collect()
}

/// A Dell kernel whose page tables start `skip` frames into the kernel
/// partition, with a marked 2 MiB file mapped `maps` times.
pub fn sprayed_kernel(maps: u64, skip: u64) -> (Kernel, TmpFile) {
    use ambush_sim::os::OsConfig;
    let g = DramGeometry::dell_e6420();
    let b = BuddyAllocator::catt(&g, 2048, 1, ambush_sim::buddy::DEFAULT_MAX_ORDER).unwrap();
    let mut k = Kernel::new(g, b, OsConfig::default());
    for _ in 0..skip {
        k.buddy.allocate(PartitionKind::Kernel, 0, Owner::Other).unwrap();
    }
    let f = k.create_tmp_file(TWO_MIB).unwrap();
    k.write_marker(&f);
    for _ in 0..maps {
        k.mmap_primitive(&f).unwrap();
    }
    (k, f)
}

// ------------------------------------------------------------------ csv ----

/// Column totals read back from harness CSV without the library's types.
#[derive(Debug, Default, PartialEq)]
pub struct CsvTotals {
    pub rows: u64,
    pub adjacent: u64,
    pub flippable: u64,
    pub exploitable: u64,
    pub root: u64,
    pub footprint_sum: u64,
}

pub fn csv_totals(text: &str) -> CsvTotals {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"));
    let (adj, fl, ex, root, fp) = (col("adjacent"), col("flippable"), col("exploitable"), col("root"), col("footprint_bytes"));
    let mut t = CsvTotals::default();
    for rec in r.records() {
        let rec = rec.unwrap();
        let yes = |i: usize| (&rec[i] == "true") as u64;
        t.rows += 1;
        t.adjacent += yes(adj);
        t.flippable += yes(fl);
        t.exploitable += yes(ex);
        t.root += yes(root);
        t.footprint_sum += rec[fp].parse::<u64>().unwrap();
    }
    t
}
