//! Partitioned binary-buddy page allocator.
//!
//! Each partition (kernel or user) owns a contiguous page range with its own
//! per-order free lists. Splitting hands out the lowest-addressed half and
//! freeing coalesces eagerly, so the free lists always hold the maximal
//! aligned free blocks of the partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::DramGeometry;
use crate::PAGE_SIZE;

pub const DEFAULT_MAX_ORDER: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuddyError {
    #[error("order {order} above configured maximum {max}")]
    OrderTooLarge { order: u32, max: u32 },
    #[error("out of memory in {0} partition")]
    OutOfMemory(PartitionKind),
    #[error("block at pfn {0:#x} was already freed")]
    DoubleFree(u64),
    #[error("no allocated block at pfn {0:#x}")]
    UnknownBlock(u64),
    #[error("page {0:#x} is not free")]
    PageNotFree(u64),
    #[error("zero-sized request")]
    ZeroSize,
    #[error("request of {size} bytes exceeds limit {max}")]
    TooLarge { size: u64, max: u64 },
    #[error("cannot place a {0}-byte buffer with guard rows")]
    CannotPlaceGuarded(u64),
    #[error("invalid partition layout: {0}")]
    InvalidLayout(String),
    #[error("malformed buddyinfo text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Kernel,
    User,
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionKind::Kernel => "kernel",
            PartitionKind::User => "user",
        })
    }
}

/// Page range `[start_pfn, end_pfn)` owned by one isolation domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub kind: PartitionKind,
    pub start_pfn: u64,
    pub end_pfn: u64,
}

impl Partition {
    pub fn pages(&self) -> u64 {
        self.end_pfn - self.start_pfn
    }

    pub fn bytes(&self) -> u64 {
        self.pages() * PAGE_SIZE
    }

    pub fn phys_range(&self) -> std::ops::Range<u64> {
        self.start_pfn * PAGE_SIZE..self.end_pfn * PAGE_SIZE
    }

    pub fn contains_pfn(&self, pfn: u64) -> bool {
        (self.start_pfn..self.end_pfn).contains(&pfn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    PageTable,
    VideoBuffer,
    SgBuffer,
    TmpFile,
    Cred,
    Guard,
    Other,
}

impl Owner {
    pub fn is_kernel_owned(self) -> bool {
        matches!(self, Owner::PageTable | Owner::VideoBuffer | Owner::SgBuffer)
    }

    pub fn is_user_owned(self) -> bool {
        matches!(self, Owner::TmpFile | Owner::Cred)
    }
}

/// A live allocation: `pages` physically contiguous pages from `base_pfn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub base_pfn: u64,
    pub pages: u64,
    pub owner: Owner,
    pub partition: PartitionKind,
}

impl Block {
    pub fn base(&self) -> u64 {
        self.base_pfn * PAGE_SIZE
    }

    pub fn size(&self) -> u64 {
        self.pages * PAGE_SIZE
    }

    pub fn end_pfn(&self) -> u64 {
        self.base_pfn + self.pages
    }

    pub fn pfns(&self) -> std::ops::Range<u64> {
        self.base_pfn..self.end_pfn()
    }
}

/// A device buffer flanked by reserved guard rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsolatedBuffer {
    pub buffer: Block,
    /// Leading guard, padding up to the end of the last buffer row, trailing guard.
    pub guards: Vec<Block>,
}

impl IsolatedBuffer {
    pub fn guard_bytes(&self) -> u64 {
        self.guards.iter().map(Block::size).sum()
    }
}

/// Free-block counts per order for every partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuddyInfoSnapshot {
    pub partitions: Vec<(PartitionKind, Vec<u64>)>,
}

impl BuddyInfoSnapshot {
    pub fn counts(&self, kind: PartitionKind) -> &[u64] {
        self.partitions
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, c)| c.as_slice())
            .unwrap_or(&[])
    }

    /// Free bytes held in blocks of order strictly below `order`.
    pub fn free_bytes_below(&self, kind: PartitionKind, order: u32) -> u64 {
        self.counts(kind)
            .iter()
            .enumerate()
            .take(order as usize)
            .map(|(o, &n)| n * (PAGE_SIZE << o))
            .sum()
    }

    pub fn free_bytes(&self, kind: PartitionKind) -> u64 {
        self.free_bytes_below(kind, u32::MAX)
    }

    /// `/proc/buddyinfo`-style dump, one line per partition.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (kind, counts) in &self.partitions {
            out.push_str(&format!("Node 0, zone {:>8}", kind.to_string()));
            for c in counts {
                out.push_str(&format!(" {c:6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BuddyError> {
        let mut partitions = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut words = line.split_whitespace();
            let zone = words
                .by_ref()
                .skip_while(|w| *w != "zone")
                .nth(1)
                .ok_or_else(|| BuddyError::Parse(line.to_string()))?;
            let kind = match zone {
                "kernel" => PartitionKind::Kernel,
                "user" => PartitionKind::User,
                other => return Err(BuddyError::Parse(format!("unknown zone {other}"))),
            };
            let counts = words
                .map(|w| w.parse::<u64>().map_err(|e| BuddyError::Parse(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            partitions.push((kind, counts));
        }
        Ok(BuddyInfoSnapshot { partitions })
    }
}

#[derive(Debug, Clone)]
struct Zone {
    partition: Partition,
    free: Vec<BTreeSet<u64>>,
    free_pages: u64,
    guard_pages: u64,
}

impl Zone {
    fn new(partition: Partition, max_order: u32) -> Self {
        let mut zone = Zone {
            partition,
            free: vec![BTreeSet::new(); max_order as usize + 1],
            free_pages: 0,
            guard_pages: 0,
        };
        let mut pfn = partition.start_pfn;
        while pfn < partition.end_pfn {
            let order = largest_fit(pfn, partition.end_pfn, max_order);
            zone.free[order as usize].insert(pfn);
            zone.free_pages += 1 << order;
            pfn += 1 << order;
        }
        zone
    }

    fn max_order(&self) -> u32 {
        self.free.len() as u32 - 1
    }

    fn take(&mut self, order: u32) -> Option<u64> {
        let found = (order..=self.max_order()).find(|&o| !self.free[o as usize].is_empty())?;
        let base = self.free[found as usize].pop_first().expect("non-empty list");
        for o in (order..found).rev() {
            self.free[o as usize].insert(base + (1 << o));
        }
        self.free_pages -= 1 << order;
        Some(base)
    }

    fn take_page(&mut self, pfn: u64) -> bool {
        for o in 0..=self.max_order() {
            let base = pfn & !((1u64 << o) - 1);
            if self.free[o as usize].remove(&base) {
                // Keep the half holding pfn, return the other halves.
                let mut lo = base;
                for k in (0..o).rev() {
                    let half = 1u64 << k;
                    if pfn >= lo + half {
                        self.free[k as usize].insert(lo);
                        lo += half;
                    } else {
                        self.free[k as usize].insert(lo + half);
                    }
                }
                self.free_pages -= 1;
                return true;
            }
        }
        false
    }

    fn release_block(&mut self, mut base: u64, mut order: u32) {
        self.free_pages += 1 << order;
        while order < self.max_order() {
            let buddy = base ^ (1u64 << order);
            if !self.free[order as usize].remove(&buddy) {
                break;
            }
            base = base.min(buddy);
            order += 1;
        }
        self.free[order as usize].insert(base);
    }

    fn release_range(&mut self, mut start: u64, end: u64) {
        while start < end {
            let order = largest_fit(start, end, self.max_order());
            self.release_block(start, order);
            start += 1 << order;
        }
    }

    fn counts(&self) -> Vec<u64> {
        self.free.iter().map(|s| s.len() as u64).collect()
    }
}

/// Largest order whose block starting at `pfn` is aligned and ends by `end`.
fn largest_fit(pfn: u64, end: u64, max_order: u32) -> u32 {
    let align = if pfn == 0 { max_order } else { pfn.trailing_zeros().min(max_order) };
    (0..=align).rev().find(|&o| pfn + (1u64 << o) <= end).unwrap_or(0)
}

fn order_for_pages(pages: u64) -> u32 {
    pages.next_power_of_two().trailing_zeros()
}

#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    zones: Vec<Zone>,
    allocated: BTreeMap<u64, Block>,
    freed: BTreeSet<u64>,
    max_order: u32,
}

impl BuddyAllocator {
    pub fn new(partitions: &[Partition], max_order: u32) -> Result<Self, BuddyError> {
        for (i, a) in partitions.iter().enumerate() {
            if a.start_pfn >= a.end_pfn {
                return Err(BuddyError::InvalidLayout(format!("empty {} partition", a.kind)));
            }
            for b in &partitions[i + 1..] {
                if a.kind == b.kind {
                    return Err(BuddyError::InvalidLayout(format!("duplicate {} partition", a.kind)));
                }
                if a.start_pfn < b.end_pfn && b.start_pfn < a.end_pfn {
                    return Err(BuddyError::InvalidLayout("partitions overlap".into()));
                }
            }
        }
        Ok(BuddyAllocator {
            zones: partitions.iter().map(|p| Zone::new(*p, max_order)).collect(),
            allocated: BTreeMap::new(),
            freed: BTreeSet::new(),
            max_order,
        })
    }

    /// Kernel partition on row indices `[0, kernel_rows)`, `separation_rows`
    /// unused row indices, user partition on the rest.
    pub fn catt(
        geom: &DramGeometry,
        kernel_rows: u32,
        separation_rows: u32,
        max_order: u32,
    ) -> Result<Self, BuddyError> {
        if separation_rows == 0 {
            return Err(BuddyError::InvalidLayout("partitions must be separated by a row".into()));
        }
        if kernel_rows == 0 || kernel_rows + separation_rows >= geom.rows_per_bank() {
            return Err(BuddyError::InvalidLayout("kernel rows leave no user partition".into()));
        }
        let row_pages = geom.rows_size_per_row_index() / PAGE_SIZE;
        let kernel = Partition { kind: PartitionKind::Kernel, start_pfn: 0, end_pfn: kernel_rows as u64 * row_pages };
        let user = Partition {
            kind: PartitionKind::User,
            start_pfn: (kernel_rows + separation_rows) as u64 * row_pages,
            end_pfn: geom.total_pages(),
        };
        let last_kernel_row = geom.row_of(kernel.end_pfn * PAGE_SIZE - 1).map_err(|e| BuddyError::InvalidLayout(e.to_string()))?;
        let first_user_row = geom.row_of(user.start_pfn * PAGE_SIZE).map_err(|e| BuddyError::InvalidLayout(e.to_string()))?;
        if first_user_row < last_kernel_row + 2 {
            return Err(BuddyError::InvalidLayout("no unused row between partitions".into()));
        }
        BuddyAllocator::new(&[kernel, user], max_order)
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn partition(&self, kind: PartitionKind) -> Option<Partition> {
        self.zones.iter().find(|z| z.partition.kind == kind).map(|z| z.partition)
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.zones.iter().map(|z| z.partition).collect()
    }

    fn zone_mut(&mut self, kind: PartitionKind) -> Result<&mut Zone, BuddyError> {
        self.zones
            .iter_mut()
            .find(|z| z.partition.kind == kind)
            .ok_or_else(|| BuddyError::InvalidLayout(format!("no {kind} partition")))
    }

    fn zone(&self, kind: PartitionKind) -> Option<&Zone> {
        self.zones.iter().find(|z| z.partition.kind == kind)
    }

    fn register(&mut self, block: Block) -> Block {
        self.freed.remove(&block.base_pfn);
        if block.owner == Owner::Guard {
            if let Ok(z) = self.zone_mut(block.partition) {
                z.guard_pages += block.pages;
            }
        }
        self.allocated.insert(block.base_pfn, block);
        block
    }

    /// 2^order contiguous pages from the smallest sufficient free block.
    pub fn allocate(&mut self, kind: PartitionKind, order: u32, owner: Owner) -> Result<Block, BuddyError> {
        if order > self.max_order {
            return Err(BuddyError::OrderTooLarge { order, max: self.max_order });
        }
        let base = self.zone_mut(kind)?.take(order).ok_or(BuddyError::OutOfMemory(kind))?;
        Ok(self.register(Block { base_pfn: base, pages: 1 << order, owner, partition: kind }))
    }

    /// Exactly `pages` pages: allocate the covering order and give the tail back.
    pub fn allocate_exact(&mut self, kind: PartitionKind, pages: u64, owner: Owner) -> Result<Block, BuddyError> {
        if pages == 0 {
            return Err(BuddyError::ZeroSize);
        }
        let order = order_for_pages(pages);
        if order > self.max_order {
            return Err(BuddyError::OrderTooLarge { order, max: self.max_order });
        }
        let zone = self.zone_mut(kind)?;
        let base = zone.take(order).ok_or(BuddyError::OutOfMemory(kind))?;
        zone.release_range(base + pages, base + (1 << order));
        Ok(self.register(Block { base_pfn: base, pages, owner, partition: kind }))
    }

    /// Claim the specific free page `pfn`.
    pub fn allocate_page_at(&mut self, pfn: u64, owner: Owner) -> Result<Block, BuddyError> {
        let zone = self
            .zones
            .iter_mut()
            .find(|z| z.partition.contains_pfn(pfn))
            .ok_or(BuddyError::PageNotFree(pfn))?;
        let kind = zone.partition.kind;
        if !zone.take_page(pfn) {
            return Err(BuddyError::PageNotFree(pfn));
        }
        Ok(self.register(Block { base_pfn: pfn, pages: 1, owner, partition: kind }))
    }

    pub fn free(&mut self, block: &Block) -> Result<(), BuddyError> {
        match self.allocated.get(&block.base_pfn) {
            Some(b) if b == block => {}
            _ if self.freed.contains(&block.base_pfn) => return Err(BuddyError::DoubleFree(block.base_pfn)),
            _ => return Err(BuddyError::UnknownBlock(block.base_pfn)),
        }
        self.allocated.remove(&block.base_pfn);
        self.freed.insert(block.base_pfn);
        let zone = self.zone_mut(block.partition)?;
        if block.owner == Owner::Guard {
            zone.guard_pages -= block.pages;
        }
        zone.release_range(block.base_pfn, block.end_pfn());
        Ok(())
    }

    /// Buffer of `size` bytes whose row indices are flanked by one reserved
    /// row index on each side. `row_index_bytes` is the span of one row index
    /// and must be a power of two; rows are assumed to be row-index aligned.
    pub fn allocate_isolated_buffer(
        &mut self,
        kind: PartitionKind,
        size: u64,
        max_size: u64,
        row_index_bytes: u64,
        owner: Owner,
    ) -> Result<IsolatedBuffer, BuddyError> {
        if size == 0 {
            return Err(BuddyError::ZeroSize);
        }
        if size > max_size {
            return Err(BuddyError::TooLarge { size, max: max_size });
        }
        let row_pages = row_index_bytes / PAGE_SIZE;
        let pages = size.div_ceil(PAGE_SIZE);
        let buffer_rows = pages.div_ceil(row_pages);
        let span = (buffer_rows + 2) * row_pages;
        let order = order_for_pages(span).max(order_for_pages(row_pages));
        if order > self.max_order {
            return Err(BuddyError::CannotPlaceGuarded(size));
        }
        let zone = self.zone_mut(kind)?;
        let base = zone.take(order).ok_or(BuddyError::CannotPlaceGuarded(size))?;
        zone.release_range(base + span, base + (1 << order));

        let buf_start = base + row_pages;
        let buf_end = buf_start + pages;
        let mut guards = vec![Block { base_pfn: base, pages: row_pages, owner: Owner::Guard, partition: kind }];
        let pad_end = buf_start + buffer_rows * row_pages;
        if pad_end > buf_end {
            guards.push(Block { base_pfn: buf_end, pages: pad_end - buf_end, owner: Owner::Guard, partition: kind });
        }
        guards.push(Block { base_pfn: pad_end, pages: row_pages, owner: Owner::Guard, partition: kind });
        let buffer = self.register(Block { base_pfn: buf_start, pages, owner, partition: kind });
        for g in &guards {
            self.register(*g);
        }
        Ok(IsolatedBuffer { buffer, guards })
    }

    pub fn buddy_info(&self) -> BuddyInfoSnapshot {
        BuddyInfoSnapshot { partitions: self.zones.iter().map(|z| (z.partition.kind, z.counts())).collect() }
    }

    pub fn free_bytes(&self, kind: PartitionKind) -> u64 {
        self.zone(kind).map(|z| z.free_pages * PAGE_SIZE).unwrap_or(0)
    }

    pub fn total_free_bytes(&self) -> u64 {
        self.zones.iter().map(|z| z.free_pages * PAGE_SIZE).sum()
    }

    pub fn guard_bytes(&self, kind: PartitionKind) -> u64 {
        self.zone(kind).map(|z| z.guard_pages * PAGE_SIZE).unwrap_or(0)
    }

    /// Allocated bytes in `kind`, guard reservations excluded.
    pub fn allocated_bytes(&self, kind: PartitionKind) -> u64 {
        self.allocated
            .values()
            .filter(|b| b.partition == kind && b.owner != Owner::Guard)
            .map(Block::size)
            .sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.allocated.values()
    }

    /// The live block covering `pfn`, if any.
    pub fn block_containing(&self, pfn: u64) -> Option<&Block> {
        self.allocated.range(..=pfn).next_back().map(|(_, b)| b).filter(|b| b.pfns().contains(&pfn))
    }

    /// Free blocks of `kind` as (base pfn, order), ascending by order then address.
    pub fn free_blocks(&self, kind: PartitionKind) -> Vec<(u64, u32)> {
        self.zone(kind)
            .map(|z| {
                z.free
                    .iter()
                    .enumerate()
                    .flat_map(|(o, s)| s.iter().map(move |&b| (b, o as u32)))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn is_free(&self, pfn: u64) -> bool {
        self.zones.iter().filter(|z| z.partition.contains_pfn(pfn)).any(|z| {
            (0..=z.max_order()).any(|o| z.free[o as usize].contains(&(pfn & !((1u64 << o) - 1))))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{KIB, MIB};

    fn pool(pages: u64) -> BuddyAllocator {
        BuddyAllocator::new(
            &[Partition { kind: PartitionKind::Kernel, start_pfn: 0, end_pfn: pages }],
            DEFAULT_MAX_ORDER,
        )
        .unwrap()
    }

    fn counts(b: &BuddyAllocator) -> Vec<u64> {
        b.buddy_info().counts(PartitionKind::Kernel).to_vec()
    }

    #[test]
    fn single_split_of_128_page_block() {
        let mut b = BuddyAllocator::new(
            &[Partition { kind: PartitionKind::Kernel, start_pfn: 128, end_pfn: 256 }],
            DEFAULT_MAX_ORDER,
        )
        .unwrap();
        assert_eq!(counts(&b)[7], 1);
        let blk = b.allocate(PartitionKind::Kernel, 6, Owner::Other).unwrap();
        assert_eq!(blk.size(), 256 * KIB);
        assert_eq!(blk.base_pfn, 128);
        let c = counts(&b);
        assert_eq!(c[6], 1);
        assert_eq!(c.iter().sum::<u64>(), 1);
        assert_eq!(b.free_blocks(PartitionKind::Kernel), vec![(192, 6)]);
    }

    #[test]
    fn telescoping_split_from_pristine_order_ten() {
        let mut b = pool(1024);
        b.allocate(PartitionKind::Kernel, 0, Owner::Other).unwrap();
        let c = counts(&b);
        assert_eq!(&c[..10], &[1; 10]);
        assert_eq!(c[10], 0);
    }

    #[test]
    fn free_restores_pristine_pool() {
        let mut b = pool(1024);
        let blk = b.allocate(PartitionKind::Kernel, 0, Owner::Other).unwrap();
        b.free(&blk).unwrap();
        let mut want = vec![0; 11];
        want[10] = 1;
        assert_eq!(counts(&b), want);
        assert_eq!(b.free(&blk), Err(BuddyError::DoubleFree(0)));
    }

    #[test]
    fn no_merge_while_buddy_allocated() {
        let mut b = pool(2);
        let x = b.allocate(PartitionKind::Kernel, 0, Owner::Other).unwrap();
        let y = b.allocate(PartitionKind::Kernel, 0, Owner::Other).unwrap();
        b.free(&x).unwrap();
        assert_eq!(counts(&b)[..2], [1, 0]);
        b.free(&y).unwrap();
        assert_eq!(counts(&b)[..2], [0, 1]);
    }

    #[test]
    fn unknown_block_and_oom() {
        let mut b = pool(4);
        let fake = Block { base_pfn: 3, pages: 1, owner: Owner::Other, partition: PartitionKind::Kernel };
        assert_eq!(b.free(&fake), Err(BuddyError::UnknownBlock(3)));
        b.allocate(PartitionKind::Kernel, 2, Owner::Other).unwrap();
        assert_eq!(
            b.allocate(PartitionKind::Kernel, 0, Owner::Other),
            Err(BuddyError::OutOfMemory(PartitionKind::Kernel))
        );
        assert!(matches!(b.allocate(PartitionKind::Kernel, 11, Owner::Other), Err(BuddyError::OrderTooLarge { .. })));
    }

    #[test]
    fn exact_allocation_returns_tail() {
        let mut b = pool(256);
        let blk = b.allocate_exact(PartitionKind::Kernel, 150, Owner::VideoBuffer).unwrap();
        assert_eq!(blk.size(), 600 * KIB);
        // 106 tail pages = 64 + 32 + 8 + 2, plus the untouched upper 1 MiB.
        let free: u64 = b.free_blocks(PartitionKind::Kernel).iter().map(|(_, o)| 1u64 << o).sum();
        assert_eq!(free, 256 - 150);
        b.free(&blk).unwrap();
        assert_eq!(b.free_blocks(PartitionKind::Kernel), vec![(0, 8)]);
    }

    #[test]
    fn page_at_splits_around_target() {
        let mut b = pool(16);
        let blk = b.allocate_page_at(5, Owner::Cred).unwrap();
        assert_eq!(blk.base_pfn, 5);
        assert!(!b.is_free(5));
        assert!((0..16).filter(|&p| p != 5).all(|p| b.is_free(p)));
        assert_eq!(b.allocate_page_at(5, Owner::Cred), Err(BuddyError::PageNotFree(5)));
        b.free(&blk).unwrap();
        assert_eq!(b.free_blocks(PartitionKind::Kernel), vec![(0, 4)]);
    }

    #[test]
    fn unaligned_partition_is_covered_by_aligned_blocks() {
        let b = BuddyAllocator::new(
            &[Partition { kind: PartitionKind::User, start_pfn: 64, end_pfn: 3000 }],
            DEFAULT_MAX_ORDER,
        )
        .unwrap();
        let blocks = b.free_blocks(PartitionKind::User);
        assert!(blocks.iter().all(|&(base, o)| base % (1 << o) == 0));
        assert_eq!(blocks.iter().map(|(_, o)| 1u64 << o).sum::<u64>(), 3000 - 64);
    }

    #[test]
    fn isolated_buffer_layout() {
        let mut b = pool(4096);
        let iso = b
            .allocate_isolated_buffer(PartitionKind::Kernel, 600 * KIB, 600 * KIB, 256 * KIB, Owner::VideoBuffer)
            .unwrap();
        // guard row, three buffer rows (last one padded), guard row
        assert_eq!(iso.guards.first().unwrap().pages, 64);
        assert_eq!(iso.guards.last().unwrap().pages, 64);
        assert_eq!(iso.buffer.base_pfn, iso.guards[0].base_pfn + 64);
        assert_eq!(iso.guard_bytes(), 2 * 256 * KIB + 168 * KIB);
        let kind = PartitionKind::Kernel;
        assert_eq!(
            b.allocated_bytes(kind) + b.free_bytes(kind) + b.guard_bytes(kind),
            b.partition(kind).unwrap().bytes()
        );
        assert_eq!(
            b.allocate_isolated_buffer(kind, 0, MIB, 256 * KIB, Owner::VideoBuffer),
            Err(BuddyError::ZeroSize)
        );
        assert!(matches!(
            b.allocate_isolated_buffer(kind, 2 * MIB, MIB, 256 * KIB, Owner::VideoBuffer),
            Err(BuddyError::TooLarge { .. })
        ));
        for g in iso.guards.iter().chain(std::iter::once(&iso.buffer)) {
            b.free(g).unwrap();
        }
        assert_eq!(b.free_bytes(kind), 16 * MIB);
        assert_eq!(b.guard_bytes(kind), 0);
    }

    #[test]
    fn buddyinfo_text_round_trip() {
        let mut b = pool(1024);
        b.allocate(PartitionKind::Kernel, 3, Owner::Other).unwrap();
        let snap = b.buddy_info();
        let text = snap.to_text();
        assert!(text.starts_with("Node 0, zone   kernel"));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(BuddyInfoSnapshot::parse(&text).unwrap(), snap);
    }

    #[test]
    fn catt_layout_keeps_a_free_row() {
        let g = DramGeometry::dell_e6420();
        let b = BuddyAllocator::catt(&g, 2048, 1, DEFAULT_MAX_ORDER).unwrap();
        let k = b.partition(PartitionKind::Kernel).unwrap();
        let u = b.partition(PartitionKind::User).unwrap();
        assert_eq!(k.bytes(), 512 * MIB);
        assert_eq!(u.start_pfn - k.end_pfn, 64);
        assert!(BuddyAllocator::catt(&g, 2048, 0, DEFAULT_MAX_ORDER).is_err());
    }
}
