//! Kernel-facing surface seen by the attacker: the sprayed file mapping and
//! its last-level page tables, the TLB, double-owned device buffers and
//! process credentials.

mod mem;
mod tlb;

pub use mem::{
    PhysMemory, PteEntry, ENTRIES_PER_PT, PTE_ACCESSED, PTE_DIRTY, PTE_NX, PTE_PFN_MASK, PTE_PRESENT, PTE_USER,
    PTE_WRITABLE,
};
pub use tlb::TlbCache;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::{Block, BuddyAllocator, BuddyError, Owner, PartitionKind};
use crate::dram::{DramGeometry, InjectedFlip};
use crate::{KIB, MIB, PAGE_SIZE};

/// Value stored in the first eight bytes of every tmp-file page.
pub const MARKER: u64 = 0xA5A5_5A5A_D15C_0B0E;
/// Probe entry written through a candidate page table: present, writable, user, PFN 0.
pub const PROBE_PTE: u64 = 0x27;
pub const DEFAULT_VMA_LIMIT: u64 = 65_536;
/// Virtual span mapped by one last-level page-table page.
pub const PT_SPAN: u64 = ENTRIES_PER_PT * PAGE_SIZE;

const SPRAY_BASE_VADDR: u64 = 0x1000_0000_0000;
const BUFFER_BASE_VADDR: u64 = 0x2000_0000_0000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsError {
    #[error("VMA limit of {0} reached")]
    VmaLimit(u64),
    #[error(transparent)]
    Buddy(#[from] BuddyError),
    #[error("driver limit: {0}")]
    DriverLimit(String),
    #[error("page fault at virtual page {0}")]
    Fault(u64),
    #[error("no process with pid {0}")]
    NoSuchProcess(u32),
    #[error("mapping size {0} is not a multiple of 2 MiB")]
    Misaligned(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    Video,
    Sg,
}

/// Driver-imposed sizes and counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverLimits {
    pub video_max_chunks: u32,
    pub video_chunk_size: u64,
    pub sg_default_size: u64,
    pub sg_max_size: u64,
    pub open_file_limit: u32,
}

impl Default for DriverLimits {
    fn default() -> Self {
        DriverLimits {
            video_max_chunks: 32,
            video_chunk_size: 600 * KIB,
            sg_default_size: 32 * KIB,
            sg_max_size: 124 * KIB,
            // 1024 descriptors minus stdin, stdout and stderr
            open_file_limit: 1021,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsConfig {
    pub vma_limit: u64,
    pub tlb_entries: usize,
    /// Allocate device buffers with a guard row on each side.
    pub guard_rows: bool,
    pub drivers: DriverLimits,
}

impl Default for OsConfig {
    fn default() -> Self {
        OsConfig { vma_limit: DEFAULT_VMA_LIMIT, tlb_entries: 1536, guard_rows: false, drivers: DriverLimits::default() }
    }
}

/// A tmpfs file living in the user partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TmpFile {
    pub blocks: Vec<Block>,
}

impl TmpFile {
    pub fn pages(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn size(&self) -> u64 {
        self.pages() * PAGE_SIZE
    }

    pub fn pfn(&self, page: u64) -> u64 {
        self.blocks[page as usize].base_pfn
    }
}

/// The attacker's repeated mapping of one file: virtual page `v` (counted
/// from the region base) is translated by entry `v % 512` of `pt_pages[v / 512]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SprayRegion {
    pub file_pages: u64,
    pub pt_pages: Vec<Block>,
    pub vmas: u64,
}

impl SprayRegion {
    pub fn pages(&self) -> u64 {
        self.pt_pages.len() as u64 * ENTRIES_PER_PT
    }

    pub fn vaddr(&self, vpage: u64) -> u64 {
        SPRAY_BASE_VADDR + vpage * PAGE_SIZE
    }
}

/// Kernel memory that is also mapped into the attacker's address space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoubleOwnedBuffer {
    pub driver: Driver,
    pub chunks: Vec<Block>,
    /// Guard reservations when buffers are isolated.
    pub guards: Vec<Block>,
    pub chunk_size: u64,
    pub user_mapped: bool,
}

impl DoubleOwnedBuffer {
    pub fn total_size(&self) -> u64 {
        self.chunks.iter().map(Block::size).sum()
    }

    pub fn pages(&self) -> u64 {
        self.chunks.iter().map(|c| c.pages).sum()
    }

    /// Physical frame behind the buffer's `i`-th mapped page.
    pub fn page_pfn(&self, mut i: u64) -> Option<u64> {
        for c in &self.chunks {
            if i < c.pages {
                return Some(c.base_pfn + i);
            }
            i -= c.pages;
        }
        None
    }

    pub fn page_vaddr(&self, i: u64) -> u64 {
        BUFFER_BASE_VADDR + i * PAGE_SIZE
    }

    /// User virtual address to physical address through the buffer mapping.
    pub fn translate(&self, vaddr: u64) -> Option<u64> {
        if !self.user_mapped || vaddr < BUFFER_BASE_VADDR {
            return None;
        }
        let off = vaddr - BUFFER_BASE_VADDR;
        self.page_pfn(off / PAGE_SIZE).map(|pfn| pfn * PAGE_SIZE + off % PAGE_SIZE)
    }
}

/// Six consecutive 32-bit ids (uid, gid, suid, sgid, euid, egid) in one page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CredPage {
    pub pid: u32,
    pub block: Block,
    /// Byte offset of the first id in the page.
    pub offset: u64,
}

impl CredPage {
    pub fn uid_addr(&self) -> u64 {
        self.block.base() + self.offset
    }
}

pub const CRED_IDS: usize = 6;

/// Simulated operating system state.
#[derive(Debug, Clone)]
pub struct Kernel {
    geom: DramGeometry,
    pub buddy: BuddyAllocator,
    pub mem: PhysMemory,
    pub tlb: TlbCache,
    config: OsConfig,
    region: SprayRegion,
    processes: BTreeMap<u32, CredPage>,
    vma_count: u64,
}

impl Kernel {
    pub fn new(geom: DramGeometry, buddy: BuddyAllocator, config: OsConfig) -> Self {
        let mem = PhysMemory::new(geom.total_pages());
        Kernel {
            geom,
            buddy,
            mem,
            tlb: TlbCache::new(config.tlb_entries),
            config,
            region: SprayRegion::default(),
            processes: BTreeMap::new(),
            vma_count: 0,
        }
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geom
    }

    pub fn config(&self) -> &OsConfig {
        &self.config
    }

    pub fn region(&self) -> &SprayRegion {
        &self.region
    }

    pub fn vma_count(&self) -> u64 {
        self.vma_count
    }

    /// Create a tmpfs file of `size` bytes (one user-partition page at a time).
    pub fn create_tmp_file(&mut self, size: u64) -> Result<TmpFile, OsError> {
        if size == 0 || !size.is_multiple_of(PT_SPAN) {
            return Err(OsError::Misaligned(size));
        }
        let blocks = (0..size / PAGE_SIZE)
            .map(|_| self.buddy.allocate(PartitionKind::User, 0, Owner::TmpFile))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TmpFile { blocks })
    }

    /// Store [`MARKER`] at offset 0 of every page of `file`.
    pub fn write_marker(&mut self, file: &TmpFile) {
        for b in &file.blocks {
            self.mem.write_u64(b.base(), MARKER);
        }
    }

    /// Map `file` once more at the end of the spray region and touch every
    /// page, which allocates one kernel page-table page per 2 MiB mapped.
    pub fn mmap_primitive(&mut self, file: &TmpFile) -> Result<&[Block], OsError> {
        if self.vma_count + 1 >= self.config.vma_limit {
            return Err(OsError::VmaLimit(self.config.vma_limit));
        }
        if self.region.pt_pages.is_empty() {
            self.region.file_pages = file.pages();
        } else if self.region.file_pages != file.pages() {
            return Err(OsError::Misaligned(file.size()));
        }
        let first = self.region.pt_pages.len();
        let per_vma = file.pages() / ENTRIES_PER_PT;
        for t in 0..per_vma {
            let pt = match self.buddy.allocate(PartitionKind::Kernel, 0, Owner::PageTable) {
                Ok(b) => b,
                Err(e) => {
                    // Unwind the partially populated mapping.
                    for b in self.region.pt_pages.drain(first..) {
                        self.buddy.free(&b)?;
                    }
                    return Err(e.into());
                }
            };
            for j in 0..ENTRIES_PER_PT {
                let pfn = file.pfn(t * ENTRIES_PER_PT + j);
                self.mem.write_u64(pt.base() + j * 8, PteEntry::user_data(pfn).raw());
            }
            self.region.pt_pages.push(pt);
        }
        self.vma_count += 1;
        self.region.vmas += 1;
        Ok(&self.region.pt_pages[first..])
    }

    /// Entry currently translating virtual page `vpage` of the spray region,
    /// read straight from the page table (no TLB).
    pub fn walk(&self, vpage: u64) -> Option<PteEntry> {
        let pt = self.region.pt_pages.get((vpage / ENTRIES_PER_PT) as usize)?;
        Some(PteEntry::from_raw(self.mem.read_u64(pt.base() + (vpage % ENTRIES_PER_PT) * 8)))
    }

    fn translate(&mut self, vpage: u64, write: bool) -> Result<PteEntry, OsError> {
        let pte = match self.tlb.lookup(vpage) {
            Some(p) => p,
            None => {
                let p = self.walk(vpage).ok_or(OsError::Fault(vpage))?;
                if !(p.present() && p.user()) {
                    return Err(OsError::Fault(vpage));
                }
                self.tlb.insert(vpage, p);
                p
            }
        };
        if write && !pte.writable() {
            return Err(OsError::Fault(vpage));
        }
        Ok(pte)
    }

    pub fn read_virt_u64(&mut self, vpage: u64, offset: u64) -> Result<u64, OsError> {
        let pte = self.translate(vpage, false)?;
        Ok(self.mem.read_u64(pte.pfn() * PAGE_SIZE + offset))
    }

    pub fn write_virt_u64(&mut self, vpage: u64, offset: u64, value: u64) -> Result<(), OsError> {
        let pte = self.translate(vpage, true)?;
        self.mem.write_u64(pte.pfn() * PAGE_SIZE + offset, value);
        Ok(())
    }

    pub fn read_virt_u32(&mut self, vpage: u64, offset: u64) -> Result<u32, OsError> {
        let pte = self.translate(vpage, false)?;
        Ok(self.mem.read_u32(pte.pfn() * PAGE_SIZE + offset))
    }

    pub fn write_virt_u32(&mut self, vpage: u64, offset: u64, value: u32) -> Result<(), OsError> {
        let pte = self.translate(vpage, true)?;
        self.mem.write_u32(pte.pfn() * PAGE_SIZE + offset, value);
        Ok(())
    }

    /// Physical frame backing `vpage` through the current translation.
    pub fn virt_pfn(&mut self, vpage: u64) -> Result<u64, OsError> {
        self.translate(vpage, false).map(PteEntry::pfn)
    }

    /// Virtual pages of the spray region whose first word is not the marker.
    /// Faulting pages are skipped.
    pub fn scan_markers(&mut self) -> Vec<u64> {
        (0..self.region.pages())
            .filter(|&v| matches!(self.read_virt_u64(v, 0), Ok(val) if val != MARKER))
            .collect()
    }

    pub fn flush_tlb(&mut self) {
        self.tlb.flush();
    }

    pub fn apply_flip(&mut self, flip: &InjectedFlip) -> bool {
        self.mem.apply_flip(flip.phys_addr, flip.bit, flip.direction)
    }

    fn alloc_chunk(&mut self, driver: Driver, size: u64) -> Result<(Block, Vec<Block>), OsError> {
        let owner = match driver {
            Driver::Video => Owner::VideoBuffer,
            Driver::Sg => Owner::SgBuffer,
        };
        if self.config.guard_rows {
            let max = match driver {
                Driver::Video => self.config.drivers.video_chunk_size,
                Driver::Sg => self.config.drivers.sg_max_size,
            };
            let iso = self.buddy.allocate_isolated_buffer(
                PartitionKind::Kernel,
                size,
                max,
                self.geom.rows_size_per_row_index(),
                owner,
            )?;
            Ok((iso.buffer, iso.guards))
        } else {
            Ok((self.buddy.allocate_exact(PartitionKind::Kernel, size.div_ceil(PAGE_SIZE), owner)?, Vec::new()))
        }
    }

    pub fn open_video(&self) -> DoubleOwnedBuffer {
        DoubleOwnedBuffer {
            driver: Driver::Video,
            chunks: Vec::new(),
            guards: Vec::new(),
            chunk_size: self.config.drivers.video_chunk_size,
            user_mapped: false,
        }
    }

    /// Open an sg device with its reserved buffer resized to `reserved_size`.
    pub fn open_sg(&self, reserved_size: u64) -> Result<DoubleOwnedBuffer, OsError> {
        if reserved_size == 0 || reserved_size > self.config.drivers.sg_max_size {
            return Err(OsError::DriverLimit(format!(
                "sg reserved size {reserved_size} outside 1..={}",
                self.config.drivers.sg_max_size
            )));
        }
        Ok(DoubleOwnedBuffer {
            driver: Driver::Sg,
            chunks: Vec::new(),
            guards: Vec::new(),
            chunk_size: reserved_size,
            user_mapped: false,
        })
    }

    /// One more video buffer, or one more sg open, from the kernel partition.
    pub fn request_chunk(&mut self, buf: &mut DoubleOwnedBuffer) -> Result<Block, OsError> {
        let limits = self.config.drivers;
        match buf.driver {
            Driver::Video if buf.chunks.len() as u32 >= limits.video_max_chunks => {
                return Err(OsError::DriverLimit(format!("video allows {} buffers", limits.video_max_chunks)))
            }
            Driver::Sg if buf.chunks.len() as u32 >= limits.open_file_limit => {
                return Err(OsError::DriverLimit(format!("open-file limit {}", limits.open_file_limit)))
            }
            _ => {}
        }
        let (chunk, guards) = self.alloc_chunk(buf.driver, buf.chunk_size)?;
        buf.chunks.push(chunk);
        buf.guards.extend(guards);
        Ok(chunk)
    }

    /// Request `count` video buffers at the driver's fixed size.
    pub fn request_video_buffers(&mut self, count: u32) -> Result<DoubleOwnedBuffer, OsError> {
        let mut buf = self.open_video();
        for _ in 0..count {
            self.request_chunk(&mut buf)?;
        }
        Ok(buf)
    }

    /// Open the sg device `opens` times, each with a `reserved_size` buffer.
    pub fn open_sg_many(&mut self, opens: u32, reserved_size: u64) -> Result<DoubleOwnedBuffer, OsError> {
        let mut buf = self.open_sg(reserved_size)?;
        for _ in 0..opens {
            self.request_chunk(&mut buf)?;
        }
        Ok(buf)
    }

    pub fn map_buffer(&self, buf: &mut DoubleOwnedBuffer) {
        buf.user_mapped = true;
    }

    /// Give process `pid` a credential page in the user partition at a
    /// random free frame, all six ids set to `uid`.
    pub fn plant_cred<R: Rng + ?Sized>(&mut self, pid: u32, uid: u32, rng: &mut R) -> Result<CredPage, OsError> {
        let part = self
            .buddy
            .partition(PartitionKind::User)
            .ok_or(OsError::Buddy(BuddyError::OutOfMemory(PartitionKind::User)))?;
        let mut block = None;
        for _ in 0..64 {
            let pfn = rng.random_range(part.start_pfn..part.end_pfn);
            if let Ok(b) = self.buddy.allocate_page_at(pfn, Owner::Cred) {
                block = Some(b);
                break;
            }
        }
        let block = match block {
            Some(b) => b,
            None => self.buddy.allocate(PartitionKind::User, 0, Owner::Cred)?,
        };
        let slots = (PAGE_SIZE - CRED_IDS as u64 * 4) / 8;
        let offset = rng.random_range(0..=slots) * 8;
        for i in 0..CRED_IDS as u64 {
            self.mem.write_u32(block.base() + offset + i * 4, uid);
        }
        let cred = CredPage { pid, block, offset };
        self.processes.insert(pid, cred);
        Ok(cred)
    }

    pub fn cred(&self, pid: u32) -> Option<&CredPage> {
        self.processes.get(&pid)
    }

    /// uid of `pid` as read from its credential page.
    pub fn getuid(&self, pid: u32) -> Result<u32, OsError> {
        let c = self.processes.get(&pid).ok_or(OsError::NoSuchProcess(pid))?;
        Ok(self.mem.read_u32(c.uid_addr()))
    }

    pub fn page_table_bytes(&self) -> u64 {
        self.region.pt_pages.len() as u64 * PAGE_SIZE
    }
}

/// Size helpers used by driver sizing.
pub fn video_total(limits: &DriverLimits) -> u64 {
    limits.video_max_chunks as u64 * limits.video_chunk_size
}

pub fn sg_total(opens: u32, reserved_size: u64) -> u64 {
    opens as u64 * reserved_size
}

pub const TWO_MIB: u64 = 2 * MIB;
