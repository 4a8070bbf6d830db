//! Memory ambush: size the spray for a memory threshold, drain the kernel's
//! free small blocks with page tables, then split large blocks between
//! device-buffer chunks and page-table pages.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::{Block, BuddyInfoSnapshot, PartitionKind};
use crate::dram::{BankRow, DramGeometry};
use crate::os::{DoubleOwnedBuffer, Driver, DriverLimits, Kernel, OsError, TmpFile, PT_SPAN};
use crate::{MIB, PAGE_SIZE};

pub const INITIAL_FILE_SIZE: u64 = 2 * MIB;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbushError {
    #[error("threshold {threshold} bytes below the minimum {minimum}")]
    ThresholdTooSmall { threshold: u64, minimum: u64 },
    #[error("VMA budget exhausted after {drained} of {target} small-block bytes")]
    DrainIncomplete { drained: u64, target: u64 },
    #[error(transparent)]
    Os(#[from] OsError),
}

/// Sizes derived from the memory threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbushPlan {
    pub threshold_mem_size: u64,
    pub dev_buf_size: u64,
    pub file_size: u64,
    pub page_size: u64,
    pub pt_size: u64,
    pub map_mem_size: u64,
    pub vma_num: u64,
    pub vma_limit: u64,
}

impl AmbushPlan {
    pub fn pt_pages_per_vma(&self) -> u64 {
        self.file_size / PT_SPAN
    }

    /// Page-table pages the plan can create.
    pub fn pt_budget_pages(&self) -> u64 {
        self.vma_num * self.pt_pages_per_vma()
    }
}

/// Double the file size from 2 MiB until the mapping count fits under the VMA limit.
pub fn plan(threshold: u64, dev_buf_size: u64, vma_limit: u64) -> Result<AmbushPlan, AmbushError> {
    let minimum = dev_buf_size + INITIAL_FILE_SIZE;
    if threshold < minimum {
        return Err(AmbushError::ThresholdTooSmall { threshold, minimum });
    }
    let page_size = PAGE_SIZE;
    let mut file_size = INITIAL_FILE_SIZE;
    loop {
        let Some(pt_size) = (threshold - dev_buf_size).checked_sub(file_size) else {
            return Err(AmbushError::ThresholdTooSmall { threshold, minimum: dev_buf_size + file_size });
        };
        let map_mem_size = pt_size * (PAGE_SIZE / 8);
        let vma_num = map_mem_size / file_size;
        if vma_num < vma_limit {
            return Ok(AmbushPlan {
                threshold_mem_size: threshold,
                dev_buf_size,
                file_size,
                page_size,
                pt_size,
                map_mem_size,
                vma_num,
                vma_limit,
            });
        }
        file_size *= 2;
    }
}

/// Which double-owned buffer to request and how much of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRequest {
    pub driver: Driver,
    pub chunks: u32,
    pub chunk_size: u64,
}

impl DeviceRequest {
    /// Every video buffer the driver allows.
    pub fn video(limits: &DriverLimits) -> Self {
        DeviceRequest { driver: Driver::Video, chunks: limits.video_max_chunks, chunk_size: limits.video_chunk_size }
    }

    pub fn sg(opens: u32, reserved_size: u64) -> Self {
        DeviceRequest { driver: Driver::Sg, chunks: opens, chunk_size: reserved_size }
    }

    pub fn dev_buf_size(&self) -> u64 {
        self.chunks as u64 * self.chunk_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrainOptions {
    /// Re-read buddyinfo once the target is reached and chase small blocks
    /// that appeared meanwhile.
    pub refresh: bool,
    /// Upper bound on the extra bytes the refresh may add to the target.
    pub refresh_cap: u64,
}

impl Default for DrainOptions {
    fn default() -> Self {
        DrainOptions { refresh: true, refresh_cap: 16 * MIB }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrainReport {
    pub pt_pages: u64,
    pub target_bytes: u64,
    pub refreshes: u32,
    /// Small free bytes still in the kernel partition when the drain stopped.
    pub residual_small_bytes: u64,
}

/// Blocks a background task releases halfway through the drain.
#[derive(Debug, Clone, Default)]
pub struct FreshBlocks {
    pub blocks: Vec<Block>,
}

/// Kernel small-block bytes, read the way an unprivileged process would:
/// through the buddyinfo text.
pub fn small_blocks_size(kernel: &Kernel) -> u64 {
    let text = kernel.buddy.buddy_info().to_text();
    let snap = BuddyInfoSnapshot::parse(&text).expect("buddyinfo dump parses");
    snap.free_bytes_below(PartitionKind::Kernel, kernel.geometry().target_block_order())
}

/// Create the tmp file and stamp its markers.
pub fn prepare_file(kernel: &mut Kernel, plan: &AmbushPlan) -> Result<TmpFile, AmbushError> {
    let file = kernel.create_tmp_file(plan.file_size)?;
    kernel.write_marker(&file);
    Ok(file)
}

fn pt_bytes(kernel: &Kernel) -> u64 {
    kernel.page_table_bytes()
}

/// Map the file until the page tables created equal the small-block bytes
/// reported by buddyinfo.
pub fn drain_small_blocks(
    kernel: &mut Kernel,
    plan: &AmbushPlan,
    file: &TmpFile,
    options: &DrainOptions,
    mut fresh: Option<FreshBlocks>,
) -> Result<DrainReport, AmbushError> {
    let start = pt_bytes(kernel);
    let mut target = small_blocks_size(kernel);
    let mut bumped = 0;
    let mut report = DrainReport::default();
    let half = target / 2;
    loop {
        while pt_bytes(kernel) - start < target {
            if kernel.region().vmas >= plan.vma_num {
                return Err(AmbushError::DrainIncomplete { drained: pt_bytes(kernel) - start, target });
            }
            kernel.mmap_primitive(file)?;
            if pt_bytes(kernel) - start >= half {
                if let Some(f) = fresh.take() {
                    for b in &f.blocks {
                        kernel.buddy.free(b).map_err(OsError::from)?;
                    }
                }
            }
        }
        if !options.refresh {
            break;
        }
        let fresh_small = small_blocks_size(kernel);
        let room = options.refresh_cap.saturating_sub(bumped);
        if fresh_small == 0 || room == 0 {
            break;
        }
        let bump = fresh_small.min(room);
        target += bump;
        bumped += bump;
        report.refreshes += 1;
    }
    report.pt_pages = (pt_bytes(kernel) - start) / PAGE_SIZE;
    report.target_bytes = target;
    report.residual_small_bytes = small_blocks_size(kernel);
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlacementStats {
    pub stuffed_pt_pages: u64,
    pub tail_pt_pages: u64,
}

/// Allocate the device buffer one chunk at a time, stuffing the small blocks
/// each chunk leaves behind with page tables, then spend what remains of the
/// mapping budget.
pub fn place_interleaved(
    kernel: &mut Kernel,
    plan: &AmbushPlan,
    file: &TmpFile,
    request: &DeviceRequest,
) -> Result<(DoubleOwnedBuffer, PlacementStats), AmbushError> {
    let mut buf = match request.driver {
        Driver::Video => kernel.open_video(),
        Driver::Sg => kernel.open_sg(request.chunk_size)?,
    };
    buf.chunk_size = request.chunk_size;
    let mut stats = PlacementStats::default();
    for _ in 0..request.chunks {
        kernel.request_chunk(&mut buf)?;
        while kernel.region().vmas < plan.vma_num && small_blocks_size(kernel) > 0 {
            stats.stuffed_pt_pages += kernel.mmap_primitive(file)?.len() as u64;
        }
    }
    while kernel.region().vmas < plan.vma_num {
        stats.tail_pt_pages += kernel.mmap_primitive(file)?.len() as u64;
    }
    kernel.map_buffer(&mut buf);
    Ok((buf, stats))
}

/// Result of the full placement procedure.
#[derive(Debug, Clone)]
pub struct Placement {
    pub plan: AmbushPlan,
    pub file: TmpFile,
    pub buffer: DoubleOwnedBuffer,
    pub drain: DrainReport,
    pub stats: PlacementStats,
    pub peak_footprint: u64,
}

impl Placement {
    pub fn pt_pages(&self, kernel: &Kernel) -> u64 {
        kernel.region().pt_pages.len() as u64
    }
}

/// Attack-charged bytes: device buffers, the tmp file and its page tables.
pub fn footprint(kernel: &Kernel, file: Option<&TmpFile>, buffer: Option<&DoubleOwnedBuffer>) -> u64 {
    kernel.page_table_bytes() + file.map_or(0, TmpFile::size) + buffer.map_or(0, DoubleOwnedBuffer::total_size)
}

pub fn run_ambush(
    kernel: &mut Kernel,
    plan: &AmbushPlan,
    request: &DeviceRequest,
    options: &DrainOptions,
    fresh: Option<FreshBlocks>,
) -> Result<Placement, AmbushError> {
    let file = prepare_file(kernel, plan)?;
    let drain = drain_small_blocks(kernel, plan, &file, options, fresh)?;
    let (buffer, stats) = place_interleaved(kernel, plan, &file, request)?;
    let peak_footprint = footprint(kernel, Some(&file), Some(&buffer));
    Ok(Placement { plan: *plan, file, buffer, drain, stats, peak_footprint })
}

/// Buffer rows that neighbour page-table rows in the same bank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adjacency {
    pub pairs: Vec<(BankRow, BankRow)>,
}

impl Adjacency {
    pub fn adjacent(&self) -> bool {
        !self.pairs.is_empty()
    }
}

/// Oracle-side check using the physical layout of both allocations.
pub fn verify_adjacency(geom: &DramGeometry, buffer_chunks: &[Block], pt_pages: &[Block]) -> Adjacency {
    let rows_of = |blocks: &[Block]| -> BTreeSet<BankRow> {
        blocks.iter().flat_map(|b| b.pfns()).flat_map(|pfn| geom.bank_rows_of_page(pfn)).collect()
    };
    let buffer_rows = rows_of(buffer_chunks);
    let pt_rows = rows_of(pt_pages);
    let mut pairs = Vec::new();
    for &br in &buffer_rows {
        for n in geom.bank_row_neighbors(br) {
            if pt_rows.contains(&n) {
                pairs.push((br, n));
            }
        }
    }
    Adjacency { pairs }
}
