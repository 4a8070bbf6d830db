//! Experiment runner: machine profiles, seeded trials for the ambush and the
//! two memory-exhaustion baselines, aggregation and reports.

mod profile;
mod report;
mod workload;

pub use profile::{AttackConfig, MachineProfile, PartitionConfig, WorkloadConfig};
pub use report::{emit_report, read_csv, Aggregate, ReportFormat, TrialReport};
pub use workload::{preload, small_free, Background};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ambush::{plan, run_ambush, verify_adjacency, AmbushError, FreshBlocks, Placement};
use crate::buddy::{BuddyAllocator, BuddyError, Owner, PartitionKind};
use crate::dram::{Dram, VulnerabilityMap};
use crate::exploit::{hammer_loop, ExploitError, Status};
use crate::os::{Kernel, OsError};

pub const ATTACKER_PID: u32 = 4242;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Buddy(#[from] BuddyError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Ambush(#[from] AmbushError),
    #[error(transparent)]
    Exploit(#[from] ExploitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Drain small blocks, then share split blocks between buffers and page tables.
    Ambush,
    /// Spray page tables until memory is nearly exhausted.
    Spray,
    /// Take every block above, then at, the row-index size.
    FengShui,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ambush => "ambush",
            Strategy::Spray => "spray",
            Strategy::FengShui => "feng_shui",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ambush" => Ok(Strategy::Ambush),
            "spray" => Ok(Strategy::Spray),
            "feng_shui" | "feng-shui" | "fengshui" => Ok(Strategy::FengShui),
            _ => Err(format!("unknown strategy {s:?} (ambush, spray, feng_shui)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOptions {
    pub strategy: Strategy,
    /// Allocate device buffers with guard rows.
    pub mitigation: bool,
    /// Hammer after placement.
    pub exploit: bool,
    /// Keep buddyinfo dumps of each stage.
    pub capture_buddyinfo: bool,
}

impl Default for TrialOptions {
    fn default() -> Self {
        TrialOptions { strategy: Strategy::Ambush, mitigation: false, exploit: true, capture_buddyinfo: false }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Bytes in blocks of `order` or larger taken, largest first, from both partitions.
fn exhaust(buddy: &mut BuddyAllocator, min_order: u32, reserve: u64) -> u64 {
    let mut taken = 0;
    for order in (min_order..=buddy.max_order()).rev() {
        let size = crate::PAGE_SIZE << order;
        for kind in [PartitionKind::Kernel, PartitionKind::User] {
            while buddy.total_free_bytes() >= reserve + size {
                match buddy.allocate(kind, order, Owner::Other) {
                    Ok(b) => taken += b.size(),
                    Err(_) => break,
                }
            }
        }
    }
    taken
}

fn boot(profile: &MachineProfile, seed: u64, mitigation: bool) -> Result<(Kernel, Background), HarnessError> {
    let geom = profile.geometry()?;
    let mut os = profile.os;
    os.guard_rows = mitigation;
    let buddy = BuddyAllocator::catt(
        &geom,
        profile.partition.kernel_rows,
        profile.partition.separation_rows,
        profile.partition.max_order,
    )?;
    let mut kernel = Kernel::new(geom.clone(), buddy, os);
    let bg = preload(&mut kernel.buddy, geom.target_block_order(), &profile.workload, &mut stream(seed, 0))?;
    Ok((kernel, bg))
}

fn place(kernel: &mut Kernel, profile: &MachineProfile, seed: u64, bg: &Background) -> Result<Placement, HarnessError> {
    let mut cred_rng = stream(seed, 3);
    kernel.plant_cred(ATTACKER_PID, profile.attack.uid, &mut cred_rng)?;
    for i in 0..profile.attack.decoy_processes {
        kernel.plant_cred(ATTACKER_PID + 1 + i, profile.attack.uid, &mut cred_rng)?;
    }
    let request = profile.device_request();
    let plan = plan(profile.attack.threshold, request.dev_buf_size(), profile.os.vma_limit)?;
    let fresh = (!bg.fresh.is_empty()).then(|| FreshBlocks { blocks: bg.fresh.clone() });
    Ok(run_ambush(kernel, &plan, &request, &profile.attack.drain, fresh)?)
}

/// Boot, load the background workload and run the ambush placement, as the
/// first half of an ambush trial does.
pub fn ambush_placement(
    profile: &MachineProfile,
    seed: u64,
    mitigation: bool,
) -> Result<(Kernel, Placement), HarnessError> {
    let (mut kernel, bg) = boot(profile, seed, mitigation)?;
    let placement = place(&mut kernel, profile, seed, &bg)?;
    Ok((kernel, placement))
}

/// Run one seeded trial.
pub fn run_trial(profile: &MachineProfile, seed: u64, opts: &TrialOptions) -> Result<TrialReport, HarnessError> {
    let mut report = TrialReport::new(profile, seed, opts);
    let (mut kernel, bg) = boot(profile, seed, opts.mitigation)?;
    let geom = kernel.geometry().clone();
    let snap = |k: &Kernel, stage: &str, r: &mut TrialReport| {
        if opts.capture_buddyinfo {
            r.buddyinfo.push((stage.to_string(), k.buddy.buddy_info().to_text()));
        }
    };
    report.available_bytes = kernel.buddy.total_free_bytes();
    snap(&kernel, "workload", &mut report);

    match opts.strategy {
        Strategy::FengShui => {
            let row_order = (geom.rows_size_per_row_index() / crate::PAGE_SIZE).trailing_zeros();
            report.footprint_bytes = exhaust(&mut kernel.buddy, row_order, 0);
        }
        Strategy::Spray => {
            report.footprint_bytes = exhaust(&mut kernel.buddy, 0, profile.attack.spray_reserve);
        }
        Strategy::Ambush => {
            let placement = place(&mut kernel, profile, seed, &bg)?;
            snap(&kernel, "placed", &mut report);
            let adjacency = verify_adjacency(&geom, &placement.buffer.chunks, &kernel.region().pt_pages);
            report.footprint_bytes = placement.peak_footprint;
            report.adjacent = adjacency.adjacent();
            report.adjacency_pairs = adjacency.pairs.len() as u64;
            report.pt_pages = kernel.region().pt_pages.len() as u64;
            report.drained_pt_pages = placement.drain.pt_pages;
            report.stuffed_pt_pages = placement.stats.stuffed_pt_pages;
            report.guard_reserved_bytes = kernel.buddy.guard_bytes(PartitionKind::Kernel);
            if opts.mitigation {
                report.guard_flank_cost_bytes = 2 * geom.row_size();
            }
            if opts.exploit {
                let vuln = VulnerabilityMap::generate(&geom, &profile.vulnerability, &mut stream(seed, 1));
                let mut dram = Dram::new(geom.clone(), vuln, profile.hammer);
                let out = hammer_loop(
                    &mut kernel,
                    &mut dram,
                    &placement.buffer,
                    &profile.channel,
                    &profile.exploit,
                    Some(ATTACKER_PID),
                    &mut stream(seed, 2),
                )?;
                report.flips = out.flips;
                report.changed_bits = out.changed;
                report.pt_flips = out.pt_flips;
                report.status = out.status;
                report.rounds = out.rounds;
                report.pair_attempts = out.pair_attempts;
                report.activations = dram.total_activations();
            }
        }
    }
    report.footprint_fraction =
        if report.available_bytes == 0 { 0.0 } else { report.footprint_bytes as f64 / report.available_bytes as f64 };
    report.flippable = report.status >= Status::FlippableOnly;
    report.exploitable = report.status >= Status::KernelPrivilege;
    report.root = report.status >= Status::RootPrivilege;
    Ok(report)
}

/// `n` trials with seeds `seed, seed + 1, ...`, in seed order. A failing
/// trial yields a row carrying its error.
pub fn run_trials(profile: &MachineProfile, n: u64, seed: u64, opts: &TrialOptions) -> Vec<TrialReport> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i);
            run_trial(profile, s, opts).unwrap_or_else(|e| {
                let mut r = TrialReport::new(profile, s, opts);
                r.error = e.to_string();
                r
            })
        })
        .collect()
}

/// Ambush trials with guard rows around every device buffer.
pub fn evaluate_mitigation(profile: &MachineProfile, n: u64, seed: u64, exploit: bool) -> Vec<TrialReport> {
    let opts = TrialOptions { strategy: Strategy::Ambush, mitigation: true, exploit, capture_buddyinfo: false };
    run_trials(profile, n, seed, &opts)
}
