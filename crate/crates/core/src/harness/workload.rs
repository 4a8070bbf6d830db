use rand::seq::SliceRandom;
use rand::Rng;

use crate::buddy::{Block, BuddyAllocator, Owner, PartitionKind};

use super::profile::WorkloadConfig;
use super::HarnessError;

/// Blocks held by background processes.
#[derive(Debug, Clone, Default)]
pub struct Background {
    pub kernel: Vec<Block>,
    pub user: Vec<Block>,
    /// Kernel blocks released while the attack drains small blocks.
    pub fresh: Vec<Block>,
}

/// Free bytes of `kind` in blocks below `target_order`.
pub fn small_free(buddy: &BuddyAllocator, kind: PartitionKind, target_order: u32) -> u64 {
    buddy.buddy_info().free_bytes_below(kind, target_order)
}

/// Fill `fill + residue` bytes with random blocks, `small_share` of the bytes
/// below `target_order` with geometric orders, free random small ones
/// until `residue` small bytes are free, then trim to exactly `residue`.
fn fill_partition<R: Rng + ?Sized>(
    buddy: &mut BuddyAllocator,
    kind: PartitionKind,
    fill: u64,
    residue: u64,
    small_share: f64,
    target_order: u32,
    rng: &mut R,
) -> Result<Vec<Block>, HarnessError> {
    let max_order = buddy.max_order();
    let mut live = Vec::new();
    let (mut allocated, mut small) = (0u64, 0u64);
    while allocated < fill + residue {
        let order = if small as f64 <= small_share * allocated as f64 {
            let mut k = 0;
            while k + 1 < target_order && rng.random::<f64>() < 0.5 {
                k += 1;
            }
            k
        } else {
            rng.random_range(target_order..=max_order)
        };
        let b = buddy.allocate(kind, order, Owner::Other)?;
        allocated += b.size();
        if order < target_order {
            small += b.size();
        }
        live.push(b);
    }

    let mut holes: Vec<usize> = (0..live.len()).filter(|&i| live[i].pages < 1 << target_order).collect();
    holes.shuffle(rng);
    let mut freed = vec![false; live.len()];
    for i in holes {
        if small_free(buddy, kind, target_order) >= residue {
            break;
        }
        buddy.free(&live[i])?;
        freed[i] = true;
    }
    let have = small_free(buddy, kind, target_order);
    if have < residue {
        return Err(HarnessError::Config(format!(
            "{kind} workload yields only {have} small bytes, {residue} requested"
        )));
    }
    let mut kept: Vec<Block> = live.into_iter().zip(freed).filter(|(_, f)| !f).map(|(b, _)| b).collect();
    for _ in 0..(have - residue) / crate::PAGE_SIZE {
        kept.push(buddy.allocate(kind, 0, Owner::Other)?);
    }
    Ok(kept)
}

pub fn preload<R: Rng + ?Sized>(
    buddy: &mut BuddyAllocator,
    target_order: u32,
    cfg: &WorkloadConfig,
    rng: &mut R,
) -> Result<Background, HarnessError> {
    let mut kernel = fill_partition(
        buddy,
        PartitionKind::Kernel,
        cfg.kernel_fill,
        cfg.kernel_small_residue,
        cfg.small_block_share,
        target_order,
        rng,
    )?;
    let user = fill_partition(
        buddy,
        PartitionKind::User,
        cfg.user_fill,
        cfg.user_small_residue,
        cfg.small_block_share,
        target_order,
        rng,
    )?;
    let mut fresh = Vec::new();
    if cfg.fresh_small > 0 {
        kernel.shuffle(rng);
        let mut total = 0;
        kernel.retain(|b| {
            if total < cfg.fresh_small && b.pages < 1 << target_order {
                total += b.size();
                fresh.push(*b);
                false
            } else {
                true
            }
        });
    }
    kernel.sort_by_key(|b| b.base_pfn);
    Ok(Background { kernel, user, fresh })
}
