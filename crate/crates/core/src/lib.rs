//! Simulator for rowhammer attacks against physically partitioned kernel
//! memory: DRAM geometry and bit flips, a partitioned buddy allocator, page
//! table spraying through double-owned device buffers, the memory-ambush
//! placement procedure, a row-buffer timing channel, the verification and
//! privilege-escalation search, and a guard-row mitigation.

pub mod buddy;
pub mod dram;
pub mod os;
pub mod ambush;
pub mod timing;
pub mod exploit;
pub mod harness;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

pub const PAGE_SIZE: u64 = 4 * KIB;
pub const PAGE_SHIFT: u32 = 12;
