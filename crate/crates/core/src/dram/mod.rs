//! DRAM geometry, address mapping and rowhammer mechanics.

mod hammer;
mod mapping;

pub use hammer::{
    BankState, DirectionPolicy, Dram, FlipDirection, HammerConfig, HammerMode, InjectedFlip,
    VulnerabilityMap, VulnerabilityParams, VulnerableCell,
};
pub use mapping::MappingSpec;

use mapping::AddressMapper;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{KIB, PAGE_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DramError {
    #[error("{what} must be a power of two, got {value}")]
    NotPowerOfTwo { what: &'static str, value: u64 },
    #[error("row size {0} is not a multiple of the 4 KiB page size")]
    RowNotPageMultiple(u64),
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error("mapping is not a bijection over the geometry capacity")]
    NotBijective,
    #[error("physical address {addr:#x} outside capacity {capacity:#x}")]
    AddressOutOfRange { addr: u64, capacity: u64 },
    #[error("coordinate {0:?} outside geometry bounds")]
    CoordOutOfRange(DramCoord),
    #[error("no aggressor addresses given")]
    NoAggressors,
    #[error("{mode:?} hammering needs {expected} aggressors, got {got}")]
    AggressorCount { mode: HammerMode, expected: &'static str, got: usize },
    #[error("double-sided aggressors must sit at rows n-1 and n+1 of one bank")]
    NotSandwiching,
}

/// A single bank: (DIMM, rank, bank).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BankId {
    pub dimm: u32,
    pub rank: u32,
    pub bank: u32,
}

/// One row of one bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BankRow {
    pub bank: BankId,
    pub row: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DramCoord {
    pub dimm: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    /// Byte offset inside the row.
    pub column: u64,
}

impl DramCoord {
    pub fn bank_id(&self) -> BankId {
        BankId { dimm: self.dimm, rank: self.rank, bank: self.bank }
    }

    pub fn bank_row(&self) -> BankRow {
        BankRow { bank: self.bank_id(), row: self.row }
    }
}

/// Serialized form of [`DramGeometry`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub dimms: u32,
    pub ranks_per_dimm: u32,
    pub banks_per_rank: u32,
    pub rows_per_bank: u32,
    pub row_size: u64,
    pub mapping: MappingSpec,
}

/// Shape of the memory system plus its validated address mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GeometryConfig", into = "GeometryConfig")]
pub struct DramGeometry {
    config: GeometryConfig,
    mapper: AddressMapper,
}

impl TryFrom<GeometryConfig> for DramGeometry {
    type Error = DramError;

    fn try_from(config: GeometryConfig) -> Result<Self, DramError> {
        DramGeometry::new(config)
    }
}

impl From<DramGeometry> for GeometryConfig {
    fn from(g: DramGeometry) -> Self {
        g.config
    }
}

impl DramGeometry {
    pub fn new(config: GeometryConfig) -> Result<Self, DramError> {
        if !config.row_size.is_multiple_of(PAGE_SIZE) {
            return Err(DramError::RowNotPageMultiple(config.row_size));
        }
        let mapper = AddressMapper::build(
            &config.mapping,
            config.dimms as u64,
            config.ranks_per_dimm as u64,
            config.banks_per_rank as u64,
            config.rows_per_bank as u64,
            config.row_size,
        )?;
        Ok(DramGeometry { config, mapper })
    }

    /// The Dell Latitude E6420 layout: two 4 GiB DDR3 DIMMs, two ranks each,
    /// eight banks per rank, 32K rows of 8 KiB per bank.
    pub fn dell_e6420() -> Self {
        DramGeometry::new(GeometryConfig {
            dimms: 2,
            ranks_per_dimm: 2,
            banks_per_rank: 8,
            rows_per_bank: 32 * 1024,
            row_size: 8 * KIB,
            mapping: MappingSpec::sandy_bridge_dual_dimm(),
        })
        .expect("built-in geometry is valid")
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn dimms(&self) -> u32 {
        self.config.dimms
    }

    pub fn ranks_per_dimm(&self) -> u32 {
        self.config.ranks_per_dimm
    }

    pub fn banks_per_rank(&self) -> u32 {
        self.config.banks_per_rank
    }

    pub fn rows_per_bank(&self) -> u32 {
        self.config.rows_per_bank
    }

    pub fn row_size(&self) -> u64 {
        self.config.row_size
    }

    pub fn mapping(&self) -> &MappingSpec {
        &self.config.mapping
    }

    pub fn capacity(&self) -> u64 {
        self.config.dimms as u64
            * self.config.ranks_per_dimm as u64
            * self.config.banks_per_rank as u64
            * self.config.rows_per_bank as u64
            * self.config.row_size
    }

    pub fn total_pages(&self) -> u64 {
        self.capacity() / PAGE_SIZE
    }

    pub fn banks_per_dimm(&self) -> u32 {
        self.config.banks_per_rank * self.config.ranks_per_dimm
    }

    pub fn bank_count(&self) -> u32 {
        self.config.dimms * self.banks_per_dimm()
    }

    /// Bytes sharing one row index across every bank of every DIMM.
    pub fn rows_size_per_row_index(&self) -> u64 {
        self.config.dimms as u64 * self.banks_per_dimm() as u64 * self.config.row_size
    }

    /// Smallest block guaranteed to cover two complete row indices.
    pub fn target_block_size(&self) -> u64 {
        self.rows_size_per_row_index() * 2
    }

    /// Buddy order (in 4 KiB pages) of [`Self::target_block_size`].
    pub fn target_block_order(&self) -> u32 {
        (self.target_block_size() / PAGE_SIZE).trailing_zeros()
    }

    pub fn map(&self, addr: u64) -> Result<DramCoord, DramError> {
        let capacity = self.capacity();
        if addr >= capacity {
            return Err(DramError::AddressOutOfRange { addr, capacity });
        }
        let m = &self.mapper;
        let word = m.addr_to_word(addr);
        let mut shift = 0;
        let mut take = |bits: u32| {
            let v = (word >> shift) & ((1u64 << bits) - 1);
            shift += bits;
            v
        };
        let column = take(m.column_bits);
        let row = take(m.row_bits) as u32;
        let bank = take(m.bank_bits) as u32;
        let rank = take(m.rank_bits) as u32;
        let dimm = take(m.dimm_bits) as u32;
        Ok(DramCoord { dimm, rank, bank, row, column })
    }

    pub fn unmap(&self, coord: DramCoord) -> Result<u64, DramError> {
        let c = &self.config;
        if coord.dimm >= c.dimms
            || coord.rank >= c.ranks_per_dimm
            || coord.bank >= c.banks_per_rank
            || coord.row >= c.rows_per_bank
            || coord.column >= c.row_size
        {
            return Err(DramError::CoordOutOfRange(coord));
        }
        let m = &self.mapper;
        let mut word = coord.column;
        let mut shift = m.column_bits;
        for (v, bits) in [
            (coord.row as u64, m.row_bits),
            (coord.bank as u64, m.bank_bits),
            (coord.rank as u64, m.rank_bits),
            (coord.dimm as u64, m.dimm_bits),
        ] {
            word |= v << shift;
            shift += bits;
        }
        Ok(m.word_to_addr(word))
    }

    /// Row index of a physical address (the same in every bank).
    pub fn row_of(&self, addr: u64) -> Result<u32, DramError> {
        self.map(addr).map(|c| c.row)
    }

    /// In-bank neighbours of `coord`: rows n-1 and n+1, absent at the edges.
    pub fn row_neighbors(&self, coord: DramCoord) -> (Option<DramCoord>, Option<DramCoord>) {
        let below = coord.row.checked_sub(1).map(|row| DramCoord { row, ..coord });
        let above = (coord.row + 1 < self.config.rows_per_bank).then(|| DramCoord { row: coord.row + 1, ..coord });
        (below, above)
    }

    pub fn bank_row_neighbors(&self, br: BankRow) -> impl Iterator<Item = BankRow> {
        let rows = self.config.rows_per_bank;
        let below = br.row.checked_sub(1);
        let above = (br.row + 1 < rows).then_some(br.row + 1);
        below.into_iter().chain(above).map(move |row| BankRow { bank: br.bank, row })
    }

    /// Every bank row touched by the 4 KiB page `pfn`.
    pub fn bank_rows_of_page(&self, pfn: u64) -> Vec<BankRow> {
        let base = pfn * PAGE_SIZE;
        let mask = self.mapper.sub_page_selector_mask;
        let mut out = Vec::with_capacity(1 << mask.count_ones());
        // Walk every subset of the sub-page selector bits.
        let mut sub = 0u64;
        loop {
            if let Ok(c) = self.map(base | sub) {
                let br = c.bank_row();
                if !out.contains(&br) {
                    out.push(br);
                }
            }
            if sub == mask {
                break;
            }
            sub = (sub.wrapping_sub(mask)) & mask;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::MIB;

    fn tiny() -> DramGeometry {
        DramGeometry::new(GeometryConfig {
            dimms: 1,
            ranks_per_dimm: 1,
            banks_per_rank: 2,
            rows_per_bank: 4,
            row_size: 4 * KIB,
            mapping: MappingSpec {
                dimm_select_bits: vec![],
                rank_select_bits: vec![],
                bank_select_bits: vec![vec![12, 13]],
                row_index_bit_range: (13, 14),
            },
        })
        .unwrap()
    }

    #[test]
    fn dell_dimm_select_on_bit_six() {
        let g = DramGeometry::dell_e6420();
        assert_eq!(g.map(0x0FF_FFFF).unwrap().dimm, 1);
        assert_eq!(g.map(0x100_0000).unwrap().dimm, 0);
    }

    #[test]
    fn address_zero_maps_to_origin() {
        let g = DramGeometry::dell_e6420();
        assert_eq!(g.map(0).unwrap(), DramCoord { dimm: 0, rank: 0, bank: 0, row: 0, column: 0 });
    }

    #[test]
    fn tiny_geometry_is_bijective() {
        let g = tiny();
        assert_eq!(g.capacity(), 32 * KIB);
        let mut seen = vec![false; g.capacity() as usize];
        for addr in 0..g.capacity() {
            let c = g.map(addr).unwrap();
            let idx = ((c.bank as u64 * 4 + c.row as u64) * 4096 + c.column) as usize;
            assert!(!seen[idx], "collision at {addr:#x}");
            seen[idx] = true;
            assert_eq!(g.unmap(c).unwrap(), addr);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn row_sizes_follow_bank_count() {
        let g = DramGeometry::dell_e6420();
        assert_eq!(g.rows_size_per_row_index(), 256 * KIB);
        assert_eq!(g.target_block_size(), 512 * KIB);
        assert_eq!(g.target_block_order(), 7);

        let single = DramGeometry::new(GeometryConfig {
            dimms: 1,
            ranks_per_dimm: 1,
            banks_per_rank: 1,
            rows_per_bank: 16,
            row_size: 8 * KIB,
            mapping: MappingSpec {
                dimm_select_bits: vec![],
                rank_select_bits: vec![],
                bank_select_bits: vec![],
                row_index_bit_range: (13, 16),
            },
        })
        .unwrap();
        assert_eq!(single.rows_size_per_row_index(), 8 * KIB);
        assert_eq!(single.target_block_size(), 16 * KIB);

        let four_banks = DramGeometry::new(GeometryConfig {
            dimms: 2,
            ranks_per_dimm: 1,
            banks_per_rank: 4,
            rows_per_bank: 64,
            row_size: 8 * KIB,
            mapping: MappingSpec {
                dimm_select_bits: vec![vec![6]],
                rank_select_bits: vec![],
                bank_select_bits: vec![vec![14, 16], vec![15, 17]],
                row_index_bit_range: (16, 21),
            },
        })
        .unwrap();
        // 2 DIMMs x (4 banks x 1 rank) x 8 KiB
        assert_eq!(four_banks.rows_size_per_row_index(), 64 * KIB);
        assert_eq!(four_banks.target_block_size(), 128 * KIB);
    }

    #[test]
    fn row_aligned_block_covers_whole_row_index() {
        let g = DramGeometry::dell_e6420();
        let base = 0x40000 * 37;
        let size = g.rows_size_per_row_index();
        let mut rows = std::collections::BTreeSet::new();
        let mut bank_rows = std::collections::BTreeSet::new();
        for pfn in base / PAGE_SIZE..(base + size) / PAGE_SIZE {
            for br in g.bank_rows_of_page(pfn) {
                rows.insert(br.row);
                bank_rows.insert(br);
            }
        }
        assert_eq!(rows.len(), 1);
        assert_eq!(bank_rows.len() as u32, g.bank_count());
        // Every byte of every bank row is covered: 32 banks x 8 KiB = 256 KiB.
        assert_eq!(bank_rows.len() as u64 * g.row_size(), size);
    }

    #[test]
    fn neighbours_at_edges() {
        let g = DramGeometry::dell_e6420();
        let c = DramCoord { dimm: 1, rank: 0, bank: 3, row: 0, column: 8 };
        assert_eq!(g.row_neighbors(c), (None, Some(DramCoord { row: 1, ..c })));
        let mid = DramCoord { row: 500, ..c };
        assert_eq!(g.row_neighbors(mid), (Some(DramCoord { row: 499, ..c }), Some(DramCoord { row: 501, ..c })));
        let last = DramCoord { row: g.rows_per_bank() - 1, ..c };
        assert_eq!(g.row_neighbors(last), (Some(DramCoord { row: g.rows_per_bank() - 2, ..c }), None));
    }

    #[test]
    fn out_of_range_address_rejected() {
        let g = DramGeometry::dell_e6420();
        assert_eq!(g.capacity(), 8192 * MIB);
        assert!(matches!(g.map(g.capacity()), Err(DramError::AddressOutOfRange { .. })));
    }

    #[test]
    fn dell_page_spans_both_dimms() {
        let g = DramGeometry::dell_e6420();
        let rows = g.bank_rows_of_page(12345);
        assert_eq!(rows.len(), 2);
        assert_ne!(rows[0].bank.dimm, rows[1].bank.dimm);
    }

    #[test]
    fn geometry_round_trips_through_toml() {
        let g = DramGeometry::dell_e6420();
        let text = toml::to_string(&g).unwrap();
        let back: DramGeometry = toml::from_str(&text).unwrap();
        assert_eq!(back, g);
    }
}
