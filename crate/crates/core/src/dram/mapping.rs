//! Linear (GF(2)) physical-address to DRAM-coordinate mapping.
//!
//! Every selector bit (DIMM, rank, bank) is the XOR of a set of physical
//! address bits, the row index is a contiguous bit range, and the column is
//! made of the lowest address bits that complete the selector and row
//! functions to a basis. The whole map is therefore a linear map over GF(2)
//! and is a bijection exactly when those functions are independent.

use serde::{Deserialize, Serialize};

use super::DramError;

/// Bit-level description of the address mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingSpec {
    /// One XOR function per DIMM-select bit (log2(dimms) entries).
    pub dimm_select_bits: Vec<Vec<u32>>,
    /// One XOR function per rank-select bit.
    pub rank_select_bits: Vec<Vec<u32>>,
    /// One XOR function per bank-select bit.
    pub bank_select_bits: Vec<Vec<u32>>,
    /// Inclusive range of physical-address bits forming the row index.
    pub row_index_bit_range: (u32, u32),
}

impl MappingSpec {
    /// Sandy Bridge style dual-DIMM map: DIMM on bit 6, rank on 17^21, banks
    /// on 14^18, 15^19, 16^20, rows on bits 18..=32.
    pub fn sandy_bridge_dual_dimm() -> Self {
        MappingSpec {
            dimm_select_bits: vec![vec![6]],
            rank_select_bits: vec![vec![17, 21]],
            bank_select_bits: vec![vec![14, 18], vec![15, 19], vec![16, 20]],
            row_index_bit_range: (18, 32),
        }
    }

    fn selector_functions(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.dimm_select_bits
            .iter()
            .chain(self.rank_select_bits.iter())
            .chain(self.bank_select_bits.iter())
    }
}

/// Precomputed forward and inverse matrices for a validated [`MappingSpec`].
///
/// The "coordinate word" packs the outputs as
/// `column | row << c | bank << (c + r) | rank << .. | dimm << ..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AddressMapper {
    pub addr_bits: u32,
    pub column_bits: u32,
    pub row_bits: u32,
    pub bank_bits: u32,
    pub rank_bits: u32,
    pub dimm_bits: u32,
    /// forward[i] = address-bit mask whose parity yields coordinate-word bit i.
    forward: Vec<u64>,
    /// inverse[j] = coordinate-word mask whose parity yields address bit j.
    inverse: Vec<u64>,
    /// Address bits below the page boundary that influence anything but the column.
    pub sub_page_selector_mask: u64,
}

fn log2_exact(v: u64, what: &'static str) -> Result<u32, DramError> {
    if v == 0 || !v.is_power_of_two() {
        return Err(DramError::NotPowerOfTwo { what, value: v });
    }
    Ok(v.trailing_zeros())
}

fn mask_of(bits: &[u32]) -> u64 {
    bits.iter().fold(0u64, |m, &b| m ^ (1u64 << b))
}

fn parity(v: u64) -> u64 {
    (v.count_ones() & 1) as u64
}

impl AddressMapper {
    pub fn build(
        spec: &MappingSpec,
        dimms: u64,
        ranks: u64,
        banks: u64,
        rows: u64,
        row_size: u64,
    ) -> Result<Self, DramError> {
        let dimm_bits = log2_exact(dimms, "dimms")?;
        let rank_bits = log2_exact(ranks, "ranks_per_dimm")?;
        let bank_bits = log2_exact(banks, "banks_per_rank")?;
        let row_bits = log2_exact(rows, "rows_per_bank")?;
        let column_bits = log2_exact(row_size, "row_size")?;
        let addr_bits = dimm_bits + rank_bits + bank_bits + row_bits + column_bits;
        if addr_bits > 63 {
            return Err(DramError::InvalidMapping("capacity exceeds 2^63 bytes".into()));
        }

        let check_count = |fns: &Vec<Vec<u32>>, want: u32, what: &str| {
            if fns.len() as u32 != want {
                Err(DramError::InvalidMapping(format!(
                    "{what}: {} select functions given, {want} required",
                    fns.len()
                )))
            } else {
                Ok(())
            }
        };
        check_count(&spec.dimm_select_bits, dimm_bits, "dimm")?;
        check_count(&spec.rank_select_bits, rank_bits, "rank")?;
        check_count(&spec.bank_select_bits, bank_bits, "bank")?;

        let (row_lo, row_hi) = spec.row_index_bit_range;
        if row_hi < row_lo || row_hi - row_lo + 1 != row_bits || row_hi >= addr_bits {
            return Err(DramError::InvalidMapping(format!(
                "row bit range {row_lo}..={row_hi} does not cover {row_bits} bits below bit {addr_bits}"
            )));
        }

        // Column bits: the lowest address bits that, added to the selector and
        // row functions, keep the rows of the matrix independent.
        let mut basis = Gf2Basis::new(addr_bits as usize);
        for k in 0..row_bits {
            basis.insert(1u64 << (row_lo + k));
        }
        for f in spec.selector_functions() {
            if f.is_empty() {
                return Err(DramError::InvalidMapping("empty select function".into()));
            }
            if let Some(&b) = f.iter().find(|&&b| b >= addr_bits) {
                return Err(DramError::InvalidMapping(format!(
                    "select bit {b} outside {addr_bits}-bit address"
                )));
            }
            if !basis.insert(mask_of(f)) {
                return Err(DramError::NotBijective);
            }
        }
        let column_positions: Vec<u32> = (0..addr_bits).filter(|&b| basis.insert(1u64 << b)).collect();
        debug_assert_eq!(column_positions.len() as u32, column_bits);

        let mut forward = Vec::with_capacity(addr_bits as usize);
        forward.extend(column_positions.iter().map(|&p| 1u64 << p));
        forward.extend((0..row_bits).map(|k| 1u64 << (row_lo + k)));
        forward.extend(spec.bank_select_bits.iter().map(|f| mask_of(f)));
        forward.extend(spec.rank_select_bits.iter().map(|f| mask_of(f)));
        forward.extend(spec.dimm_select_bits.iter().map(|f| mask_of(f)));

        let inverse = invert_gf2(&forward, addr_bits as usize).ok_or(DramError::NotBijective)?;

        let page_mask = (1u64 << 12) - 1;
        let sub_page_selector_mask = forward[column_bits as usize..]
            .iter()
            .fold(0u64, |m, &r| m | (r & page_mask));

        Ok(AddressMapper {
            addr_bits,
            column_bits,
            row_bits,
            bank_bits,
            rank_bits,
            dimm_bits,
            forward,
            inverse,
            sub_page_selector_mask,
        })
    }

    pub fn addr_to_word(&self, addr: u64) -> u64 {
        self.forward
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &m)| w | (parity(addr & m) << i))
    }

    pub fn word_to_addr(&self, word: u64) -> u64 {
        self.inverse
            .iter()
            .enumerate()
            .fold(0u64, |a, (j, &m)| a | (parity(word & m) << j))
    }
}

/// Incrementally built GF(2) row space, reduced by leading bit.
struct Gf2Basis {
    by_lead: Vec<u64>,
}

impl Gf2Basis {
    fn new(n: usize) -> Self {
        Gf2Basis { by_lead: vec![0; n] }
    }

    /// Add `v` if it is independent of the rows so far.
    fn insert(&mut self, mut v: u64) -> bool {
        while v != 0 {
            let lead = 63 - v.leading_zeros() as usize;
            if self.by_lead[lead] == 0 {
                self.by_lead[lead] = v;
                return true;
            }
            v ^= self.by_lead[lead];
        }
        false
    }
}

/// Gauss-Jordan inversion of an n×n GF(2) matrix given as row bitsets.
fn invert_gf2(rows: &[u64], n: usize) -> Option<Vec<u64>> {
    let mut a = rows.to_vec();
    let mut inv: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
    for col in 0..n {
        let bit = 1u64 << col;
        let pivot = (col..n).find(|&r| a[r] & bit != 0)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        for r in 0..n {
            if r != col && a[r] & bit != 0 {
                a[r] ^= a[col];
                inv[r] ^= inv[col];
            }
        }
    }
    // a is now the identity and inv = M^-1 with row index = address bit and
    // bit index = coordinate-word bit.
    Some(inv)
}
