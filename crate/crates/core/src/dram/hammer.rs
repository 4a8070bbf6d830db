//! Row-buffer state, per-cell vulnerability and the hammer primitive.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{BankId, BankRow, DramCoord, DramError, DramGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HammerMode {
    DoubleSided,
    SingleSided,
    OneLocation,
}

/// Which way a weak cell leaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    OneToZero,
    ZeroToOne,
}

impl FlipDirection {
    /// Bit value the cell must hold for the flip to change anything.
    pub fn from_value(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionPolicy {
    OneToZero,
    ZeroToOne,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VulnerableCell {
    /// Byte offset inside the bank row.
    pub column: u64,
    pub bit: u8,
    /// Flip probability under one standard dose.
    pub probability: f64,
    pub direction: FlipDirection,
}

/// Parameters of the weak-row vulnerability generator.
///
/// A bank row is weak with probability `weak_row_fraction`; a weak row holds
/// Poisson(`cells_per_weak_row`) weak cells at uniformly random positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityParams {
    pub weak_row_fraction: f64,
    pub cells_per_weak_row: f64,
    pub cell_probability: f64,
    pub direction: DirectionPolicy,
}

impl Default for VulnerabilityParams {
    fn default() -> Self {
        VulnerabilityParams {
            weak_row_fraction: 0.001,
            cells_per_weak_row: 4.0,
            cell_probability: 0.5,
            direction: DirectionPolicy::Both,
        }
    }
}

/// Sparse set of flip-prone cells, keyed by bank row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VulnerabilityMap {
    cells: BTreeMap<BankRow, Vec<VulnerableCell>>,
}

impl VulnerabilityMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, row: BankRow, cell: VulnerableCell) {
        assert!((0.0..=1.0).contains(&cell.probability), "probability out of [0,1]");
        self.cells.entry(row).or_default().push(cell);
    }

    pub fn cells_in(&self, row: &BankRow) -> &[VulnerableCell] {
        self.cells.get(row).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BankRow, &VulnerableCell)> {
        self.cells.iter().flat_map(|(r, cs)| cs.iter().map(move |c| (r, c)))
    }

    pub fn generate<R: Rng + ?Sized>(geom: &DramGeometry, params: &VulnerabilityParams, rng: &mut R) -> Self {
        let mut map = VulnerabilityMap::new();
        if params.weak_row_fraction <= 0.0 || params.cells_per_weak_row <= 0.0 {
            return map;
        }
        let poisson = Poisson::new(params.cells_per_weak_row).expect("positive mean");
        for dimm in 0..geom.dimms() {
            for rank in 0..geom.ranks_per_dimm() {
                for bank in 0..geom.banks_per_rank() {
                    let id = BankId { dimm, rank, bank };
                    for row in 0..geom.rows_per_bank() {
                        if rng.random::<f64>() >= params.weak_row_fraction {
                            continue;
                        }
                        let n = poisson.sample(rng) as u64;
                        for _ in 0..n {
                            let direction = match params.direction {
                                DirectionPolicy::OneToZero => FlipDirection::OneToZero,
                                DirectionPolicy::ZeroToOne => FlipDirection::ZeroToOne,
                                DirectionPolicy::Both => {
                                    if rng.random::<bool>() {
                                        FlipDirection::OneToZero
                                    } else {
                                        FlipDirection::ZeroToOne
                                    }
                                }
                            };
                            map.insert(
                                BankRow { bank: id, row },
                                VulnerableCell {
                                    column: rng.random_range(0..geom.row_size()),
                                    bit: rng.random_range(0..8),
                                    probability: params.cell_probability,
                                    direction,
                                },
                            );
                        }
                    }
                }
            }
        }
        map
    }
}

/// Hammer dose and per-mode effectiveness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HammerConfig {
    /// Activations of one neighbouring aggressor that make up one standard dose.
    pub dose: u64,
    pub double_sided_multiplier: f64,
    pub single_sided_multiplier: f64,
    pub one_location_multiplier: f64,
}

impl Default for HammerConfig {
    fn default() -> Self {
        HammerConfig {
            dose: 1_000_000,
            double_sided_multiplier: 1.0,
            single_sided_multiplier: 0.5,
            one_location_multiplier: 0.25,
        }
    }
}

impl HammerConfig {
    pub fn multiplier(&self, mode: HammerMode) -> f64 {
        match mode {
            HammerMode::DoubleSided => self.double_sided_multiplier,
            HammerMode::SingleSided => self.single_sided_multiplier,
            HammerMode::OneLocation => self.one_location_multiplier,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankState {
    pub open_row: Option<u32>,
    pub activations: HashMap<u32, u64>,
}

impl BankState {
    /// Access `row`; returns true on a row-buffer hit.
    pub fn access(&mut self, row: u32) -> bool {
        if self.open_row == Some(row) {
            return true;
        }
        self.open_row = Some(row);
        *self.activations.entry(row).or_default() += 1;
        false
    }

    fn activate_many(&mut self, row: u32, n: u64) {
        *self.activations.entry(row).or_default() += n;
        self.open_row = Some(row);
    }

    fn close(&mut self) {
        self.open_row = None;
    }
}

/// A weak cell that fired during a hammer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectedFlip {
    pub phys_addr: u64,
    pub bit: u8,
    pub direction: FlipDirection,
    pub victim: BankRow,
}

/// DRAM device state: geometry, weak cells and per-bank row buffers.
#[derive(Debug, Clone)]
pub struct Dram {
    geom: DramGeometry,
    vuln: VulnerabilityMap,
    config: HammerConfig,
    banks: BTreeMap<BankId, BankState>,
}

impl Dram {
    pub fn new(geom: DramGeometry, vuln: VulnerabilityMap, config: HammerConfig) -> Self {
        Dram { geom, vuln, config, banks: BTreeMap::new() }
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geom
    }

    pub fn vulnerability(&self) -> &VulnerabilityMap {
        &self.vuln
    }

    pub fn config(&self) -> &HammerConfig {
        &self.config
    }

    pub fn bank(&self, id: &BankId) -> Option<&BankState> {
        self.banks.get(id)
    }

    pub fn activations(&self, row: &BankRow) -> u64 {
        self.banks
            .get(&row.bank)
            .and_then(|b| b.activations.get(&row.row))
            .copied()
            .unwrap_or(0)
    }

    pub fn total_activations(&self) -> u64 {
        self.banks.values().flat_map(|b| b.activations.values()).sum()
    }

    /// Single read of `addr` through the row buffer; true on a hit.
    pub fn access(&mut self, addr: u64) -> Result<bool, DramError> {
        let c = self.geom.map(addr)?;
        Ok(self.banks.entry(c.bank_id()).or_default().access(c.row))
    }

    /// Hammer `aggressors` for `reps` rounds and return the weak cells that
    /// fired. Whether a fired cell changes stored data depends on its
    /// direction and is left to the memory holding the bits.
    pub fn hammer<R: Rng + ?Sized>(
        &mut self,
        aggressors: &[u64],
        reps: u64,
        mode: HammerMode,
        rng: &mut R,
    ) -> Result<Vec<InjectedFlip>, DramError> {
        if aggressors.is_empty() {
            return Err(DramError::NoAggressors);
        }
        let coords = aggressors
            .iter()
            .map(|&a| self.geom.map(a))
            .collect::<Result<Vec<DramCoord>, _>>()?;

        match mode {
            HammerMode::OneLocation if coords.len() != 1 => {
                return Err(DramError::AggressorCount { mode, expected: "exactly 1", got: coords.len() })
            }
            HammerMode::DoubleSided if coords.len() != 2 => {
                return Err(DramError::AggressorCount { mode, expected: "exactly 2", got: coords.len() })
            }
            HammerMode::SingleSided if coords.len() < 2 => {
                return Err(DramError::AggressorCount { mode, expected: "at least 2", got: coords.len() })
            }
            _ => {}
        }
        if mode == HammerMode::DoubleSided {
            let (a, b) = (coords[0], coords[1]);
            if a.bank_id() != b.bank_id() || a.row.abs_diff(b.row) != 2 {
                return Err(DramError::NotSandwiching);
            }
        }

        // Rows per bank that the access pattern actually re-opens.
        let mut by_bank: BTreeMap<BankId, Vec<u32>> = BTreeMap::new();
        for c in &coords {
            let rows = by_bank.entry(c.bank_id()).or_default();
            if !rows.contains(&c.row) {
                rows.push(c.row);
            }
        }
        let mut hammered: Vec<BankRow> = Vec::new();
        for (bank, rows) in &by_bank {
            let state = self.banks.entry(*bank).or_default();
            let conflicting = rows.len() >= 2;
            match mode {
                HammerMode::OneLocation => {
                    // The controller closes the row after each access.
                    state.activate_many(rows[0], reps);
                    state.close();
                    hammered.push(BankRow { bank: *bank, row: rows[0] });
                }
                _ if conflicting => {
                    for &r in rows {
                        state.activate_many(r, reps);
                        hammered.push(BankRow { bank: *bank, row: r });
                    }
                }
                _ => {
                    // No row conflict: the row stays in the buffer.
                    state.access(rows[0]);
                }
            }
        }

        let mult = self.config.multiplier(mode);
        let mut exposure: BTreeMap<BankRow, f64> = BTreeMap::new();
        for agg in &hammered {
            for victim in self.geom.bank_row_neighbors(*agg) {
                if hammered.contains(&victim) {
                    continue;
                }
                *exposure.entry(victim).or_default() += mult * reps as f64 / self.config.dose as f64;
            }
        }

        let mut flips = Vec::new();
        for (victim, dose) in exposure {
            for cell in self.vuln.cells_in(&victim) {
                let p = 1.0 - (1.0 - cell.probability).powf(dose);
                if rng.random::<f64>() < p {
                    let phys_addr = self.geom.unmap(DramCoord {
                        dimm: victim.bank.dimm,
                        rank: victim.bank.rank,
                        bank: victim.bank.bank,
                        row: victim.row,
                        column: cell.column,
                    })?;
                    flips.push(InjectedFlip { phys_addr, bit: cell.bit, direction: cell.direction, victim });
                }
            }
        }
        Ok(flips)
    }
}
