use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ambush::{DeviceRequest, DrainOptions};
use crate::buddy::DEFAULT_MAX_ORDER;
use crate::dram::{DirectionPolicy, DramGeometry, GeometryConfig, HammerConfig, VulnerabilityParams};
use crate::exploit::HammerLoopConfig;
use crate::os::{Driver, OsConfig};
use crate::timing::ChannelModel;
use crate::{KIB, MIB};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Row indices given to the kernel, counted from physical address 0.
    pub kernel_rows: u32,
    pub separation_rows: u32,
    pub max_order: u32,
}

/// Seeded background allocations present before the attack starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub kernel_fill: u64,
    /// Free bytes left in kernel blocks below the target order.
    pub kernel_small_residue: u64,
    pub user_fill: u64,
    pub user_small_residue: u64,
    /// Small kernel blocks a background task frees while the drain runs.
    pub fresh_small: u64,
    /// Fraction of background bytes held in blocks below the target order.
    pub small_block_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub driver: Driver,
    pub threshold: u64,
    pub sg_opens: u32,
    pub sg_reserved_size: u64,
    pub drain: DrainOptions,
    pub uid: u32,
    /// Other processes running under the same uid.
    pub decoy_processes: u32,
    /// Memory the page-table spray baseline leaves free.
    pub spray_reserve: u64,
}

/// Everything one simulated machine needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub name: String,
    pub geometry: GeometryConfig,
    pub partition: PartitionConfig,
    pub workload: WorkloadConfig,
    pub channel: ChannelModel,
    pub vulnerability: VulnerabilityParams,
    pub hammer: HammerConfig,
    pub exploit: HammerLoopConfig,
    pub os: OsConfig,
    pub attack: AttackConfig,
}

impl MachineProfile {
    pub fn dell_e6420() -> Self {
        MachineProfile {
            name: "dell-e6420".into(),
            geometry: DramGeometry::dell_e6420().config().clone(),
            partition: PartitionConfig { kernel_rows: 2048, separation_rows: 1, max_order: DEFAULT_MAX_ORDER },
            workload: WorkloadConfig {
                kernel_fill: 160 * MIB,
                kernel_small_residue: 56 * MIB,
                user_fill: 120 * MIB,
                user_small_residue: 4 * MIB,
                fresh_small: 0,
                small_block_share: 0.9,
            },
            channel: ChannelModel::dell_e6420(),
            vulnerability: VulnerabilityParams {
                weak_row_fraction: 0.001,
                cells_per_weak_row: 120.0,
                cell_probability: 0.5,
                direction: DirectionPolicy::Both,
            },
            hammer: HammerConfig::default(),
            exploit: HammerLoopConfig::default(),
            os: OsConfig::default(),
            attack: AttackConfig {
                driver: Driver::Video,
                threshold: 88 * MIB,
                sg_opens: 256,
                sg_reserved_size: 124 * KIB,
                drain: DrainOptions::default(),
                uid: 1000,
                decoy_processes: 1,
                spray_reserve: 32 * MIB,
            },
        }
    }

    /// Dell geometry with the Lenovo channel rates and heavier workload.
    pub fn lenovo_t420() -> Self {
        let mut p = Self::dell_e6420();
        p.name = "lenovo-t420".into();
        p.channel = ChannelModel::lenovo_t420();
        p.workload.kernel_fill = 220 * MIB;
        p.workload.kernel_small_residue = 115 * MIB;
        p.attack.threshold = 147 * MIB;
        p
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "dell" | "dell-e6420" => Some(Self::dell_e6420()),
            "lenovo" | "lenovo-t420" => Some(Self::lenovo_t420()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let p: MachineProfile = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    /// Built-in name or path to a TOML file.
    pub fn load(spec: &str) -> Result<Self, HarnessError> {
        if let Some(p) = Self::builtin(spec) {
            return Ok(p);
        }
        let text = std::fs::read_to_string(Path::new(spec))?;
        Self::from_toml(&text)
    }

    pub fn geometry(&self) -> Result<DramGeometry, HarnessError> {
        DramGeometry::new(self.geometry.clone()).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn device_request(&self) -> DeviceRequest {
        match self.attack.driver {
            Driver::Video => DeviceRequest::video(&self.os.drivers),
            Driver::Sg => DeviceRequest::sg(self.attack.sg_opens, self.attack.sg_reserved_size),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let geom = self.geometry()?;
        self.channel.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let kernel_bytes = self.partition.kernel_rows as u64 * geom.rows_size_per_row_index();
        if self.partition.kernel_rows + self.partition.separation_rows >= geom.rows_per_bank() {
            return bad("kernel partition leaves no user rows".into());
        }
        if self.workload.kernel_small_residue >= kernel_bytes {
            return bad(format!(
                "kernel small residue {} must be below the kernel partition size {kernel_bytes}",
                self.workload.kernel_small_residue
            ));
        }
        if self.workload.kernel_fill + self.workload.kernel_small_residue >= kernel_bytes {
            return bad("kernel workload does not fit the kernel partition".into());
        }
        let v = &self.vulnerability;
        if !(0.0..=1.0).contains(&v.weak_row_fraction) || !(0.0..=1.0).contains(&v.cell_probability) {
            return bad("vulnerability probabilities must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.workload.small_block_share) {
            return bad("small_block_share must lie in [0, 1]".into());
        }
        if self.attack.sg_opens > self.os.drivers.open_file_limit {
            return bad(format!("sg opens {} above open-file limit", self.attack.sg_opens));
        }
        if self.attack.sg_reserved_size > self.os.drivers.sg_max_size {
            return bad("sg reserved size above driver maximum".into());
        }
        if self.hammer.dose == 0 {
            return bad("hammer dose must be positive".into());
        }
        Ok(())
    }
}
