use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::PowerTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub name: String,
    pub vaults: usize,
    pub pes: usize,
    /// MAC lanes per PE.
    pub lanes: usize,
    pub clock_hz: f64,
    /// Per-vault channel bandwidth.
    pub vault_bytes_per_sec: f64,
    pub vault_latency: u64,
    pub bus_bytes_per_sec: f64,
    pub bus_pipeline: u64,
    /// Size of each of the two input buffers (each split in halves).
    pub input_buffer_bytes: usize,
    pub output_buffer_bytes: usize,
    pub vault_capacity_bytes: u64,
    pub ibuffer_bytes: usize,
    pub deadlock_budget: u64,
    pub power: PowerTable,
}

impl MachineConfig {
    pub fn hmc1() -> Self {
        Self {
            name: "hmc1".into(),
            vaults: 16,
            pes: 15,
            lanes: 32,
            clock_hz: 2.5e9,
            vault_bytes_per_sec: 10e9,
            vault_latency: 16,
            bus_bytes_per_sec: 10e9,
            bus_pipeline: 4,
            input_buffer_bytes: 16 * 1024,
            output_buffer_bytes: 8 * 1024,
            vault_capacity_bytes: 256 << 20,
            ibuffer_bytes: 16384,
            deadlock_budget: 10_000_000,
            power: PowerTable::default(),
        }
    }

    pub fn hmc2() -> Self {
        let base = Self::hmc1();
        Self {
            name: "hmc2".into(),
            vaults: 32,
            pes: 31,
            power: PowerTable { logic_die: base.power.logic_die * 31.0 / 15.0, ..base.power.clone() },
            ..base
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "hmc1" => Some(Self::hmc1()),
            "hmc2" => Some(Self::hmc2()),
            _ => None,
        }
    }

    /// A preset name or a path to a JSON config file.
    pub fn load(spec: &str) -> Result<Self, String> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let p = Path::new(spec);
        let text = std::fs::read_to_string(p).map_err(|e| format!("machine '{spec}': {e}"))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| format!("machine '{spec}': {e}"))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vaults < 2 || self.pes + 1 != self.vaults {
            return Err(format!("need pes = vaults - 1, got {} PEs and {} vaults", self.pes, self.vaults));
        }
        if self.lanes == 0 || self.clock_hz <= 0.0 {
            return Err("lanes and clock must be positive".into());
        }
        if (self.bus_bytes_per_sec - self.vault_bytes_per_sec).abs() > 1e-6 * self.vault_bytes_per_sec {
            return Err("bus bandwidth must equal single-vault bandwidth".into());
        }
        if self.input_buffer_bytes < 64 || self.output_buffer_bytes < 64 {
            return Err("buffers too small".into());
        }
        self.power.validate(self.pes, self.vaults)
    }

    /// The vault without a PE, holding common data.
    pub fn common_vault(&self) -> usize {
        self.vaults - 1
    }

    /// Bytes one vault channel moves per cycle.
    pub fn channel_bytes_per_cycle(&self) -> f64 {
        self.vault_bytes_per_sec / self.clock_hz
    }

    pub fn bus_bytes_per_cycle(&self) -> f64 {
        self.bus_bytes_per_sec / self.clock_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let a = MachineConfig::hmc1();
        a.validate().unwrap();
        assert_eq!(a.channel_bytes_per_cycle(), 4.0);
        assert_eq!(a.common_vault(), 15);
        let b = MachineConfig::hmc2();
        b.validate().unwrap();
        assert_eq!((b.vaults, b.pes), (32, 31));
    }

    #[test]
    fn pe_count_must_match_vaults() {
        let c = MachineConfig { pes: 16, ..MachineConfig::hmc1() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let a = MachineConfig::hmc2();
        let s = serde_json::to_string(&a).unwrap();
        let b: MachineConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
    }
}
