use serde::{Deserialize, Serialize};

/// Average power per component instance, in watts, plus DRAM energy per bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub pe: f64,
    pub pmag: f64,
    pub vault_ctrl: f64,
    pub bus: f64,
    pub ibuffer: f64,
    /// Whole logic die; the per-instance rows above are its parts.
    pub logic_die: f64,
    pub dram_pj_per_bit: f64,
}

impl Default for PowerTable {
    fn default() -> Self {
        Self {
            pe: 0.155,
            pmag: 3.16e-3,
            vault_ctrl: 4.27e-3,
            bus: 3.70e-2,
            ibuffer: 1.02e-2,
            logic_die: 2.65,
            dram_pj_per_bit: 3.7,
        }
    }
}

impl PowerTable {
    /// Sum of the listed parts for a machine with `pes` PEs and `vaults` vaults.
    pub fn parts(&self, pes: usize, vaults: usize) -> f64 {
        self.pe * pes as f64 + (self.pmag + self.vault_ctrl) * vaults as f64 + self.bus + self.ibuffer
    }

    pub fn validate(&self, pes: usize, vaults: usize) -> Result<(), String> {
        let all = [self.pe, self.pmag, self.vault_ctrl, self.bus, self.ibuffer, self.logic_die, self.dram_pj_per_bit];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("power table entries must be nonnegative".into());
        }
        let parts = self.parts(pes, vaults);
        if self.logic_die + 1e-9 < parts {
            return Err(format!("logic die total {} W is below the sum of its parts {parts:.4} W", self.logic_die));
        }
        Ok(())
    }
}
