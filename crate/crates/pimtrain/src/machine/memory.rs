use crate::compiler::{LayoutPlan, TensorId};

/// Contents of every vault, one f64 per element slot.
#[derive(Clone, Debug, PartialEq)]
pub struct VaultMemory {
    pub vaults: Vec<Vec<f64>>,
}

impl VaultMemory {
    pub fn new(lay: &LayoutPlan) -> Self {
        Self { vaults: lay.vault_elems.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn read(&self, lay: &LayoutPlan, t: TensorId, idx: usize, pe: Option<usize>) -> f64 {
        let (v, a) = lay.locate(t, idx, pe);
        self.vaults[v][a]
    }

    /// Write every copy of the element.
    pub fn write(&mut self, lay: &LayoutPlan, t: TensorId, idx: usize, x: f64) {
        for (v, a) in lay.copies(t, idx) {
            self.vaults[v][a] = x;
        }
    }

    /// Host load of a whole logical tensor.
    pub fn load(&mut self, lay: &LayoutPlan, t: TensorId, data: &[f64]) {
        assert_eq!(data.len(), lay.tensors[t].len, "{} length", lay.tensors[t].name);
        for (i, &x) in data.iter().enumerate() {
            self.write(lay, t, i, x);
        }
    }

    /// Host read-back of a whole logical tensor.
    pub fn fetch(&self, lay: &LayoutPlan, t: TensorId) -> Vec<f64> {
        (0..lay.tensors[t].len).map(|i| self.read(lay, t, i, None)).collect()
    }
}
