//! Cycle-level model of the vaults, PEs and bus executing compiled steps.

mod config;
mod exec;
mod memory;
mod tiles;
mod timing;

pub use config::MachineConfig;
pub use exec::{execute, Arith};
pub use memory::VaultMemory;
pub use tiles::{plan as tile_plan, BusItem, Feed, Sink, Tile, TilePlan};
pub use timing::{simulate, Deadlock, Stalls, Timing};
mod run;
pub use run::{run_training, trace_csv, Machine, MachineError, StepTrace, TrainingRun};
#[cfg(test)]
mod tests;
