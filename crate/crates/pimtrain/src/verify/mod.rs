//! Cross-checks shared by the test suites and the `verify` command.

mod checks;
mod oracle;

pub use checks::{gradient_check, machine_vs_reference, Mismatch};
pub use oracle::{address_oracle, from_programs, oracle_configs, oracle_covers, oracle_nets, reference, OracleResult, Streams};
