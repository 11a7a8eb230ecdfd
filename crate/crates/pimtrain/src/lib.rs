pub mod cli;
pub mod compiler;
pub mod fxnum;
pub mod goldref;
pub mod machine;
pub mod metrics;
pub mod netspec;
pub mod partition;
pub mod pmag;
pub mod seed;
pub mod verify;
