//! Programmable memory address generators: address/data streams, boundary
//! gating, LUT nonlinearity and the data-preparation moves.

mod prep;
mod stream;

pub use prep::{prep_exec, PrepKind};
pub(crate) use prep::resolve;
pub use stream::{zip, ZipPoint, 
    addr_stream, collect_stream, counters, eval, trace_dump, AddrStream, AddressEvent, Point, END_MARK_16,
    END_MARK_32,
};

use crate::compiler::TensorId;
use crate::fxnum::{LutFn, PhaseArith};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PmagError {
    #[error("address {addr} outside tensor {tensor} extent {extent}")]
    OutOfRange { addr: i64, extent: u64, tensor: TensorId },
    #[error("overlapping sources disagree at tensor {tensor} element {idx}: {a} vs {b}")]
    Overlap { tensor: TensorId, idx: usize, a: f64, b: f64 },
    #[error("programs of one segment do not share a counter nest")]
    Nest,
}

/// Pass streamed data through the PMAG's LUT; addresses are untouched.
pub fn apply_lut<'a, I>(stream: I, ar: &'a PhaseArith, f: Option<LutFn>) -> impl Iterator<Item = f64> + 'a
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: 'a,
{
    stream.into_iter().map(move |v| match f {
        Some(f) => ar.act(f, v),
        None => v,
    })
}

#[cfg(test)]
mod tests;
