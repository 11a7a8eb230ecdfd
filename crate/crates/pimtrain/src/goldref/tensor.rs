//! Tensors and the flat little-endian snapshot format.
//!
//! File: `PIMTSNAP`, u32 tensor count, then per tensor: u8 layout, u8 mode,
//! u8 rank, rank x u32 extents, payload. Float payloads are f64; fixed
//! payloads are raw two's-complement integers of the format width.

use thiserror::Error;

use crate::fxnum::NumericMode;

const MAGIC: &[u8; 8] = b"PIMTSNAP";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// (depth, row, col, sample), sample innermost.
    Volume,
    /// Row-major (rows, cols); per-sample vectors are (element, sample).
    Matrix,
    /// (kernel, depth, row, col).
    Kernel,
}

impl Layout {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Layout::Volume, Layout::Matrix, Layout::Kernel].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub layout: Layout,
    pub mode: NumericMode,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, layout: Layout, mode: NumericMode, data: Vec<f64>) -> Self {
        assert!(dims.len() <= 4, "at most 4 extents");
        assert_eq!(dims.iter().product::<usize>(), data.len(), "payload length");
        Self { dims, layout, mode, data }
    }

    /// Reinterpret under another layout with the same element order.
    pub fn relayout(&self, layout: Layout, dims: Vec<usize>) -> Self {
        Self::new(dims, layout, self.mode, self.data.clone())
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file")]
    Magic,
    #[error("snapshot truncated")]
    Truncated,
    #[error("bad field in snapshot: {0}")]
    Field(String),
}

const MODES: [NumericMode; 5] = [
    NumericMode::Float,
    NumericMode::Fixed16,
    NumericMode::Fixed32,
    NumericMode::Fixed32Sr,
    NumericMode::Fixed32SrLo,
];

pub fn write_snapshot(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(t.layout.code());
        out.push(MODES.iter().position(|&m| m == t.mode).unwrap() as u8);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend((d as u32).to_le_bytes());
        }
        match t.mode.format() {
            None => t.data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            Some(f) => {
                for &v in &t.data {
                    let raw = f.raw(v);
                    if f.bits() == 16 {
                        out.extend((raw as i16).to_le_bytes());
                    } else {
                        out.extend((raw as i32).to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(SnapshotError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_snapshot(buf: &[u8]) -> Result<Vec<Tensor>, SnapshotError> {
    if buf.len() < 8 || &buf[..8] != MAGIC {
        return Err(SnapshotError::Magic);
    }
    let mut r = Reader { buf, pos: 8 };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let layout = r.u8()?;
        let layout = Layout::from_code(layout).ok_or_else(|| SnapshotError::Field(format!("layout {layout}")))?;
        let mode = r.u8()?;
        let mode = *MODES.get(mode as usize).ok_or_else(|| SnapshotError::Field(format!("mode {mode}")))?;
        let rank = r.u8()? as usize;
        if rank > 4 {
            return Err(SnapshotError::Field(format!("rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let data = match mode.format() {
            None => (0..len)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>, _>>()?,
            Some(f) if f.bits() == 16 => (0..len)
                .map(|_| r.take(2).map(|b| f.value(i16::from_le_bytes(b.try_into().unwrap()) as i64)))
                .collect::<Result<Vec<_>, _>>()?,
            Some(f) => (0..len)
                .map(|_| r.take(4).map(|b| f.value(i32::from_le_bytes(b.try_into().unwrap()) as i64)))
                .collect::<Result<Vec<_>, _>>()?,
        };
        out.push(Tensor { dims, layout, mode, data });
    }
    if r.pos != buf.len() {
        return Err(SnapshotError::Field("trailing bytes".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_all_modes() {
        let ts = vec![
            Tensor::new(vec![2, 3], Layout::Matrix, NumericMode::Float, vec![0.1, -2.5, 3.0, 1e-9, 0.0, 7.0]),
            Tensor::new(vec![2], Layout::Matrix, NumericMode::Fixed16, vec![1.5, -0.00390625]),
            Tensor::new(vec![1, 1, 1, 2], Layout::Kernel, NumericMode::Fixed32Sr, vec![-3.25, 1.0 / 65536.0]),
        ];
        let bytes = write_snapshot(&ts);
        assert_eq!(read_snapshot(&bytes).unwrap(), ts);
        assert!(read_snapshot(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_snapshot(b"nope").is_err());
    }

    #[test]
    fn relayout_keeps_values() {
        let t = Tensor::new(vec![2, 1, 3, 3], Layout::Kernel, NumericMode::Float, (0..18).map(f64::from).collect());
        let m = t.relayout(Layout::Matrix, vec![2, 9]);
        assert_eq!(m.data, t.data);
    }
}
