//! Binary gradient dump (`.epgd`).
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EPGD"
//!      4     4  version (u32, currently 1)
//!      8     8  n, row count (u64)
//!     16     8  d, row width (u64)
//!     24     1  dtype: 0 = float32, 1 = float64
//!     25     7  reserved, zero
//!     32     …  n·d values, row-major
//! ```
//!
//! Everything is little-endian. The payload length must match `n·d·width`
//! exactly; every parse error carries the byte offset where it was detected.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradient_proxy::ProxyMatrix;

pub const MAGIC: [u8; 4] = *b"EPGD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DumpValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl DumpValues {
    pub fn dtype(&self) -> DType {
        match self {
            DumpValues::F32(_) => DType::F32,
            DumpValues::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DumpValues::F32(v) => v.len(),
            DumpValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradDump {
    pub rows: usize,
    pub cols: usize,
    pub values: DumpValues,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

impl GradDump {
    pub fn new(rows: usize, cols: usize, values: DumpValues) -> Result<Self> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::invalid(format!("{} values cannot fill {rows}×{cols}", values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = self.values.dtype().width();
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * width);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.push(self.values.dtype() as u8);
        out.extend_from_slice(&[0u8; 7]);
        match &self.values {
            DumpValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            DumpValues::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(format_err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(format_err(0, "bad magic, expected \"EPGD\""));
        }
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8-byte slice"));
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let rows = u64_at(8);
        let cols = u64_at(16);
        let dtype = match bytes[24] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(format_err(24, format!("unknown dtype code {other}"))),
        };
        if let Some(pos) = bytes[25..32].iter().position(|&b| b != 0) {
            return Err(format_err(25 + pos, "reserved header bytes must be zero"));
        }
        if rows == 0 {
            return Err(format_err(8, "empty dump"));
        }
        if cols == 0 {
            return Err(format_err(16, "rows have zero width"));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(dtype.width() as u64))
            .filter(|&b| b <= (usize::MAX - HEADER_LEN) as u64)
            .ok_or_else(|| format_err(8, "declared size overflows"))? as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(format_err(bytes.len(), format!("truncated payload: {} of {expected} bytes", payload.len())));
        }
        if payload.len() > expected {
            return Err(format_err(
                HEADER_LEN + expected,
                format!("{} trailing bytes after payload", payload.len() - expected),
            ));
        }
        let values = match dtype {
            DType::F32 => DumpValues::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => DumpValues::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        Ok(Self { rows: rows as usize, cols: cols as usize, values })
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Widens to `f64` proxies; a non-finite value is reported at its byte offset.
    pub fn to_proxies(&self) -> Result<ProxyMatrix<f64>> {
        let width = self.values.dtype().width();
        let data: Vec<f64> = match &self.values {
            DumpValues::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            DumpValues::F64(v) => v.clone(),
        };
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(format_err(HEADER_LEN + pos * width, "non-finite value"));
        }
        ProxyMatrix::new(self.rows, self.cols, data)
    }

    pub fn from_proxies(proxies: &ProxyMatrix<f64>) -> Self {
        Self { rows: proxies.rows(), cols: proxies.dim(), values: DumpValues::F64(proxies.as_slice().to_vec()) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GradDump {
        GradDump::new(2, 3, DumpValues::F64(vec![1.0, -2.0, 0.5, 3.25, 0.0, -0.125])).unwrap()
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = sample().encode();
        assert_eq!(bytes.len(), 32 + 6 * 8);
        assert_eq!(&bytes[..4], b"EPGD");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes[24], 1);
        assert_eq!(&bytes[25..32], &[0; 7]);
        assert_eq!(&bytes[32..40], &1.0f64.to_le_bytes());
        assert_eq!(GradDump::decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn corruption_is_located() {
        let good = sample().encode();
        assert_eq!(offset_of(GradDump::decode(&good[..50]).unwrap_err()), 50);
        assert_eq!(offset_of(GradDump::decode(&good[..10]).unwrap_err()), 10);
        let mut bad = good.clone();
        bad[1] = b'X';
        assert_eq!(offset_of(GradDump::decode(&bad).unwrap_err()), 0);
        let mut bad = good.clone();
        bad[24] = 7;
        assert_eq!(offset_of(GradDump::decode(&bad).unwrap_err()), 24);
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(GradDump::decode(&bad).unwrap_err()), 4);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset_of(GradDump::decode(&long).unwrap_err()), 80);
    }

    #[test]
    fn empty_dump_is_rejected() {
        let bytes = GradDump::new(0, 4, DumpValues::F32(vec![])).unwrap().encode();
        let err = GradDump::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("empty dump"));
    }

    #[test]
    fn non_finite_values_are_located() {
        let d = GradDump::new(1, 2, DumpValues::F32(vec![0.0, f32::NAN])).unwrap();
        let decoded = GradDump::decode(&d.encode()).unwrap();
        assert_eq!(offset_of(decoded.to_proxies().unwrap_err()), 36);
    }
}
