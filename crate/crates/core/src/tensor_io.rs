//! Little-endian tensor serialization shared by the checkpoint formats.

use crate::error::{Result, XpqError};
use crate::linalg::Matrix;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// `rows u32, cols u32`, then binary32 payload.
pub(crate) fn put_tensor_f32(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// `rows u32, cols u32`, then binary64 payload.
pub(crate) fn put_tensor_f64(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for &v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Check the 4-byte magic and the version word.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        let mut r = Self { bytes, pos: 0, what };
        let m = r.take(4)?;
        if m != magic {
            return Err(XpqError::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = r.u32()?;
        if v != version {
            return Err(XpqError::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(XpqError::Truncation(format!(
                "{}: needed {n} more bytes at offset {}",
                self.what, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_with(&mut self, rows: usize, cols: usize, width: usize) -> Result<Matrix> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        if (r, c) != (rows, cols) {
            return Err(XpqError::Format(format!(
                "{}: tensor is {r}x{c}, expected {rows}x{cols}",
                self.what
            )));
        }
        let payload = self.take(r * c * width)?;
        let data: Vec<f64> = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let m = Matrix::from_vec(r, c, data)?;
        if !m.is_finite() {
            return Err(XpqError::Validation(format!("{}: non-finite tensor value", self.what)));
        }
        Ok(m)
    }

    pub fn tensor_f32(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        self.tensor_with(rows, cols, 4)
    }

    pub fn tensor_f64(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        self.tensor_with(rows, cols, 8)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(XpqError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
