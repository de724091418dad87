use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpqError};

const MAGIC: &[u8; 4] = b"XPQF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(XpqError::Validation("feature dim must be >= 1".into()));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(XpqError::Validation("frame_rate_hz must be positive".into()));
        }
        Ok(())
    }
}

/// Frame-level speech features, `T × dim`, binary32, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(XpqError::Validation(format!("empty frame matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(XpqError::Validation(format!(
                "frame matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(XpqError::Validation(format!(
                "non-finite value at frame {}, dim {}",
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(XpqError::Validation("ragged frame rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Number of frames `T`.
    pub fn frames(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Encode a matrix in the `XPQF` layout.
pub fn feature_bytes(matrix: &FrameMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.cols as u32).to_le_bytes());
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_feature_bytes(bytes: &[u8]) -> Result<FrameMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(XpqError::Truncation(format!(
            "feature header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(XpqError::Format(format!(
            "bad feature magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(XpqError::Format(format!("unsupported feature version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| XpqError::Format(format!("feature size {rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(XpqError::Truncation(format!(
            "declared {rows}x{cols} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FrameMatrix::new(rows, cols, data)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| XpqError::io(path, e))?;
    read_feature_bytes(&bytes).map_err(|e| match e {
        XpqError::Format(m) => XpqError::Format(format!("{}: {m}", path.display())),
        XpqError::Truncation(m) => XpqError::Truncation(format!("{}: {m}", path.display())),
        XpqError::Validation(m) => XpqError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_feature_file(matrix: &FrameMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, feature_bytes(matrix)).map_err(|e| XpqError::io(path, e))
}
