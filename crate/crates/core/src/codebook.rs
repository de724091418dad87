//! The codebook module: multi-head scaled dot-product attention from phoneme
//! queries onto learnable Keys, returning mixtures of learnable Codes.
//!
//! Per head `h`:
//!
//! ```text
//! logits_h  = (Q · Wq_h) · Keys_hᵀ / sqrt(d_k)      m × n
//! weights_h = row_softmax(logits_h)                 m × n
//! out_h     = weights_h · Codes_h                   m × d_v
//! ```
//!
//! The embedding table is `[out_1 | … | out_H]`. The query projection has no
//! bias, so an all-zero query attends uniformly and lands on the column mean
//! of each head's Codes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Result, XpqError};
use crate::linalg::{softmax_in_place, Matrix};
use crate::query::QueryMatrix;
use crate::tensor_io::{put_tensor_f32, put_u32, Reader};

const MAGIC: &[u8; 4] = b"XPCB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    /// Codebook size.
    pub n: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Input feature dimensionality.
    pub dim: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            n: 128,
            heads: 4,
            d_k: 64,
            d_v: 64,
            dim: 16,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.heads == 0 || self.d_k == 0 || self.d_v == 0 || self.dim == 0 {
            return Err(XpqError::Config(format!("codebook sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `heads · d_v`
    pub fn embedding_dim(&self) -> usize {
        self.heads * self.d_v
    }
}

/// Generated phoneme embeddings, `m × (heads · d_v)`, rows in canonical
/// phoneme order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub language: String,
    pub matrix: Matrix,
}

/// Per-head `m × n` attention weights; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<Matrix>,
}

impl AttentionRecord {
    /// Attention rows of phoneme `p`, one slice per head.
    pub fn phoneme(&self, p: usize) -> Vec<&[f64]> {
        self.weights.iter().map(|w| w.row(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookParams {
    pub config: CodebookConfig,
    pub w_q: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub codes: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookGrads {
    pub w_q: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub codes: Vec<Matrix>,
    pub queries: Matrix,
}

impl CodebookGrads {
    /// Parameter gradients in [`CodebookParams::tensors`] order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        interleave(&self.w_q, &self.keys, &self.codes)
    }
}

fn interleave<'a>(a: &'a [Matrix], b: &'a [Matrix], c: &'a [Matrix]) -> Vec<&'a Matrix> {
    a.iter()
        .zip(b)
        .zip(c)
        .flat_map(|((x, y), z)| [x, y, z])
        .collect()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_sum: usize) -> Matrix {
    let bound = (6.0 / fan_sum as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound) as f32 as f64)
}

struct HeadCache {
    projected: Matrix,
    weights: Matrix,
}

impl CodebookParams {
    /// Xavier-uniform initialization from a single seeded stream, head by
    /// head. Values are rounded to binary32.
    pub fn init(config: CodebookConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let CodebookConfig { n, heads, d_k, d_v, dim } = config;
        let mut w_q = Vec::with_capacity(heads);
        let mut keys = Vec::with_capacity(heads);
        let mut codes = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(xavier(&mut rng, dim, d_k, dim + d_k));
            keys.push(xavier(&mut rng, n, d_k, n + d_k));
            codes.push(xavier(&mut rng, n, d_v, n + d_v));
        }
        Ok(Self { config, w_q, keys, codes })
    }

    /// Tensors in serialization order: `Wq_h, Keys_h, Codes_h` for each head.
    pub fn tensors(&self) -> Vec<&Matrix> {
        interleave(&self.w_q, &self.keys, &self.codes)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.w_q
            .iter_mut()
            .zip(self.keys.iter_mut())
            .zip(self.codes.iter_mut())
            .flat_map(|((x, y), z)| [x, y, z])
            .collect()
    }

    fn check_queries(&self, queries: &Matrix) -> Result<()> {
        if queries.cols() != self.config.dim {
            return Err(XpqError::Argument(format!(
                "queries have dim {}, codebook expects {}",
                queries.cols(),
                self.config.dim
            )));
        }
        if queries.rows() == 0 {
            return Err(XpqError::Argument("no query rows".into()));
        }
        Ok(())
    }

    fn head_forward(&self, h: usize, queries: &Matrix) -> HeadCache {
        let projected = queries.matmul(&self.w_q[h]);
        let mut weights = projected.matmul_t(&self.keys[h]);
        weights.scale(1.0 / (self.config.d_k as f64).sqrt());
        for r in 0..weights.rows() {
            softmax_in_place(weights.row_mut(r));
        }
        HeadCache { projected, weights }
    }

    fn run(&self, queries: &Matrix) -> Result<(Matrix, Vec<HeadCache>)> {
        self.check_queries(queries)?;
        let caches: Vec<HeadCache> = (0..self.config.heads)
            .into_par_iter()
            .map(|h| self.head_forward(h, queries))
            .collect();
        let d_v = self.config.d_v;
        let mut embedding = Matrix::zeros(queries.rows(), self.config.embedding_dim());
        for (h, cache) in caches.iter().enumerate() {
            let out = cache.weights.matmul(&self.codes[h]);
            for r in 0..out.rows() {
                embedding.row_mut(r)[h * d_v..(h + 1) * d_v].copy_from_slice(out.row(r));
            }
        }
        if !embedding.is_finite() || caches.iter().any(|c| !c.weights.is_finite()) {
            return Err(XpqError::Numeric("non-finite value in codebook forward".into()));
        }
        Ok((embedding, caches))
    }

    /// Embeddings and attention weights for raw query rows.
    pub fn forward_matrix(&self, queries: &Matrix) -> Result<(Matrix, AttentionRecord)> {
        let (embedding, caches) = self.run(queries)?;
        let weights = caches.into_iter().map(|c| c.weights).collect();
        Ok((embedding, AttentionRecord { weights }))
    }

    pub fn forward(&self, queries: &QueryMatrix) -> Result<(EmbeddingTable, AttentionRecord)> {
        let (matrix, record) = self.forward_matrix(&queries.matrix)?;
        Ok((
            EmbeddingTable {
                language: queries.language.clone(),
                matrix,
            },
            record,
        ))
    }

    /// Exact gradients of `⟨upstream, forward(queries)⟩` with respect to every
    /// parameter tensor and to the queries.
    pub fn backward(&self, queries: &Matrix, upstream: &Matrix) -> Result<CodebookGrads> {
        let (_, caches) = self.run(queries)?;
        if upstream.shape() != (queries.rows(), self.config.embedding_dim()) {
            return Err(XpqError::Argument(format!(
                "upstream gradient is {:?}, expected {:?}",
                upstream.shape(),
                (queries.rows(), self.config.embedding_dim())
            )));
        }
        let CodebookConfig { d_k, d_v, .. } = self.config;
        let inv_sqrt = 1.0 / (d_k as f64).sqrt();
        let per_head: Vec<(Matrix, Matrix, Matrix, Matrix)> = caches
            .par_iter()
            .enumerate()
            .map(|(h, cache)| {
                let m = queries.rows();
                let g_out = Matrix::from_fn(m, d_v, |r, c| upstream.get(r, h * d_v + c));
                let d_codes = cache.weights.t_matmul(&g_out);
                let d_weights = g_out.matmul_t(&self.codes[h]);
                // softmax Jacobian, row by row
                let mut d_logits = Matrix::zeros(m, self.config.n);
                for r in 0..m {
                    let a = cache.weights.row(r);
                    let g = d_weights.row(r);
                    let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
                    for (o, (x, y)) in d_logits.row_mut(r).iter_mut().zip(a.iter().zip(g)) {
                        *o = x * (y - inner) * inv_sqrt;
                    }
                }
                let d_proj = d_logits.matmul(&self.keys[h]);
                let d_keys = d_logits.t_matmul(&cache.projected);
                let d_wq = queries.t_matmul(&d_proj);
                let d_q = d_proj.matmul_t(&self.w_q[h]);
                (d_wq, d_keys, d_codes, d_q)
            })
            .collect();

        let mut grads = CodebookGrads {
            w_q: Vec::with_capacity(per_head.len()),
            keys: Vec::with_capacity(per_head.len()),
            codes: Vec::with_capacity(per_head.len()),
            queries: Matrix::zeros(queries.rows(), queries.cols()),
        };
        for (d_wq, d_keys, d_codes, d_q) in per_head {
            grads.w_q.push(d_wq);
            grads.keys.push(d_keys);
            grads.codes.push(d_codes);
            grads.queries.add_assign(&d_q);
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        for v in [c.n, c.heads, c.d_k, c.d_v, c.dim] {
            put_u32(&mut out, v as u32);
        }
        for t in self.tensors() {
            put_tensor_f32(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "codebook checkpoint")?;
        let mut field = || r.u32().map(|v| v as usize);
        let config = CodebookConfig {
            n: field()?,
            heads: field()?,
            d_k: field()?,
            d_v: field()?,
            dim: field()?,
        };
        config
            .validate()
            .map_err(|e| XpqError::Format(format!("codebook checkpoint: {e}")))?;
        let CodebookConfig { n, heads, d_k, d_v, dim } = config;
        let mut params = Self {
            config,
            w_q: Vec::with_capacity(heads),
            keys: Vec::with_capacity(heads),
            codes: Vec::with_capacity(heads),
        };
        for _ in 0..heads {
            params.w_q.push(r.tensor_f32(dim, d_k)?);
            params.keys.push(r.tensor_f32(n, d_k)?);
            params.codes.push(r.tensor_f32(n, d_v)?);
        }
        r.finish()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| XpqError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
