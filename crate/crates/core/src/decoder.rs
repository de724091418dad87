//! Linear frame reconstructor standing in for a full acoustic model.
//!
//! Every aligned frame of phoneme `p` is predicted as `table[p] · W + b`;
//! the loss is the mean squared error over all covered frames and feature
//! dimensions. Because predictions are constant per phoneme, the loss is
//! computed from per-phoneme sufficient statistics (count, mean, scatter):
//!
//! ```text
//! Σ_t∈p ‖ŷ_p − y_t‖² = c_p · ‖ŷ_p − μ_p‖² + S_p
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codebook::EmbeddingTable;
use crate::data::{write_atomic, Utterance};
use crate::error::{Result, XpqError};
use crate::linalg::Matrix;
use crate::tensor_io::{put_tensor_f32, put_u32, Reader};

const MAGIC: &[u8; 4] = b"XPDC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `embedding_dim × dim`
    pub w: Matrix,
    /// `1 × dim`
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub w: Matrix,
    pub b: Matrix,
}

impl DecoderGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }
}

impl DecoderParams {
    /// Xavier-uniform weights, zero bias.
    pub fn init(embedding_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (embedding_dim + dim) as f64).sqrt();
        let w = Matrix::from_fn(embedding_dim, dim, |_, _| {
            rng.random_range(-bound..=bound) as f32 as f64
        });
        Self {
            w,
            b: Matrix::zeros(1, dim),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }

    /// Per-phoneme predictions `table · W + b`.
    pub fn phoneme_predictions(&self, table: &Matrix) -> Matrix {
        let mut out = table.matmul(&self.w);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.b.as_slice()) {
                *o += b;
            }
        }
        out
    }

    fn check_table(&self, table: &Matrix) -> Result<()> {
        if table.cols() != self.embedding_dim() {
            return Err(XpqError::Argument(format!(
                "embedding width {} does not match decoder input {}",
                table.cols(),
                self.embedding_dim()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.embedding_dim() as u32);
        put_u32(&mut out, self.dim() as u32);
        put_tensor_f32(&mut out, &self.w);
        put_tensor_f32(&mut out, &self.b);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "decoder checkpoint")?;
        let e = r.u32()? as usize;
        let d = r.u32()? as usize;
        let w = r.tensor_f32(e, d)?;
        let b = r.tensor_f32(1, d)?;
        r.finish()?;
        Ok(Self { w, b })
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

/// Predicted frames for every aligned frame of `utt`, in alignment order.
/// Unaligned frames produce no output row.
pub fn predict_frames(
    decoder: &DecoderParams,
    table: &EmbeddingTable,
    utt: &Utterance,
) -> Result<Matrix> {
    if table.language != utt.language {
        return Err(XpqError::Argument(format!(
            "table is for `{}`, utterance `{}` is `{}`",
            table.language, utt.id, utt.language
        )));
    }
    decoder.check_table(&table.matrix)?;
    let preds = decoder.phoneme_predictions(&table.matrix);
    let mut out = Matrix::zeros(utt.covered_frames(), decoder.dim());
    let mut row = 0;
    for seg in &utt.alignment {
        if seg.phoneme >= preds.rows() {
            return Err(XpqError::Vocabulary {
                language: utt.language.clone(),
                symbol: format!("#{}", seg.phoneme),
            });
        }
        for _ in seg.start_frame..seg.end_frame {
            out.row_mut(row).copy_from_slice(preds.row(seg.phoneme));
            row += 1;
        }
    }
    Ok(out)
}

/// Frame-by-frame MSE through [`predict_frames`], without sufficient
/// statistics. Slow; used as a cross-check.
pub fn direct_frame_mse(
    decoder: &DecoderParams,
    table: &EmbeddingTable,
    utterances: &[&Utterance],
) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0usize;
    for u in utterances {
        let pred = predict_frames(decoder, table, u)?;
        let mut row = 0;
        for seg in &u.alignment {
            for t in seg.start_frame..seg.end_frame {
                for (p, &y) in pred.row(row).iter().zip(u.features.frame(t)) {
                    sse += (p - y as f64).powi(2);
                }
                row += 1;
                count += decoder.dim();
            }
        }
    }
    if count == 0 {
        return Err(XpqError::Argument("no covered frames".into()));
    }
    Ok(sse / count as f64)
}

/// Per-phoneme sufficient statistics of aligned frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub counts: Vec<usize>,
    /// `m × dim` per-phoneme frame means (zero rows where the count is zero).
    pub means: Matrix,
    /// Per-phoneme `Σ ‖y_t − μ_p‖²`.
    pub scatter: Vec<f64>,
    pub total_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub decoder: DecoderGrads,
    /// Gradient with respect to the embedding table rows.
    pub table: Matrix,
}

impl FrameStats {
    pub fn from_utterances(utterances: &[&Utterance], m: usize, dim: usize) -> Result<Self> {
        for u in utterances {
            if u.features.dim() != dim {
                return Err(XpqError::Argument(format!(
                    "utterance `{}` has dim {}, expected {dim}",
                    u.id,
                    u.features.dim()
                )));
            }
            if let Some(seg) = u.alignment.iter().find(|s| s.phoneme >= m) {
                return Err(XpqError::Vocabulary {
                    language: u.language.clone(),
                    symbol: format!("#{}", seg.phoneme),
                });
            }
        }
        let partial_sums: Vec<(Vec<f64>, Vec<usize>)> = utterances
            .par_iter()
            .map(|u| {
                let mut sums = vec![0.0; m * dim];
                let mut counts = vec![0; m];
                for seg in &u.alignment {
                    counts[seg.phoneme] += seg.len();
                    let acc = &mut sums[seg.phoneme * dim..(seg.phoneme + 1) * dim];
                    for t in seg.start_frame..seg.end_frame {
                        for (a, &y) in acc.iter_mut().zip(u.features.frame(t)) {
                            *a += y as f64;
                        }
                    }
                }
                (sums, counts)
            })
            .collect();
        let mut sums = vec![0.0; m * dim];
        let mut counts = vec![0usize; m];
        for (s, c) in &partial_sums {
            sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        let total_frames: usize = counts.iter().sum();
        if total_frames == 0 {
            return Err(XpqError::Argument("no covered frames".into()));
        }
        let means = Matrix::from_fn(m, dim, |p, d| {
            if counts[p] == 0 {
                0.0
            } else {
                sums[p * dim + d] / counts[p] as f64
            }
        });
        let partial_scatter: Vec<Vec<f64>> = utterances
            .par_iter()
            .map(|u| {
                let mut sc = vec![0.0; m];
                for seg in &u.alignment {
                    let mu = means.row(seg.phoneme);
                    for t in seg.start_frame..seg.end_frame {
                        sc[seg.phoneme] += u
                            .features
                            .frame(t)
                            .iter()
                            .zip(mu)
                            .map(|(&y, &c)| (y as f64 - c).powi(2))
                            .sum::<f64>();
                    }
                }
                sc
            })
            .collect();
        let mut scatter = vec![0.0; m];
        for sc in &partial_scatter {
            scatter.iter_mut().zip(sc).for_each(|(a, b)| *a += b);
        }
        Ok(Self {
            counts,
            means,
            scatter,
            total_frames,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    fn normalizer(&self) -> f64 {
        (self.total_frames * self.dim()) as f64
    }

    /// Summed squared error over all covered frames and dimensions.
    pub fn sse(&self, decoder: &DecoderParams, table: &Matrix) -> Result<f64> {
        decoder.check_table(table)?;
        self.check_rows(table)?;
        let preds = decoder.phoneme_predictions(table);
        let mut sse = 0.0;
        for p in 0..self.counts.len() {
            if self.counts[p] == 0 {
                continue;
            }
            let dist: f64 = preds
                .row(p)
                .iter()
                .zip(self.means.row(p))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            sse += self.counts[p] as f64 * dist + self.scatter[p];
        }
        Ok(sse)
    }

    pub fn mse(&self, decoder: &DecoderParams, table: &Matrix) -> Result<f64> {
        Ok(self.sse(decoder, table)? / self.normalizer())
    }

    fn check_rows(&self, table: &Matrix) -> Result<()> {
        if table.rows() != self.counts.len() {
            return Err(XpqError::Argument(format!(
                "table has {} rows, statistics cover {} phonemes",
                table.rows(),
                self.counts.len()
            )));
        }
        Ok(())
    }

    pub fn loss_and_grads(&self, decoder: &DecoderParams, table: &Matrix) -> Result<LossGrads> {
        decoder.check_table(table)?;
        self.check_rows(table)?;
        let norm = self.normalizer();
        let preds = decoder.phoneme_predictions(table);
        let dim = self.dim();
        let mut g_pred = Matrix::zeros(table.rows(), dim);
        let mut sse = 0.0;
        for p in 0..self.counts.len() {
            let c = self.counts[p];
            if c == 0 {
                continue;
            }
            let scale = 2.0 * c as f64 / norm;
            let mut dist = 0.0;
            for d in 0..dim {
                let diff = preds.get(p, d) - self.means.get(p, d);
                dist += diff * diff;
                g_pred.set(p, d, scale * diff);
            }
            sse += c as f64 * dist + self.scatter[p];
        }
        let w = table.t_matmul(&g_pred);
        let mut b = Matrix::zeros(1, dim);
        for p in 0..g_pred.rows() {
            for (o, g) in b.as_mut_slice().iter_mut().zip(g_pred.row(p)) {
                *o += g;
            }
        }
        let d_table = g_pred.matmul_t(&decoder.w);
        Ok(LossGrads {
            loss: sse / norm,
            decoder: DecoderGrads { w, b },
            table: d_table,
        })
    }
}

/// MSE and gradients of the surrogate loss for `table` on `utterances`.
pub fn loss_and_grads(
    decoder: &DecoderParams,
    table: &EmbeddingTable,
    utterances: &[&Utterance],
) -> Result<LossGrads> {
    if let Some(u) = utterances.iter().find(|u| u.language != table.language) {
        return Err(XpqError::Argument(format!(
            "utterance `{}` is `{}`, table is `{}`",
            u.id, u.language, table.language
        )));
    }
    let stats = FrameStats::from_utterances(utterances, table.matrix.rows(), decoder.dim())?;
    stats.loss_and_grads(decoder, &table.matrix)
}
