//! Central finite-difference checks of every hand-written gradient.
//!
//! Three suites: the codebook forward pass (through a random linear
//! functional of its output), the surrogate reconstruction loss (differenced
//! through the frame-by-frame path, not the sufficient statistics), and the
//! composite training objective from frames to loss.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::{CodebookConfig, CodebookParams, EmbeddingTable};
use crate::data::{FrameMatrix, LanguagePhonemeSet, PhonemeSegment, Split, Utterance};
use crate::decoder::{direct_frame_mse, DecoderParams, FrameStats};
use crate::error::{Result, XpqError};
use crate::linalg::Matrix;
use crate::query::aggregate_queries;
use crate::trainer::objective_and_grads;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at this
/// step carry roughly 1e-10 of absolute rounding error, so entries smaller
/// than the floor are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShapePreset {
    pub name: &'static str,
    pub m: usize,
    pub n: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dim: usize,
}

pub const PRESETS: [ShapePreset; 3] = [
    ShapePreset { name: "tiny", m: 3, n: 4, heads: 2, d_k: 3, d_v: 2, dim: 5 },
    ShapePreset { name: "small", m: 5, n: 8, heads: 3, d_k: 4, d_v: 3, dim: 4 },
    ShapePreset { name: "medium", m: 8, n: 16, heads: 4, d_k: 8, d_v: 4, dim: 6 },
];

impl FromStr for ShapePreset {
    type Err = XpqError;

    fn from_str(s: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|p| p.name == s)
            .copied()
            .ok_or_else(|| XpqError::Argument(format!("unknown size preset `{s}` (tiny, small, medium)")))
    }
}

impl ShapePreset {
    fn codebook_config(&self) -> CodebookConfig {
        CodebookConfig {
            n: self.n,
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            dim: self.dim,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

trait Perturb: Clone {
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
}

#[derive(Clone)]
struct CodebookCase {
    codebook: CodebookParams,
    queries: Matrix,
}

impl Perturb for CodebookCase {
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.codebook.tensors_mut();
        t.push(&mut self.queries);
        t
    }
}

#[derive(Clone)]
struct LossCase {
    decoder: DecoderParams,
    table: EmbeddingTable,
}

impl Perturb for LossCase {
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.decoder.w, &mut self.decoder.b, &mut self.table.matrix]
    }
}

#[derive(Clone)]
struct CompositeCase {
    codebook: CodebookParams,
    decoder: DecoderParams,
}

impl Perturb for CompositeCase {
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.codebook.tensors_mut();
        t.push(&mut self.decoder.w);
        t.push(&mut self.decoder.b);
        t
    }
}

/// Largest relative error over every entry of every tensor, and the number
/// of entries checked.
fn compare<P: Perturb>(
    case: &P,
    analytic: &[&Matrix],
    f: impl Fn(&P) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut probe = case.clone();
    let shapes: Vec<(usize, usize)> = probe.tensors_mut().iter().map(|t| t.shape()).collect();
    if shapes.len() != analytic.len() || shapes.iter().zip(analytic).any(|(s, a)| *s != a.shape()) {
        return Err(XpqError::Argument("analytic gradients do not mirror parameters".into()));
    }
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.as_slice().len() {
            let orig = probe.tensors_mut()[ti].as_slice()[idx];
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig + STEP;
            let plus = f(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig - STEP;
            let minus = f(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grad.as_slice()[idx], numeric);
            if !err.is_finite() {
                return Err(XpqError::Numeric("non-finite gradient during check".into()));
            }
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok((worst, entries))
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_decoder(e: usize, dim: usize, rng: &mut impl Rng) -> DecoderParams {
    let mut w = normal_matrix(e, dim, rng);
    w.scale(1.0 / (e as f64).sqrt());
    DecoderParams { w, b: normal_matrix(1, dim, rng) }
}

/// `count` utterances over `m` phonemes; each covers every phoneme when
/// `cover_all`, otherwise a random nonempty subset. Includes unaligned gaps.
fn random_utterances(
    m: usize,
    dim: usize,
    count: usize,
    cover_all: bool,
    rng: &mut impl Rng,
) -> Vec<Utterance> {
    (0..count)
        .map(|u| {
            let mut phonemes: Vec<usize> = (0..m).filter(|_| cover_all || rng.random_bool(0.6)).collect();
            if phonemes.is_empty() {
                phonemes.push(rng.random_range(0..m));
            }
            // repeated phonemes exercise pooling across segments
            for _ in 0..rng.random_range(0..=m) {
                let again = phonemes[rng.random_range(0..phonemes.len())];
                phonemes.push(again);
            }
            let mut alignment = Vec::new();
            let mut t = 0;
            for phoneme in phonemes {
                t += rng.random_range(0..=1);
                let len = rng.random_range(1..=3);
                alignment.push(PhonemeSegment { phoneme, start_frame: t, end_frame: t + len });
                t += len;
            }
            let frames = t + 1;
            let values = (0..frames * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Utterance {
                id: format!("gc-{u}"),
                language: "gc".into(),
                features: FrameMatrix::new(frames, dim, values).expect("finite frames"),
                alignment,
                speaker: None,
                split: Split::Train,
            }
        })
        .collect()
}

fn phoneme_set(m: usize) -> LanguagePhonemeSet {
    LanguagePhonemeSet::new("gc", (0..m).map(|i| format!("p{i}")).collect()).expect("distinct symbols")
}

pub fn check_codebook(preset: &ShapePreset, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook = CodebookParams::init(preset.codebook_config(), rng.random())?;
    let mut queries = normal_matrix(preset.m, preset.dim, &mut rng);
    // an absent phoneme's all-zero query row
    queries.row_mut(preset.m - 1).fill(0.0);
    let upstream = normal_matrix(preset.m, preset.heads * preset.d_v, &mut rng);
    let grads = codebook.backward(&queries, &upstream)?;
    let mut analytic = grads.tensors();
    analytic.push(&grads.queries);
    let case = CodebookCase { codebook, queries };
    compare(&case, &analytic, |c| {
        let (out, _) = c.codebook.forward_matrix(&c.queries)?;
        Ok(out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum())
    })
}

pub fn check_surrogate_loss(preset: &ShapePreset, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10);
    let e = preset.heads * preset.d_v;
    let utts = random_utterances(preset.m, preset.dim, 3, false, &mut rng);
    let refs: Vec<&Utterance> = utts.iter().collect();
    let case = LossCase {
        decoder: random_decoder(e, preset.dim, &mut rng),
        table: EmbeddingTable {
            language: "gc".into(),
            matrix: normal_matrix(preset.m, e, &mut rng),
        },
    };
    let stats = FrameStats::from_utterances(&refs, preset.m, preset.dim)?;
    let lg = stats.loss_and_grads(&case.decoder, &case.table.matrix)?;
    compare(&case, &[&lg.decoder.w, &lg.decoder.b, &lg.table], |c| {
        direct_frame_mse(&c.decoder, &c.table, &refs)
    })
}

pub fn check_composite(preset: &ShapePreset, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x20);
    let set = phoneme_set(preset.m);
    let gen = random_utterances(preset.m, preset.dim, 3, true, &mut rng);
    let loss = random_utterances(preset.m, preset.dim, 2, false, &mut rng);
    let gen: Vec<&Utterance> = gen.iter().collect();
    let loss: Vec<&Utterance> = loss.iter().collect();
    let case = CompositeCase {
        codebook: CodebookParams::init(preset.codebook_config(), rng.random())?,
        decoder: random_decoder(preset.heads * preset.d_v, preset.dim, &mut rng),
    };
    let grads = objective_and_grads(&case.codebook, &case.decoder, &set, &gen, &loss)?;
    let mut analytic = grads.codebook.tensors();
    analytic.truncate(3 * preset.heads);
    analytic.extend(grads.decoder.tensors());
    let queries = aggregate_queries(&gen, &set)?;
    compare(&case, &analytic, |c| {
        let (table, _) = c.codebook.forward(&queries)?;
        direct_frame_mse(&c.decoder, &table, &loss)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub shape: &'static str,
    pub seed: u64,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("suite\tshape\tseed\tentries\tmax_rel_err\tresult\n");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.3e}\t{}",
                r.suite,
                r.shape,
                r.seed,
                r.entries,
                r.max_rel_err,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

type Suite = (&'static str, fn(&ShapePreset, u64) -> Result<(f64, usize)>);

const SUITES: [Suite; 3] = [
    ("codebook_forward", check_codebook),
    ("surrogate_loss", check_surrogate_loss),
    ("composite_objective", check_composite),
];

/// Every suite on every (preset, seed) pair, in that nesting order.
pub fn run_gradcheck(presets: &[ShapePreset], seeds: &[u64]) -> Result<GradcheckReport> {
    let jobs: Vec<(Suite, ShapePreset, u64)> = SUITES
        .iter()
        .flat_map(|&s| presets.iter().flat_map(move |&p| seeds.iter().map(move |&seed| (s, p, seed))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&((suite, check), preset, seed)| {
            let (max_rel_err, entries) = check(&preset, seed)?;
            Ok(SuiteResult {
                suite,
                shape: preset.name,
                seed,
                entries,
                max_rel_err,
                passed: max_rel_err < TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        step: STEP,
        tolerance: TOLERANCE,
        results,
    })
}
