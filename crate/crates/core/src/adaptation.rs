//! Few-shot adaptation to a new language.
//!
//! A task holds `k` shot utterances and `q` query utterances; every phoneme
//! used by the queries occurs in the shots. The phoneme embedding table is
//! initialized either from the trained codebook (queries from the shots,
//! one forward pass) or randomly, then the table and decoder are fine-tuned
//! on the shots while the codebook stays frozen. Both modes see the same
//! task for a given task seed, so comparisons are paired.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookParams, EmbeddingTable};
use crate::data::{Corpus, LanguagePhonemeSet, Split, Utterance};
use crate::decoder::{DecoderParams, FrameStats};
use crate::error::{Result, XpqError};
use crate::linalg::Matrix;
use crate::optim::{Adam, AdamConfig};
use crate::query::aggregate_queries;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub language: String,
    pub k: usize,
    pub q: usize,
    pub seed: u64,
}

/// Corpus indices of the shot and query utterances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotTask {
    pub language: String,
    pub shots: Vec<usize>,
    pub queries: Vec<usize>,
}

impl FewShotTask {
    pub fn shot_utterances<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Utterance> {
        self.shots.iter().map(|&i| &corpus.utterances[i]).collect()
    }

    pub fn query_utterances<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Utterance> {
        self.queries.iter().map(|&i| &corpus.utterances[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    CodebookInit,
    RandomInit,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::CodebookInit => "codebook_init",
            InitMode::RandomInit => "random_init",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub finetune_steps: u64,
    /// Constant fine-tuning learning rate.
    pub lr: f64,
    pub eval_checkpoints: Vec<u64>,
    pub adam: AdamConfig,
    /// Query utterances per task.
    pub queries: usize,
    /// Shot draws tried before a task is declared infeasible.
    pub task_attempts: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            finetune_steps: 500,
            lr: 0.001,
            eval_checkpoints: vec![0, 50, 200, 500],
            adam: AdamConfig::default(),
            queries: 64,
            task_attempts: 1000,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_checkpoints.is_empty() {
            return Err(XpqError::Config("eval_checkpoints is empty".into()));
        }
        if self.eval_checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(XpqError::Config("eval_checkpoints must be strictly increasing".into()));
        }
        if self.eval_checkpoints.last().is_some_and(|&s| s > self.finetune_steps) {
            return Err(XpqError::Config("eval checkpoint beyond finetune_steps".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(XpqError::Config("adaptation lr must be positive".into()));
        }
        if self.queries == 0 || self.task_attempts == 0 {
            return Err(XpqError::Config("queries and task_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Draw `k` shots, then take `q` queries among the remaining utterances
/// whose phonemes all occur in the shots. Shot sets that leave fewer than
/// `q` such utterances are rejected and redrawn.
pub fn sample_task(corpus: &Corpus, spec: &TaskSpec, attempts: usize) -> Result<FewShotTask> {
    let set = corpus.language(&spec.language)?;
    if spec.k == 0 || spec.q == 0 {
        return Err(XpqError::Argument("k and q must be positive".into()));
    }
    let candidates: Vec<usize> = corpus
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.language == spec.language && u.split != Split::Val)
        .map(|(i, _)| i)
        .collect();
    if candidates.len() < spec.k + spec.q {
        return Err(XpqError::Task(format!(
            "`{}` has {} usable utterances, a {}-shot task with {} queries needs {}",
            spec.language,
            candidates.len(),
            spec.k,
            spec.q,
            spec.k + spec.q
        )));
    }
    let present: Vec<Vec<usize>> = candidates
        .iter()
        .map(|&i| corpus.utterances[i].phonemes_present())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut uncovered = BTreeSet::new();
    for _ in 0..attempts.max(1) {
        order.shuffle(&mut rng);
        let (shots, rest) = order.split_at(spec.k);
        let mut covered = vec![false; set.len()];
        shots
            .iter()
            .for_each(|&s| present[s].iter().for_each(|&p| covered[p] = true));
        let queries: Vec<usize> = rest
            .iter()
            .copied()
            .filter(|&c| present[c].iter().all(|&p| covered[p]))
            .take(spec.q)
            .collect();
        if queries.len() == spec.q {
            return Ok(FewShotTask {
                language: spec.language.clone(),
                shots: shots.iter().map(|&s| candidates[s]).collect(),
                queries: queries.iter().map(|&c| candidates[c]).collect(),
            });
        }
        uncovered = rest
            .iter()
            .flat_map(|&c| present[c].iter().copied())
            .filter(|&p| !covered[p])
            .collect();
    }
    let names: Vec<String> = uncovered.iter().map(|&p| set.namespaced(p)).collect();
    Err(XpqError::Task(format!(
        "no {}-shot task for `{}` with {} covered queries after {attempts} draws; \
         uncovered phonemes: {}",
        spec.k,
        spec.language,
        spec.q,
        names.join(", ")
    )))
}

/// The shots cover every phoneme of the queries.
pub fn task_is_covered(corpus: &Corpus, task: &FewShotTask) -> bool {
    let covered: BTreeSet<usize> = task
        .shot_utterances(corpus)
        .iter()
        .flat_map(|u| u.phonemes_present())
        .collect();
    task.query_utterances(corpus)
        .iter()
        .all(|u| u.phonemes_present().iter().all(|p| covered.contains(p)))
}

pub fn init_embedding(
    mode: InitMode,
    codebook: &CodebookParams,
    shots: &[&Utterance],
    set: &LanguagePhonemeSet,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable> {
    match mode {
        InitMode::CodebookInit => {
            let queries = aggregate_queries(shots, set)?;
            Ok(codebook.forward(&queries)?.0)
        }
        InitMode::RandomInit => {
            let width = codebook.config.embedding_dim();
            let bound = (6.0 / (set.len() + width) as f64).sqrt();
            Ok(EmbeddingTable {
                language: set.language.clone(),
                matrix: Matrix::from_fn(set.len(), width, |_, _| rng.random_range(-bound..=bound)),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub table: EmbeddingTable,
    pub decoder: DecoderParams,
    pub train_loss: f64,
}

/// Fine-tune the table and decoder on precomputed shot statistics. The
/// snapshot at step `s` holds the parameters after `s` updates.
pub fn finetune_stats(
    table: &EmbeddingTable,
    decoder: &DecoderParams,
    shots: &FrameStats,
    config: &AdaptConfig,
) -> Result<Vec<Snapshot>> {
    let mut table = table.clone();
    let mut decoder = decoder.clone();
    let mut adam = Adam::new(config.adam, &[&table.matrix, &decoder.w, &decoder.b]);
    let mut snapshots = Vec::with_capacity(config.eval_checkpoints.len());
    let mut next = config.eval_checkpoints.iter().peekable();
    for step in 0..=config.finetune_steps {
        let lg = shots.loss_and_grads(&decoder, &table.matrix)?;
        if next.peek().is_some_and(|&&s| s == step) {
            next.next();
            snapshots.push(Snapshot {
                step,
                table: table.clone(),
                decoder: decoder.clone(),
                train_loss: lg.loss,
            });
        }
        if step == config.finetune_steps {
            break;
        }
        adam.update(
            vec![&mut table.matrix, &mut decoder.w, &mut decoder.b],
            &[&lg.table, &lg.decoder.w, &lg.decoder.b],
            config.lr,
        )?;
    }
    Ok(snapshots)
}

pub fn finetune(
    table: &EmbeddingTable,
    decoder: &DecoderParams,
    shots: &[&Utterance],
    config: &AdaptConfig,
) -> Result<Vec<Snapshot>> {
    config.validate()?;
    let stats = FrameStats::from_utterances(shots, table.matrix.rows(), decoder.dim())?;
    finetune_stats(table, decoder, &stats, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_utterance: Vec<f64>,
    /// MSE pooled over all covered frames of all queries.
    pub mean_mse: f64,
}

pub fn evaluate_stats(
    table: &EmbeddingTable,
    decoder: &DecoderParams,
    queries: &[FrameStats],
) -> Result<Evaluation> {
    let mut per_utterance = Vec::with_capacity(queries.len());
    let mut sse = 0.0;
    let mut count = 0usize;
    for stats in queries {
        let s = stats.sse(decoder, &table.matrix)?;
        let n = stats.total_frames * stats.dim();
        per_utterance.push(s / n as f64);
        sse += s;
        count += n;
    }
    if count == 0 {
        return Err(XpqError::Argument("no query frames to evaluate".into()));
    }
    Ok(Evaluation {
        per_utterance,
        mean_mse: sse / count as f64,
    })
}

pub fn evaluate(
    table: &EmbeddingTable,
    decoder: &DecoderParams,
    queries: &[&Utterance],
) -> Result<Evaluation> {
    let stats = query_stats(queries, table.matrix.rows(), decoder.dim())?;
    evaluate_stats(table, decoder, &stats)
}

fn query_stats(queries: &[&Utterance], m: usize, dim: usize) -> Result<Vec<FrameStats>> {
    queries
        .iter()
        .map(|u| FrameStats::from_utterances(&[u], m, dim))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub language: String,
    pub ks: Vec<usize>,
    pub tasks: usize,
    pub modes: Vec<InitMode>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub step: u64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_seed: u64,
    pub checkpoints: Vec<CheckpointEval>,
}

/// One (language, k, mode) cell. `mean[i]` and `std[i]` summarize the
/// tasks at `eval_checkpoints[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub language: String,
    pub k: usize,
    pub mode: InitMode,
    pub tasks: Vec<TaskResult>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn cell(&self, k: usize, mode: InitMode) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.k == k && c.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per cell; `mean@s` / `std@s` columns per eval checkpoint.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let steps: Vec<u64> = self
            .cells
            .first()
            .and_then(|c| c.tasks.first())
            .map(|t| t.checkpoints.iter().map(|c| c.step).collect())
            .unwrap_or_default();
        out.push_str("language\tk\tmode\ttasks");
        for s in &steps {
            let _ = write!(out, "\tmean@{s}\tstd@{s}");
        }
        out.push('\n');
        for c in &self.cells {
            let _ = write!(out, "{}\t{}\t{}\t{}", c.language, c.k, c.mode.as_str(), c.tasks.len());
            for (m, s) in c.mean.iter().zip(&c.std) {
                let _ = write!(out, "\t{m}\t{s}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-k task seeds, derived from the experiment seed.
pub fn task_seeds(seed: u64, k: usize, tasks: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..tasks).map(|_| rng.random()).collect()
}

/// Run every (k, task) pair under every mode and summarize per cell. Tasks
/// run in parallel; the codebook is only read.
pub fn run_experiment(
    corpus: &Corpus,
    codebook: &CodebookParams,
    decoder: &DecoderParams,
    spec: &ExperimentSpec,
    config: &AdaptConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let set = corpus.language(&spec.language)?;
    if codebook.config.dim != corpus.feature_spec.dim {
        return Err(XpqError::Config("codebook dim does not match corpus".into()));
    }
    let jobs: Vec<(usize, u64)> = spec
        .ks
        .iter()
        .flat_map(|&k| task_seeds(spec.seed, k, spec.tasks).into_iter().map(move |s| (k, s)))
        .collect();

    let results: Vec<Vec<TaskResult>> = jobs
        .par_iter()
        .map(|&(k, task_seed)| {
            let task = sample_task(
                corpus,
                &TaskSpec {
                    language: spec.language.clone(),
                    k,
                    q: config.queries,
                    seed: task_seed,
                },
                config.task_attempts,
            )?;
            if !task_is_covered(corpus, &task) {
                return Err(XpqError::Vocabulary {
                    language: spec.language.clone(),
                    symbol: "query phoneme missing from shots".into(),
                });
            }
            let shots = task.shot_utterances(corpus);
            let shot_stats = FrameStats::from_utterances(&shots, set.len(), decoder.dim())?;
            let q_stats = query_stats(&task.query_utterances(corpus), set.len(), decoder.dim())?;
            spec.modes
                .iter()
                .map(|&mode| {
                    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
                    rng.set_stream(7);
                    let table = init_embedding(mode, codebook, &shots, set, &mut rng)?;
                    let snapshots = finetune_stats(&table, decoder, &shot_stats, config)?;
                    let checkpoints = snapshots
                        .iter()
                        .map(|s| {
                            Ok(CheckpointEval {
                                step: s.step,
                                mean_mse: evaluate_stats(&s.table, &s.decoder, &q_stats)?.mean_mse,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(TaskResult {
                        task_seed,
                        checkpoints,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &k in &spec.ks {
        for (mi, &mode) in spec.modes.iter().enumerate() {
            let tasks: Vec<TaskResult> = jobs
                .iter()
                .zip(&results)
                .filter(|((jk, _), _)| *jk == k)
                .map(|(_, r)| r[mi].clone())
                .collect();
            let (mean, std): (Vec<f64>, Vec<f64>) = (0..config.eval_checkpoints.len())
                .map(|ci| {
                    let vals: Vec<f64> = tasks.iter().map(|t| t.checkpoints[ci].mean_mse).collect();
                    mean_std(&vals)
                })
                .unzip();
            cells.push(CellReport {
                language: spec.language.clone(),
                k,
                mode,
                tasks,
                mean,
                std,
            });
        }
    }
    Ok(ExperimentReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookConfig;
    use crate::data::{FeatureSpec, FrameMatrix, PhonemeSegment};

    fn utt(id: &str, phonemes: &[usize]) -> Utterance {
        Utterance {
            id: id.into(),
            language: "xx".into(),
            features: FrameMatrix::new(
                phonemes.len(),
                2,
                phonemes.iter().flat_map(|&p| [p as f32, -(p as f32)]).collect(),
            )
            .unwrap(),
            alignment: phonemes
                .iter()
                .enumerate()
                .map(|(t, &phoneme)| PhonemeSegment { phoneme, start_frame: t, end_frame: t + 1 })
                .collect(),
            speaker: None,
            split: Split::Test,
        }
    }

    fn corpus(utts: Vec<Utterance>) -> Corpus {
        let set =
            LanguagePhonemeSet::new("xx", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        Corpus::new(FeatureSpec { dim: 2, frame_rate_hz: 50.0 }, vec![set], utts).unwrap()
    }

    #[test]
    fn one_full_utterance_makes_any_queries_valid() {
        let c = corpus(vec![
            utt("full", &[0, 1, 2]),
            utt("q1", &[0]),
            utt("q2", &[1, 2]),
            utt("q3", &[2]),
        ]);
        for seed in 0..20 {
            let spec = TaskSpec { language: "xx".into(), k: 1, q: 2, seed };
            if let Ok(task) = sample_task(&c, &spec, 1) {
                assert!(task_is_covered(&c, &task));
                if task.shots == vec![0] {
                    assert_eq!(task.queries.len(), 2);
                }
            }
        }
        let spec = TaskSpec { language: "xx".into(), k: 1, q: 3, seed: 3 };
        let task = sample_task(&c, &spec, 1000).unwrap();
        assert_eq!(task.shots, vec![0]);
    }

    #[test]
    fn uncoverable_queries_are_a_task_error() {
        let c = corpus(vec![utt("a", &[0]), utt("b", &[1])]);
        let spec = TaskSpec { language: "xx".into(), k: 1, q: 1, seed: 0 };
        let err = sample_task(&c, &spec, 50).unwrap_err();
        assert!(matches!(err, XpqError::Task(_)));
        assert!(err.to_string().contains("xx-"));
    }

    #[test]
    fn unknown_language_is_vocabulary_error() {
        let c = corpus(vec![utt("a", &[0])]);
        let spec = TaskSpec { language: "zz".into(), k: 1, q: 1, seed: 0 };
        assert_eq!(sample_task(&c, &spec, 5).unwrap_err().category(), "vocabulary");
    }

    #[test]
    fn zero_step_finetune_keeps_the_init() {
        let c = corpus(vec![utt("a", &[0, 1, 2]), utt("b", &[0, 1])]);
        let set = c.language("xx").unwrap();
        let cb = CodebookParams::init(CodebookConfig { n: 8, heads: 2, d_k: 4, d_v: 3, dim: 2 }, 1)
            .unwrap();
        let dec = DecoderParams::init(6, 2, 2);
        let shots: Vec<&Utterance> = c.utterances.iter().collect();
        let table =
            init_embedding(InitMode::CodebookInit, &cb, &shots, set, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        let cfg = AdaptConfig { finetune_steps: 0, eval_checkpoints: vec![0], ..Default::default() };
        let traj = finetune(&table, &dec, &shots, &cfg).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].table, table);
        assert_eq!(traj[0].decoder, dec);
    }

    #[test]
    fn absent_phoneme_gets_mean_code_row() {
        let c = corpus(vec![utt("a", &[0, 1])]);
        let set = c.language("xx").unwrap();
        let cb = CodebookParams::init(CodebookConfig { n: 8, heads: 2, d_k: 4, d_v: 3, dim: 2 }, 5)
            .unwrap();
        let shots: Vec<&Utterance> = c.utterances.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = init_embedding(InitMode::CodebookInit, &cb, &shots, set, &mut rng).unwrap();
        let (zero_row, _) = cb.forward_matrix(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(table.matrix.row(2), zero_row.row(0));
    }

    #[test]
    fn random_init_is_seeded_and_centered() {
        let c = corpus(vec![utt("a", &[0, 1])]);
        let set = c.language("xx").unwrap();
        let cb = CodebookParams::init(CodebookConfig::default(), 0).unwrap();
        let shots: Vec<&Utterance> = c.utterances.iter().collect();
        let a = init_embedding(InitMode::RandomInit, &cb, &shots, set, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let b = init_embedding(InitMode::RandomInit, &cb, &shots, set, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(a, b);
        let bound = (6.0 / (3.0 + 256.0f64)).sqrt();
        assert!(a.matrix.max_abs() <= bound);
        let mean = a.matrix.as_slice().iter().sum::<f64>() / a.matrix.as_slice().len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn evaluation_basics() {
        let c = corpus(vec![utt("a", &[0, 1]), utt("b", &[2, 1])]);
        let dec = DecoderParams {
            w: Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 }),
            b: Matrix::zeros(1, 2),
        };
        let perfect = EmbeddingTable {
            language: "xx".into(),
            matrix: Matrix::from_fn(3, 2, |p, d| if d == 0 { p as f64 } else { -(p as f64) }),
        };
        let qs: Vec<&Utterance> = c.utterances.iter().collect();
        assert_eq!(evaluate(&perfect, &dec, &qs).unwrap().mean_mse, 0.0);

        let off = EmbeddingTable { language: "xx".into(), matrix: Matrix::zeros(3, 2) };
        let fwd = evaluate(&off, &dec, &qs).unwrap();
        let rev = evaluate(&off, &dec, &[qs[1], qs[0]]).unwrap();
        assert_eq!(fwd.mean_mse, rev.mean_mse);
        // frames: a = (0,0),(1,-1); b = (2,-2),(1,-1) → sse 0+2+8+2 over 8 values
        assert_eq!(fwd.mean_mse, 12.0 / 8.0);
        assert_eq!(fwd.per_utterance, vec![2.0 / 4.0, 10.0 / 4.0]);
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(m, 3.0);
        assert!((s - (14.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn config_checks() {
        let bad = AdaptConfig { eval_checkpoints: vec![0, 600], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig { eval_checkpoints: vec![50, 0], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(AdaptConfig::default().validate().is_ok());
    }
}
