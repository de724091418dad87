//! Multilingual episodic training.
//!
//! Each step draws a batch from a single language and splits it in two: the
//! generation group produces phoneme queries and, through the codebook, an
//! embedding table; the loss group is reconstructed from that table by the
//! surrogate decoder. Every phoneme in the loss group must occur in the
//! generation group. Gradients flow into the decoder and all codebook
//! parameters, and Adam applies the warmup/decay schedule.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{CodebookConfig, CodebookGrads, CodebookParams};
use crate::data::{write_atomic, Corpus, LanguagePhonemeSet, Split, Utterance};
use crate::decoder::{DecoderGrads, DecoderParams, FrameStats};
use crate::error::{Result, XpqError};
use crate::optim::{scheduled_lr, Adam, AdamConfig};
use crate::query::aggregate_queries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gen_group_size: usize,
    pub loss_group_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Per-step multiplicative decay after warmup.
    pub decay_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Random resplits tried before the greedy fallback.
    pub coverage_resample_limit: usize,
    /// Fresh batches tried when a batch admits no covering split.
    pub batch_resample_limit: usize,
    pub checkpoint_every: u64,
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 40,
            gen_group_size: 32,
            loss_group_size: 8,
            lr: 0.001,
            warmup_steps: 200,
            total_steps: 2000,
            decay_rate: 0.999,
            adam: AdamConfig::default(),
            seed: 0,
            coverage_resample_limit: 100,
            batch_resample_limit: 100,
            checkpoint_every: 500,
            val_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(XpqError::Config(m.to_string()));
        if self.gen_group_size == 0 || self.loss_group_size == 0 {
            return bad("group sizes must be positive");
        }
        if self.gen_group_size + self.loss_group_size != self.batch_size {
            return bad("gen_group_size + loss_group_size must equal batch_size");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if self.coverage_resample_limit == 0 || self.batch_resample_limit == 0 {
            return bad("resample limits must be positive");
        }
        Ok(())
    }

    /// Hash of everything that affects the trajectory. Step budgets and
    /// logging cadence are excluded so a run can be extended on resume.
    pub fn trajectory_hash(&self, codebook: &CodebookConfig) -> String {
        let mut c = *self;
        c.total_steps = 0;
        c.checkpoint_every = 0;
        c.val_every = 0;
        let text = serde_json::to_string(&(c, codebook)).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Every phoneme in `loss` occurs somewhere in `gen`.
pub fn coverage_holds(gen: &[&Utterance], loss: &[&Utterance]) -> bool {
    let covered: BTreeSet<usize> = gen
        .iter()
        .flat_map(|u| u.alignment.iter().map(|s| s.phoneme))
        .collect();
    loss.iter()
        .flat_map(|u| u.alignment.iter())
        .all(|s| covered.contains(&s.phoneme))
}

fn covers(present: &[Vec<usize>], gen: &[usize], loss: &[usize], m: usize) -> bool {
    let mut seen = vec![false; m];
    for &i in gen {
        present[i].iter().for_each(|&p| seen[p] = true);
    }
    loss.iter().all(|&i| present[i].iter().all(|&p| seen[p]))
}

/// Positions into the batch for each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSplit {
    pub gen: Vec<usize>,
    pub loss: Vec<usize>,
}

/// Split `batch` into a generation group of `gen_size` and a loss group
/// holding the rest, such that the generation group covers every phoneme of
/// the loss group. Random splits are tried up to `limit` times; after that a
/// greedy split places utterances carrying the rarest phonemes first.
pub fn split_with_coverage(
    batch: &[&Utterance],
    gen_size: usize,
    rng: &mut impl Rng,
    limit: usize,
) -> Result<BatchSplit> {
    if gen_size == 0 || gen_size >= batch.len() {
        return Err(XpqError::Argument(format!(
            "cannot split {} utterances into a generation group of {gen_size} and a non-empty loss group",
            batch.len()
        )));
    }
    let present: Vec<Vec<usize>> = batch.iter().map(|u| u.phonemes_present()).collect();
    let m = present.iter().flatten().max().map_or(0, |&p| p + 1);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..limit {
        order.shuffle(rng);
        let (gen, loss) = order.split_at(gen_size);
        if covers(&present, gen, loss, m) {
            return Ok(BatchSplit {
                gen: gen.to_vec(),
                loss: loss.to_vec(),
            });
        }
    }

    let mut freq = vec![0usize; m];
    present.iter().flatten().for_each(|&p| freq[p] += 1);
    let rarity = |i: usize| present[i].iter().map(|&p| freq[p]).min().unwrap_or(usize::MAX);
    order.shuffle(rng);
    order.sort_by_key(|&i| rarity(i));
    let (gen, loss) = order.split_at(gen_size);
    if covers(&present, gen, loss, m) {
        return Ok(BatchSplit {
            gen: gen.to_vec(),
            loss: loss.to_vec(),
        });
    }
    Err(XpqError::Coverage(format!(
        "no split of {} utterances into {gen_size}/{} covers the loss group",
        batch.len(),
        batch.len() - gen_size
    )))
}

/// Languages with at least `batch_size` training utterances, with the
/// corpus indices of those utterances.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    pub languages: Vec<(String, Vec<usize>)>,
}

impl TrainingPool {
    pub fn new(corpus: &Corpus, batch_size: usize) -> Result<Self> {
        let languages: Vec<(String, Vec<usize>)> = corpus
            .languages
            .iter()
            .map(|l| {
                let idx: Vec<usize> = corpus
                    .utterances
                    .iter()
                    .enumerate()
                    .filter(|(_, u)| u.language == l.language && u.split == Split::Train)
                    .map(|(i, _)| i)
                    .collect();
                (l.language.clone(), idx)
            })
            .filter(|(_, idx)| idx.len() >= batch_size)
            .collect();
        if languages.is_empty() {
            return Err(XpqError::Config(format!(
                "no training language has {batch_size} or more training utterances"
            )));
        }
        Ok(Self { languages })
    }

    /// A uniformly chosen eligible language and `batch_size` distinct
    /// utterance indices from it.
    pub fn sample_language_batch(&self, batch_size: usize, rng: &mut impl Rng) -> (usize, Vec<usize>) {
        let li = rng.random_range(0..self.languages.len());
        let pool = &self.languages[li].1;
        let picks = index::sample(rng, pool.len(), batch_size)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        (li, picks)
    }
}

#[derive(Debug, Clone)]
pub struct StepGrads {
    pub loss: f64,
    pub codebook: CodebookGrads,
    pub decoder: DecoderGrads,
}

/// Loss and exact gradients of one episode: queries from `gen`, embedding
/// table from the codebook, reconstruction loss on `loss`.
pub fn objective_and_grads(
    codebook: &CodebookParams,
    decoder: &DecoderParams,
    set: &LanguagePhonemeSet,
    gen: &[&Utterance],
    loss: &[&Utterance],
) -> Result<StepGrads> {
    let queries = aggregate_queries(gen, set)?;
    let (embedding, _) = codebook.forward_matrix(&queries.matrix)?;
    let stats = FrameStats::from_utterances(loss, set.len(), decoder.dim())?;
    let lg = stats.loss_and_grads(decoder, &embedding)?;
    let cg = codebook.backward(&queries.matrix, &lg.table)?;
    Ok(StepGrads {
        loss: lg.loss,
        codebook: cg,
        decoder: lg.decoder,
    })
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub codebook: CodebookParams,
    pub decoder: DecoderParams,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(codebook_config: CodebookConfig, config: &TrainConfig) -> Result<Self> {
        let codebook = CodebookParams::init(codebook_config, config.seed)?;
        let decoder = DecoderParams::init(
            codebook_config.embedding_dim(),
            codebook_config.dim,
            config.seed ^ 0x5EED_DEC0_DE00_0001,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let tensors: Vec<_> = codebook.tensors().into_iter().chain(decoder.tensors()).collect();
        let adam = Adam::new(config.adam, &tensors);
        Ok(Self {
            codebook,
            decoder,
            adam,
            step: 0,
            rng,
        })
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.codebook
            .tensors()
            .into_iter()
            .chain(self.decoder.tensors())
            .map(|t| t.shape())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub language: String,
    /// Corpus indices of the generation and loss groups.
    pub gen: Vec<usize>,
    pub loss_group: Vec<usize>,
}

/// One optimization step on a single-language `batch`. Returns the loss
/// before the update and the positions of the two groups.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Utterance],
    set: &LanguagePhonemeSet,
    config: &TrainConfig,
) -> Result<(f64, f64, BatchSplit)> {
    let split = split_with_coverage(
        batch,
        config.gen_group_size,
        &mut state.rng,
        config.coverage_resample_limit,
    )?;
    let gen: Vec<&Utterance> = split.gen.iter().map(|&i| batch[i]).collect();
    let loss: Vec<&Utterance> = split.loss.iter().map(|&i| batch[i]).collect();
    if !coverage_holds(&gen, &loss) {
        return Err(XpqError::Coverage("split violates phoneme coverage".into()));
    }
    let grads = objective_and_grads(&state.codebook, &state.decoder, set, &gen, &loss)?;
    if !grads.loss.is_finite() {
        return Err(XpqError::Numeric(format!("loss is {}", grads.loss)));
    }
    let lr = scheduled_lr(state.step + 1, config.lr, config.warmup_steps, config.decay_rate);
    let grad_refs: Vec<_> = grads
        .codebook
        .tensors()
        .into_iter()
        .chain(grads.decoder.tensors())
        .collect();
    let params: Vec<_> = state
        .codebook
        .tensors_mut()
        .into_iter()
        .chain(state.decoder.tensors_mut())
        .collect();
    state.adam.update(params, &grad_refs, lr)?;
    // parameters live at binary32 precision so checkpoints are lossless
    for t in state
        .codebook
        .tensors_mut()
        .into_iter()
        .chain(state.decoder.tensors_mut())
    {
        t.round_to_f32();
    }
    state.step += 1;
    Ok((grads.loss, lr, split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
    pub rng_state: String,
    pub codebook: CodebookConfig,
    pub train: TrainConfig,
}

fn encode_rng(rng: &ChaCha8Rng) -> String {
    let mut bytes = rng.get_seed().to_vec();
    bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    hex::encode(bytes)
}

fn decode_rng(text: &str) -> Result<ChaCha8Rng> {
    let bytes = hex::decode(text).map_err(|e| XpqError::Format(format!("rng state: {e}")))?;
    if bytes.len() != 32 + 8 + 16 {
        return Err(XpqError::Format("rng state has the wrong length".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(rng)
}

/// Write `codebook.bin`, `decoder.bin`, `optim.bin` and `meta.json` into `dir`.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| XpqError::io(dir, e))?;
    let meta = CheckpointMeta {
        step: state.step,
        config_hash: config.trajectory_hash(&state.codebook.config),
        rng_state: encode_rng(&state.rng),
        codebook: state.codebook.config,
        train: *config,
    };
    state.codebook.save(dir.join("codebook.bin"))?;
    state.decoder.save(dir.join("decoder.bin"))?;
    write_atomic(&dir.join("optim.bin"), &state.adam.to_bytes())?;
    let meta = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join("meta.json"), meta.as_bytes())
}

pub fn load_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| XpqError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| XpqError::json(path.display().to_string(), e))
}

/// Restore a full training state. The stored configuration is used for the
/// optimizer hyperparameters.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainState, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta = load_meta(dir)?;
    let codebook = CodebookParams::load(dir.join("codebook.bin"))?;
    let decoder = DecoderParams::load(dir.join("decoder.bin"))?;
    if codebook.config != meta.codebook {
        return Err(XpqError::Format("codebook.bin disagrees with meta.json".into()));
    }
    if decoder.embedding_dim() != codebook.config.embedding_dim() || decoder.dim() != codebook.config.dim
    {
        return Err(XpqError::Format("decoder.bin does not fit the codebook".into()));
    }
    let mut state = TrainState {
        codebook,
        decoder,
        adam: Adam::new(meta.train.adam, &[]),
        step: meta.step,
        rng: decode_rng(&meta.rng_state)?,
    };
    let path = dir.join("optim.bin");
    let bytes = std::fs::read(&path).map_err(|e| XpqError::io(&path, e))?;
    state.adam = Adam::from_bytes(&bytes, meta.train.adam, &state.shapes())?;
    if state.adam.step != meta.step {
        return Err(XpqError::Format("optimizer step disagrees with meta.json".into()));
    }
    Ok((state, meta))
}

/// Load only the trained model pieces.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(CodebookParams, DecoderParams)> {
    let dir = dir.as_ref();
    let codebook = CodebookParams::load(dir.join("codebook.bin"))?;
    let decoder = DecoderParams::load(dir.join("decoder.bin"))?;
    if decoder.embedding_dim() != codebook.config.embedding_dim() {
        return Err(XpqError::Format("decoder.bin does not fit the codebook".into()));
    }
    Ok((codebook, decoder))
}

pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: TrainConfig,
    pool: TrainingPool,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, codebook_config: CodebookConfig, config: TrainConfig) -> Result<Self> {
        let state = TrainState::init(codebook_config, &config)?;
        Self::with_state(corpus, config, state)
    }

    pub fn with_state(corpus: &'a Corpus, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if state.codebook.config.dim != corpus.feature_spec.dim {
            return Err(XpqError::Config(format!(
                "codebook dim {} does not match corpus dim {}",
                state.codebook.config.dim, corpus.feature_spec.dim
            )));
        }
        let pool = TrainingPool::new(corpus, config.batch_size)?;
        Ok(Self {
            corpus,
            config,
            pool,
            state,
        })
    }

    /// Continue from a checkpoint directory; `config` must describe the same
    /// trajectory as the one that produced it.
    pub fn resume(corpus: &'a Corpus, config: TrainConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let (state, meta) = load_checkpoint(dir)?;
        if meta.config_hash != config.trajectory_hash(&state.codebook.config) {
            return Err(XpqError::Config(
                "checkpoint was produced with a different training configuration".into(),
            ));
        }
        Self::with_state(corpus, config, state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        for _ in 0..self.config.batch_resample_limit {
            let (li, picks) = self
                .pool
                .sample_language_batch(self.config.batch_size, &mut self.state.rng);
            let language = self.pool.languages[li].0.clone();
            let set = self.corpus.language(&language)?;
            let batch: Vec<&Utterance> = picks.iter().map(|&i| &self.corpus.utterances[i]).collect();
            match train_step(&mut self.state, &batch, set, &self.config) {
                Ok((loss, lr, split)) => {
                    return Ok(StepRecord {
                        step: self.state.step,
                        lr,
                        loss,
                        language,
                        gen: split.gen.iter().map(|&i| picks[i]).collect(),
                        loss_group: split.loss.iter().map(|&i| picks[i]).collect(),
                    })
                }
                Err(XpqError::Coverage(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(XpqError::Coverage(format!(
            "no coverable batch in {} attempts",
            self.config.batch_resample_limit
        )))
    }

    /// Validation MSE per training language: table from all training
    /// utterances, loss on the validation split. Reported only.
    pub fn validation_losses(&self) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for (language, _) in &self.pool.languages {
            let set = self.corpus.language(language)?;
            let train = self.corpus.utterances_of(language, |s| s == Split::Train);
            let val = self.corpus.utterances_of(language, |s| s == Split::Val);
            if val.is_empty() {
                continue;
            }
            let queries = aggregate_queries(&train, set)?;
            let (emb, _) = self.state.codebook.forward_matrix(&queries.matrix)?;
            let stats = FrameStats::from_utterances(&val, set.len(), self.state.decoder.dim())?;
            out.push((language.clone(), stats.mse(&self.state.decoder, &emb)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Keep only the header and rows with `step <= keep` in a loss/val log.
fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| XpqError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| XpqError::io(path, e))?;
        let step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if step.is_none_or(|s| s <= keep) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| XpqError::io(path, e))
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<File> {
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| XpqError::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| XpqError::io(path, e))?;
    }
    Ok(f)
}

/// Train to `config.total_steps`, writing `loss.tsv`, `val.tsv` and the
/// checkpoint directory under `out_dir`. With `resume`, continue from
/// `out_dir/checkpoint`.
pub fn run_training(
    corpus: &Corpus,
    codebook_config: CodebookConfig,
    config: TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<TrainSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| XpqError::io(out_dir, e))?;
    let ckpt = out_dir.join("checkpoint");
    let loss_path = out_dir.join("loss.tsv");
    let val_path = out_dir.join("val.tsv");

    let mut trainer = if resume {
        let t = Trainer::resume(corpus, config, &ckpt)?;
        truncate_log(&loss_path, t.state.step)?;
        truncate_log(&val_path, t.state.step)?;
        t
    } else {
        Trainer::new(corpus, codebook_config, config)?
    };
    let mut loss_log = open_log(&loss_path, "step\tlr\tloss", resume)?;
    let mut val_log = open_log(&val_path, "step\tlanguage\tval_mse", resume)?;

    let mut final_loss = None;
    while trainer.state.step < config.total_steps {
        let rec = trainer.step()?;
        writeln!(loss_log, "{}\t{}\t{}", rec.step, rec.lr, rec.loss)
            .and_then(|_| loss_log.flush())
            .map_err(|e| XpqError::io(&loss_path, e))?;
        final_loss = Some(rec.loss);
        let done = rec.step == config.total_steps;
        if config.val_every > 0 && (rec.step % config.val_every == 0 || done) {
            for (lang, mse) in trainer.validation_losses()? {
                writeln!(val_log, "{}\t{lang}\t{mse}", rec.step)
                    .map_err(|e| XpqError::io(&val_path, e))?;
            }
            val_log.flush().map_err(|e| XpqError::io(&val_path, e))?;
        }
        if done || (config.checkpoint_every > 0 && rec.step % config.checkpoint_every == 0) {
            save_checkpoint(&trainer.state, &config, &ckpt)?;
        }
    }
    if !ckpt.join("meta.json").exists() || load_meta(&ckpt)?.step != trainer.state.step {
        save_checkpoint(&trainer.state, &config, &ckpt)?;
    }
    Ok(TrainSummary {
        final_step: trainer.state.step,
        final_loss,
        checkpoint: ckpt,
    })
}
