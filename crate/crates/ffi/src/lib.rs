//! C ABI over `xpq-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`XpqStatus`]; on failure, [`xpq_last_error`] describes the error on the
//! calling thread. Outputs are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xpq_core::codebook::{AttentionRecord, CodebookConfig, CodebookParams, EmbeddingTable};
use xpq_core::config::RunConfig;
use xpq_core::data::Corpus;
use xpq_core::decoder::DecoderParams;
use xpq_core::linalg::Matrix;
use xpq_core::mapping::mapping_score;
use xpq_core::query::{aggregate_queries, QueryMatrix};
use xpq_core::synth::{generate_corpus, synthesize};
use xpq_core::trainer::{load_model, run_training, TrainConfig, TrainState};
use xpq_core::XpqError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XpqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    OutOfRange = 4,
    Io = 10,
    Format = 11,
    Truncation = 12,
    Validation = 13,
    Vocabulary = 14,
    Config = 15,
    Coverage = 16,
    Task = 17,
    Argument = 18,
    Numeric = 19,
    Panic = 99,
}

impl From<&XpqError> for XpqStatus {
    fn from(e: &XpqError) -> Self {
        match e.category() {
            "io" => XpqStatus::Io,
            "format" => XpqStatus::Format,
            "truncation" => XpqStatus::Truncation,
            "validation" => XpqStatus::Validation,
            "vocabulary" => XpqStatus::Vocabulary,
            "config" => XpqStatus::Config,
            "coverage" => XpqStatus::Coverage,
            "task" => XpqStatus::Task,
            "numeric" => XpqStatus::Numeric,
            _ => XpqStatus::Argument,
        }
    }
}

/// A loaded or generated corpus.
pub struct XpqCorpus {
    corpus: Corpus,
}

/// A codebook together with its surrogate decoder.
pub struct XpqModel {
    codebook: CodebookParams,
    decoder: DecoderParams,
}

/// A generated phoneme embedding table and its attention weights.
pub struct XpqEmbedding {
    table: EmbeddingTable,
    attention: AttentionRecord,
    present: Vec<bool>,
}

struct Failure {
    status: XpqStatus,
    message: String,
}

impl From<XpqError> for Failure {
    fn from(e: XpqError) -> Self {
        Failure {
            status: XpqStatus::from(&e),
            message: format!("{}: {e}", e.category()),
        }
    }
}

fn fail(status: XpqStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> XpqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            XpqStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            XpqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(XpqStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(XpqStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(XpqStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(XpqStatus::NullPointer, format!("`{name}` is null")));
    }
    out.write(value);
    Ok(())
}

fn check_out<T>(out: *mut T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(fail(XpqStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn run_config(json: Option<&str>) -> Result<RunConfig, Failure> {
    let cfg = match json {
        Some(text) => RunConfig::from_json(text, "config")?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn copy_into(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(fail(XpqStatus::NullPointer, "`buf` is null"));
    }
    if len < values.len() {
        return Err(fail(
            XpqStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn xpq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xpq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a corpus from a directory or manifest path.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_load(path: *const c_char, out: *mut *mut XpqCorpus) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let corpus = Corpus::load(str_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(XpqCorpus { corpus })), "out")
    })
}

/// Generate a synthetic corpus from the `synth` section of a JSON run
/// configuration (defaults when `config_json` is null). When `out_dir` is
/// not null the corpus and its ground truth are also written there.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_generate(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut XpqCorpus,
) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg = run_config(opt_str_arg(config_json, "config_json")?)?;
        let synth = match opt_str_arg(out_dir, "out_dir")? {
            Some(dir) => generate_corpus(&cfg.synth, dir)?,
            None => synthesize(&cfg.synth)?,
        };
        write_out(out, Box::into_raw(Box::new(XpqCorpus { corpus: synth.corpus })), "out")
    })
}

/// # Safety
/// `corpus` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_free(corpus: *mut XpqCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_utterance_count(corpus: *const XpqCorpus, out: *mut usize) -> XpqStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        write_out(out, c.corpus.utterances.len(), "out")
    })
}

/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_language_count(corpus: *const XpqCorpus, out: *mut usize) -> XpqStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        write_out(out, c.corpus.languages.len(), "out")
    })
}

/// Copy the id of language `index` into `buf` (NUL-terminated). `needed`,
/// when not null, receives the required buffer size including the NUL.
///
/// # Safety
/// `corpus` must be a live handle; `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_language_id(
    corpus: *const XpqCorpus,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> XpqStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        let lang = c
            .corpus
            .languages
            .get(index)
            .ok_or_else(|| fail(XpqStatus::OutOfRange, format!("no language at index {index}")))?;
        let bytes = lang.language.as_bytes();
        if !needed.is_null() {
            needed.write(bytes.len() + 1);
        }
        if buf.is_null() {
            return Err(fail(XpqStatus::NullPointer, "`buf` is null"));
        }
        if buf_len < bytes.len() + 1 {
            return Err(fail(XpqStatus::BufferTooSmall, format!("{} bytes needed", bytes.len() + 1)));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        buf.add(bytes.len()).write(0);
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle; `language` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_corpus_phoneme_count(
    corpus: *const XpqCorpus,
    language: *const c_char,
    out: *mut usize,
) -> XpqStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        let set = c.corpus.language(str_arg(language, "language")?)?;
        write_out(out, set.len(), "out")
    })
}

/// Fresh, untrained model with the given codebook shape.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_model_init(
    n: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
    dim: usize,
    seed: u64,
    out: *mut *mut XpqModel,
) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg = CodebookConfig { n, heads, d_k, d_v, dim };
        let state = TrainState::init(cfg, &TrainConfig { seed, ..TrainConfig::default() })?;
        let model = XpqModel {
            codebook: state.codebook,
            decoder: state.decoder,
        };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Load a model from a checkpoint directory.
///
/// # Safety
/// `checkpoint_dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_model_load(checkpoint_dir: *const c_char, out: *mut *mut XpqModel) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let (codebook, decoder) = load_model(str_arg(checkpoint_dir, "checkpoint_dir")?)?;
        write_out(out, Box::into_raw(Box::new(XpqModel { codebook, decoder })), "out")
    })
}

/// Write `codebook.bin` and `decoder.bin` into `dir`, creating it if needed.
/// The result loads with [`xpq_model_load`].
///
/// # Safety
/// `model` must be live; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xpq_model_save(model: *const XpqModel, dir: *const c_char) -> XpqStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let dir = Path::new(str_arg(dir, "dir")?);
        std::fs::create_dir_all(dir).map_err(|e| XpqError::io(dir, e))?;
        m.codebook.save(dir.join("codebook.bin"))?;
        m.decoder.save(dir.join("decoder.bin"))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xpq_model_free(model: *mut XpqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of generated embeddings (heads × d_v).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_model_embedding_dim(model: *const XpqModel, out: *mut usize) -> XpqStatus {
    guard(|| {
        let m = handle(model, "model")?;
        write_out(out, m.codebook.config.embedding_dim(), "out")
    })
}

/// Train on `corpus` with the JSON run configuration (defaults when null),
/// writing logs and the checkpoint under `out_dir`. `final_loss`, when not
/// null, receives the last step's loss (NaN if no step ran).
///
/// # Safety
/// `corpus` must be a live handle; strings NUL-terminated or null as noted.
#[no_mangle]
pub unsafe extern "C" fn xpq_train(
    corpus: *const XpqCorpus,
    config_json: *const c_char,
    out_dir: *const c_char,
    resume: bool,
    final_loss: *mut f64,
) -> XpqStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        let cfg = run_config(opt_str_arg(config_json, "config_json")?)?;
        let dir = str_arg(out_dir, "out_dir")?;
        let summary = run_training(&c.corpus, cfg.codebook, cfg.train, Path::new(dir), resume)?;
        if !final_loss.is_null() {
            final_loss.write(summary.final_loss.unwrap_or(f64::NAN));
        }
        Ok(())
    })
}

fn attention_rows(e: &XpqEmbedding, i: usize) -> Result<Vec<&[f64]>, Failure> {
    if i < e.table.matrix.rows() {
        Ok(e.attention.phoneme(i))
    } else {
        Err(fail(XpqStatus::OutOfRange, format!("no phoneme row {i}")))
    }
}

fn embed(model: &XpqModel, queries: &QueryMatrix) -> Result<XpqEmbedding, Failure> {
    let (table, attention) = model.codebook.forward(queries)?;
    Ok(XpqEmbedding {
        table,
        attention,
        present: queries.present.clone(),
    })
}

/// Embedding table for `language`, with queries pooled over all of its
/// utterances in the corpus.
///
/// # Safety
/// Handles must be live; `language` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_embed_language(
    model: *const XpqModel,
    corpus: *const XpqCorpus,
    language: *const c_char,
    out: *mut *mut XpqEmbedding,
) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        let lang = str_arg(language, "language")?;
        let set = c.corpus.language(lang)?;
        let utts = c.corpus.utterances_of(lang, |_| true);
        let queries = aggregate_queries(&utts, set)?;
        let e = embed(m, &queries)?;
        write_out(out, Box::into_raw(Box::new(e)), "out")
    })
}

/// Embedding table for a caller-supplied `rows × cols` row-major query
/// matrix. All-zero rows count as absent phonemes.
///
/// # Safety
/// `model` must be live; `queries` must hold `rows * cols` floats.
#[no_mangle]
pub unsafe extern "C" fn xpq_embed_queries(
    model: *const XpqModel,
    queries: *const f32,
    rows: usize,
    cols: usize,
    out: *mut *mut XpqEmbedding,
) -> XpqStatus {
    guard(|| {
        check_out(out, "out")?;
        let m = handle(model, "model")?;
        if queries.is_null() {
            return Err(fail(XpqStatus::NullPointer, "`queries` is null"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(XpqStatus::Argument, "query matrix too large"))?;
        let values: Vec<f64> = std::slice::from_raw_parts(queries, len)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let matrix = Matrix::from_vec(rows, cols, values)?;
        let present = (0..rows).map(|r| matrix.row(r).iter().any(|&v| v != 0.0)).collect();
        let qm = QueryMatrix {
            language: String::new(),
            matrix,
            present,
        };
        let e = embed(m, &qm)?;
        write_out(out, Box::into_raw(Box::new(e)), "out")
    })
}

/// # Safety
/// `embedding` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xpq_embedding_free(embedding: *mut XpqEmbedding) {
    if !embedding.is_null() {
        drop(Box::from_raw(embedding));
    }
}

/// # Safety
/// `embedding` must be live; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_embedding_shape(
    embedding: *const XpqEmbedding,
    rows: *mut usize,
    cols: *mut usize,
) -> XpqStatus {
    guard(|| {
        let e = handle(embedding, "embedding")?;
        check_out(rows, "rows")?;
        check_out(cols, "cols")?;
        write_out(rows, e.table.matrix.rows(), "rows")?;
        write_out(cols, e.table.matrix.cols(), "cols")
    })
}

/// Copy the table, row-major, into `buf` of `len` doubles.
///
/// # Safety
/// `embedding` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn xpq_embedding_copy(embedding: *const XpqEmbedding, buf: *mut f64, len: usize) -> XpqStatus {
    guard(|| {
        let e = handle(embedding, "embedding")?;
        copy_into(e.table.matrix.as_slice(), buf, len)
    })
}

/// Whether phoneme row `phoneme` had a nonzero query.
///
/// # Safety
/// `embedding` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_embedding_present(
    embedding: *const XpqEmbedding,
    phoneme: usize,
    out: *mut bool,
) -> XpqStatus {
    guard(|| {
        let e = handle(embedding, "embedding")?;
        let p = *e
            .present
            .get(phoneme)
            .ok_or_else(|| fail(XpqStatus::OutOfRange, format!("no phoneme row {phoneme}")))?;
        write_out(out, p, "out")
    })
}

/// Copy head `head`'s attention row for `phoneme` (n doubles) into `buf`.
///
/// # Safety
/// `embedding` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn xpq_embedding_attention(
    embedding: *const XpqEmbedding,
    phoneme: usize,
    head: usize,
    buf: *mut f64,
    len: usize,
) -> XpqStatus {
    guard(|| {
        let e = handle(embedding, "embedding")?;
        let w = e
            .attention
            .weights
            .get(head)
            .ok_or_else(|| fail(XpqStatus::OutOfRange, format!("no head {head}")))?;
        if phoneme >= w.rows() {
            return Err(fail(XpqStatus::OutOfRange, format!("no phoneme row {phoneme}")));
        }
        copy_into(w.row(phoneme), buf, len)
    })
}

/// Head-averaged cosine similarity between the attention rows of phoneme
/// `p` in `a` and phoneme `q` in `b`.
///
/// # Safety
/// Both embeddings must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xpq_mapping_score(
    a: *const XpqEmbedding,
    p: usize,
    b: *const XpqEmbedding,
    q: usize,
    out: *mut f64,
) -> XpqStatus {
    guard(|| {
        let a = handle(a, "a")?;
        let b = handle(b, "b")?;
        let score = mapping_score(&attention_rows(a, p)?, &attention_rows(b, q)?)?;
        write_out(out, score, "out")
    })
}
