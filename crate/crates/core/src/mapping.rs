//! Cross-language phoneme mapping from codebook attention weights.
//!
//! Each language gets a covering sentence set, its queries go through one
//! codebook forward pass, and phoneme pairs are scored by the head-averaged
//! cosine similarity of their attention rows.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{AttentionRecord, CodebookParams};
use crate::data::{Corpus, Utterance};
use crate::error::{Result, XpqError};
use crate::linalg::dot;
use crate::query::aggregate_queries;
use crate::synth::GroundTruthMap;

pub const DEFAULT_COVERING_TARGET: usize = 256;

/// Corpus indices (ascending) of a covering sentence set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoveringSet {
    pub language: String,
    pub utterances: Vec<usize>,
    /// The minimum greedy cover alone exceeded the requested target.
    pub exceeds_target: bool,
}

/// Greedy set cover over the language's utterances, then a seeded random
/// fill up to `target` (capped at the number of utterances available).
pub fn covering_sentences(
    corpus: &Corpus,
    language: &str,
    target: usize,
    seed: u64,
) -> Result<CoveringSet> {
    let set = corpus.language(language)?;
    let candidates: Vec<(usize, Vec<usize>)> = corpus
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.language == language)
        .map(|(i, u)| (i, u.phonemes_present()))
        .collect();
    let mut seen = vec![false; set.len()];
    candidates
        .iter()
        .for_each(|(_, ps)| ps.iter().for_each(|&p| seen[p] = true));
    if let Some(p) = seen.iter().position(|&s| !s) {
        return Err(XpqError::Coverage(format!(
            "phoneme `{}` occurs in no utterance",
            set.namespaced(p)
        )));
    }

    let mut uncovered: BTreeSet<usize> = (0..set.len()).collect();
    let mut chosen = vec![false; candidates.len()];
    while !uncovered.is_empty() {
        let (best, _) = candidates
            .iter()
            .enumerate()
            .filter(|(ci, _)| !chosen[*ci])
            .map(|(ci, (_, ps))| (ci, ps.iter().filter(|p| uncovered.contains(p)).count()))
            .fold((usize::MAX, 0), |acc, (ci, gain)| if gain > acc.1 { (ci, gain) } else { acc });
        chosen[best] = true;
        candidates[best].1.iter().for_each(|p| {
            uncovered.remove(p);
        });
    }
    let cover_size = chosen.iter().filter(|&&c| c).count();
    let target = target.min(candidates.len());
    let mut rest: Vec<usize> = (0..candidates.len()).filter(|&ci| !chosen[ci]).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for ci in rest.into_iter().take(target.saturating_sub(cover_size)) {
        chosen[ci] = true;
    }
    let utterances: Vec<usize> = candidates
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|((i, _), _)| *i)
        .collect();
    Ok(CoveringSet {
        language: language.to_owned(),
        utterances,
        exceeds_target: cover_size > target,
    })
}

/// Head-averaged cosine similarity of two phonemes' attention rows.
pub fn mapping_score(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(XpqError::Argument(format!(
            "attention records have {} and {} heads",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(XpqError::Argument("attention rows differ in length".into()));
        }
        let norm = (dot(x, x) * dot(y, y)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(XpqError::Numeric("mapping score undefined for a zero attention row".into()));
        }
        total += dot(x, y) / norm;
    }
    Ok(total / a.len() as f64)
}

/// Attention rows of the present phonemes of one language.
#[derive(Debug, Clone)]
pub struct LanguageAttention {
    pub language: String,
    /// Namespaced symbols of present phonemes, canonical order.
    pub phonemes: Vec<String>,
    /// `rows[i][h]` is head `h`'s attention row for `phonemes[i]`.
    pub rows: Vec<Vec<Vec<f64>>>,
}

pub fn language_attention(
    corpus: &Corpus,
    codebook: &CodebookParams,
    covering: &CoveringSet,
) -> Result<LanguageAttention> {
    let set = corpus.language(&covering.language)?;
    let utts: Vec<&Utterance> = covering.utterances.iter().map(|&i| &corpus.utterances[i]).collect();
    let queries = aggregate_queries(&utts, set)?;
    let (_, record): (_, AttentionRecord) = codebook.forward(&queries)?;
    let mut phonemes = Vec::new();
    let mut rows = Vec::new();
    for p in (0..set.len()).filter(|&p| queries.present[p]) {
        phonemes.push(set.namespaced(p));
        rows.push(record.phoneme(p).into_iter().map(<[f64]>::to_vec).collect());
    }
    Ok(LanguageAttention {
        language: covering.language.clone(),
        phonemes,
        rows,
    })
}

/// Symmetric score table over all present phonemes of all languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingScoreTable {
    pub phonemes: Vec<String>,
    pub languages: Vec<String>,
    /// Row-major `N × N`.
    pub scores: Vec<Vec<f64>>,
}

impl MappingScoreTable {
    pub fn build(attention: &[LanguageAttention]) -> Result<Self> {
        let mut phonemes = Vec::new();
        let mut languages = Vec::new();
        let mut rows: Vec<Vec<&[f64]>> = Vec::new();
        for la in attention {
            for (p, r) in la.phonemes.iter().zip(&la.rows) {
                phonemes.push(p.clone());
                languages.push(la.language.clone());
                rows.push(r.iter().map(Vec::as_slice).collect());
            }
        }
        let n = phonemes.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| mapping_score(&rows[i], &rows[j]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scores = vec![vec![0.0; n]; n];
        for i in 0..n {
            scores[i][i] = 1.0;
            for (off, &s) in upper[i].iter().enumerate() {
                let j = i + 1 + off;
                scores[i][j] = s;
                scores[j][i] = s;
            }
        }
        Ok(Self {
            phonemes,
            languages,
            scores,
        })
    }

    pub fn index_of(&self, phoneme: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p == phoneme)
    }

    pub fn score(&self, p: &str, q: &str) -> Option<f64> {
        Some(self.scores[self.index_of(p)?][self.index_of(q)?])
    }

    /// Highest-scoring candidates for `phoneme`; ties keep canonical order.
    pub fn top_k(&self, phoneme: &str, k: usize, cross_language_only: bool) -> Result<Vec<(String, f64)>> {
        let i = self.index_of(phoneme).ok_or_else(|| XpqError::Vocabulary {
            language: phoneme.split('-').next().unwrap_or_default().to_owned(),
            symbol: phoneme.to_owned(),
        })?;
        let mut cands: Vec<usize> = (0..self.phonemes.len())
            .filter(|&j| j != i && (!cross_language_only || self.languages[j] != self.languages[i]))
            .collect();
        cands.sort_by(|&a, &b| self.scores[i][b].total_cmp(&self.scores[i][a]).then(a.cmp(&b)));
        Ok(cands
            .into_iter()
            .take(k)
            .map(|j| (self.phonemes[j].clone(), self.scores[i][j]))
            .collect())
    }

    /// `source_phoneme  rank  target_phoneme  score`, cross-language only.
    pub fn to_tsv(&self, k: usize) -> String {
        let mut out = String::from("source_phoneme\trank\ttarget_phoneme\tscore\n");
        for p in &self.phonemes {
            let top = self.top_k(p, k, true).expect("phoneme is in the table");
            for (rank, (q, s)) in top.iter().enumerate() {
                let _ = writeln!(out, "{p}\t{}\t{q}\t{s}", rank + 1);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingAccuracy {
    /// Phonemes whose prototype is used by a present phoneme of another language.
    pub shared: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Fraction of shared phonemes whose top-1 / top-5 cross-language
/// neighbors include a phoneme with the same ground-truth prototype.
pub fn mapping_accuracy(table: &MappingScoreTable, truth: &GroundTruthMap) -> Result<MappingAccuracy> {
    let proto = |p: &str| {
        truth
            .get(p)
            .copied()
            .ok_or_else(|| XpqError::Argument(format!("no ground truth for `{p}`")))
    };
    let mut shared = 0;
    let mut top1 = 0;
    let mut top5 = 0;
    for (i, p) in table.phonemes.iter().enumerate() {
        let pp = proto(p)?;
        let mut has_partner = false;
        for (j, q) in table.phonemes.iter().enumerate() {
            if table.languages[j] != table.languages[i] && proto(q)? == pp {
                has_partner = true;
                break;
            }
        }
        if !has_partner {
            continue;
        }
        shared += 1;
        let top = table.top_k(p, 5, true)?;
        let hits: Vec<bool> = top.iter().map(|(q, _)| proto(q).map(|x| x == pp)).collect::<Result<_>>()?;
        top1 += usize::from(hits.first().copied().unwrap_or(false));
        top5 += usize::from(hits.iter().any(|&h| h));
    }
    let frac = |c: usize| if shared == 0 { 0.0 } else { c as f64 / shared as f64 };
    Ok(MappingAccuracy {
        shared,
        top1: frac(top1),
        top5: frac(top5),
    })
}

#[derive(Debug, Clone)]
pub struct MappingResult {
    pub covering: Vec<CoveringSet>,
    pub table: MappingScoreTable,
}

/// Covering sets and attention for every corpus language, then scores.
pub fn map_phonemes(
    corpus: &Corpus,
    codebook: &CodebookParams,
    target: usize,
    seed: u64,
) -> Result<MappingResult> {
    let covering = corpus
        .languages
        .iter()
        .map(|l| covering_sentences(corpus, &l.language, target, seed))
        .collect::<Result<Vec<_>>>()?;
    let attention = covering
        .par_iter()
        .map(|c| language_attention(corpus, codebook, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(MappingResult {
        covering,
        table: MappingScoreTable::build(&attention)?,
    })
}
