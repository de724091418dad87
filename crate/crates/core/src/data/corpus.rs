use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Result, XpqError};

use super::alignment::check_segments;
use super::manifest::{CorpusManifest, ManifestEntry, Split};
use super::{
    feature_bytes, load_alignment, load_feature_file, save_phoneme_set, write_alignment,
    write_atomic, FeatureSpec, FrameMatrix, LanguagePhonemeSet, PhonemeSegment,
};

/// Manifest path and the directory its entries are relative to, for
/// either a manifest file or a corpus directory.
pub fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    let manifest = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    (manifest, base)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub features: FrameMatrix,
    pub alignment: Vec<PhonemeSegment>,
    pub speaker: Option<String>,
    pub split: Split,
}

impl Utterance {
    pub fn validate(&self, set: &LanguagePhonemeSet, dim: usize) -> Result<()> {
        if self.language != set.language {
            return Err(XpqError::Validation(format!(
                "utterance `{}` is `{}`, expected `{}`",
                self.id, self.language, set.language
            )));
        }
        if self.features.dim() != dim {
            return Err(XpqError::Validation(format!(
                "utterance `{}` has dim {}, corpus dim is {dim}",
                self.id,
                self.features.dim()
            )));
        }
        if let Some(s) = self.alignment.iter().find(|s| s.phoneme >= set.len()) {
            return Err(XpqError::Validation(format!(
                "utterance `{}` references phoneme index {} outside a set of {}",
                self.id,
                s.phoneme,
                set.len()
            )));
        }
        check_segments(&self.alignment, Some(self.features.frames()))
            .map_err(|e| XpqError::Validation(format!("utterance `{}`: {e}", self.id)))
    }

    /// Distinct phoneme indices in this utterance, ascending.
    pub fn phonemes_present(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.alignment.iter().map(|s| s.phoneme).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn covered_frames(&self) -> usize {
        self.alignment.iter().map(PhonemeSegment::len).sum()
    }
}

/// A fully loaded, validated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_spec: FeatureSpec,
    pub languages: Vec<LanguagePhonemeSet>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(
        feature_spec: FeatureSpec,
        languages: Vec<LanguagePhonemeSet>,
        utterances: Vec<Utterance>,
    ) -> Result<Self> {
        feature_spec.validate()?;
        let mut names = HashSet::new();
        for l in &languages {
            if !names.insert(l.language.clone()) {
                return Err(XpqError::Validation(format!("language `{}` declared twice", l.language)));
            }
        }
        let corpus = Self {
            feature_spec,
            languages,
            utterances,
        };
        let mut ids = HashSet::new();
        for u in &corpus.utterances {
            if !ids.insert(u.id.as_str()) {
                return Err(XpqError::Validation(format!("duplicate utterance id `{}`", u.id)));
            }
            u.validate(corpus.language(&u.language)?, feature_spec.dim)?;
        }
        Ok(corpus)
    }

    /// Load a manifest and every file it references. Accepts either the
    /// manifest path or the directory containing `manifest.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, base) = manifest_location(path.as_ref());
        let manifest = CorpusManifest::load(&manifest_path)?;
        let utterances = manifest
            .entries
            .par_iter()
            .map(|e| {
                let set = manifest
                    .language(&e.language)
                    .ok_or_else(|| XpqError::UnknownLanguage(e.language.clone()))?;
                Ok(Utterance {
                    id: e.id.clone(),
                    language: e.language.clone(),
                    features: load_feature_file(base.join(&e.features))?,
                    alignment: load_alignment(base.join(&e.alignment), set)?,
                    speaker: None,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.feature_spec, manifest.languages, utterances)
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            feature_spec: self.feature_spec,
            languages: self.languages.clone(),
            entries: self
                .utterances
                .iter()
                .map(|u| ManifestEntry {
                    id: u.id.clone(),
                    language: u.language.clone(),
                    features: format!("features/{}.xpqf", u.id),
                    alignment: format!("alignments/{}.tsv", u.id),
                    split: u.split,
                })
                .collect(),
        }
    }

    /// Write features, alignments, phoneme sets and `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["features", "alignments", "phonemes"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| XpqError::io(&p, e))?;
        }
        for set in &self.languages {
            save_phoneme_set(set, dir.join("phonemes").join(format!("{}.txt", set.language)))?;
        }
        let manifest = self.manifest();
        self.utterances
            .par_iter()
            .zip(manifest.entries.par_iter())
            .try_for_each(|(u, entry)| {
                let set = self.language(&u.language)?;
                let fpath = dir.join(&entry.features);
                std::fs::write(&fpath, feature_bytes(&u.features))
                    .map_err(|e| XpqError::io(&fpath, e))?;
                let apath = dir.join(&entry.alignment);
                std::fs::write(&apath, write_alignment(&u.alignment, set))
                    .map_err(|e| XpqError::io(&apath, e))
            })?;
        write_atomic(&dir.join("manifest.json"), manifest.to_json().as_bytes())
    }

    pub fn language(&self, id: &str) -> Result<&LanguagePhonemeSet> {
        self.languages
            .iter()
            .find(|l| l.language == id)
            .ok_or_else(|| XpqError::UnknownLanguage(id.to_string()))
    }

    /// Utterances of `language` whose split satisfies `keep`, in corpus order.
    pub fn utterances_of(&self, language: &str, keep: impl Fn(Split) -> bool) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.language == language && keep(u.split))
            .collect()
    }
}
