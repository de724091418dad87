//! Core domain types and the on-disk formats for features, alignments,
//! phoneme inventories and corpus manifests.

mod alignment;
mod corpus;
mod features;
mod manifest;
mod phonemes;

pub use alignment::{load_alignment, parse_alignment, save_alignment, write_alignment, PhonemeSegment};
pub use corpus::{manifest_location, Corpus, Utterance};
pub use features::{
    feature_bytes, load_feature_file, read_feature_bytes, save_feature_file,
    FeatureSpec, FrameMatrix,
};
pub use manifest::{
    validate_corpus, CorpusManifest, ManifestEntry, Split, ValidationIssue, ValidationReport,
};
pub use phonemes::{load_phoneme_set, namespaced, save_phoneme_set, LanguagePhonemeSet};

use std::io::Write;
use std::path::Path;

use crate::error::{Result, XpqError};

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| XpqError::Argument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| XpqError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| XpqError::io(&tmp, e))?;
        f.sync_all().map_err(|e| XpqError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| XpqError::io(path, e))
}
