use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XpqError};

use super::alignment::check_segments;
use super::{load_alignment, load_feature_file, FeatureSpec, LanguagePhonemeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub language: String,
    /// Feature file path, relative to the manifest directory.
    pub features: String,
    /// Alignment file path, relative to the manifest directory.
    pub alignment: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub feature_spec: FeatureSpec,
    pub languages: Vec<LanguagePhonemeSet>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| XpqError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| XpqError::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn language(&self, id: &str) -> Option<&LanguagePhonemeSet> {
        self.languages.iter().find(|l| l.language == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    /// Index into `manifest.entries`, or `None` for manifest-level problems.
    pub entry: Option<usize>,
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Check every manifest invariant and collect violations in manifest order.
/// Relative paths resolve against `base_dir`.
pub fn validate_corpus(manifest: &CorpusManifest, base_dir: &Path) -> ValidationReport {
    let mut issues = Vec::new();
    let manifest_issue = |message: String| ValidationIssue {
        entry: None,
        id: String::new(),
        message,
    };
    if let Err(e) = manifest.feature_spec.validate() {
        issues.push(manifest_issue(e.to_string()));
    }
    let mut seen_langs = HashSet::new();
    for l in &manifest.languages {
        if !seen_langs.insert(l.language.as_str()) {
            issues.push(manifest_issue(format!("language `{}` declared twice", l.language)));
        }
    }

    let mut first_index: HashMap<&str, usize> = HashMap::new();
    let duplicate: Vec<Option<usize>> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| match first_index.get(e.id.as_str()) {
            Some(&j) => Some(j),
            None => {
                first_index.insert(&e.id, i);
                None
            }
        })
        .collect();

    let per_entry: Vec<Vec<String>> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut problems = Vec::new();
            if let Some(j) = duplicate[i] {
                problems.push(format!("duplicate utterance id (first at entry {j})"));
            }
            let Some(set) = manifest.language(&entry.language) else {
                problems.push(format!("unknown language `{}`", entry.language));
                return problems;
            };
            let frames = match load_feature_file(base_dir.join(&entry.features)) {
                Ok(m) => {
                    if m.dim() != manifest.feature_spec.dim {
                        problems.push(format!(
                            "feature dim {} does not match corpus dim {}",
                            m.dim(),
                            manifest.feature_spec.dim
                        ));
                    }
                    Some(m.frames())
                }
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            };
            match load_alignment(base_dir.join(&entry.alignment), set) {
                Ok(segs) => {
                    if segs.is_empty() {
                        problems.push("alignment has no segments".into());
                    } else if let Some(t) = frames {
                        if let Err(e) = check_segments(&segs, Some(t)) {
                            problems.push(e.to_string());
                        }
                    }
                }
                Err(e) => problems.push(e.to_string()),
            }
            problems
        })
        .collect();

    for (i, problems) in per_entry.into_iter().enumerate() {
        for message in problems {
            issues.push(ValidationIssue {
                entry: Some(i),
                id: manifest.entries[i].id.clone(),
                message,
            });
        }
    }
    ValidationReport { issues }
}
