use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, XpqError};

use super::LanguagePhonemeSet;

/// A phoneme occupying frames `start_frame..end_frame`. `phoneme` indexes the
/// language's phoneme set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhonemeSegment {
    pub phoneme: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl PhonemeSegment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }
}

/// Check ordering, non-overlap and the frame bound of a segment sequence.
pub(crate) fn check_segments(segments: &[PhonemeSegment], frames: Option<usize>) -> Result<()> {
    let mut prev_end = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.start_frame >= s.end_frame {
            return Err(XpqError::Validation(format!(
                "segment {i} is empty or reversed ({}..{})",
                s.start_frame, s.end_frame
            )));
        }
        if s.start_frame < prev_end {
            return Err(XpqError::Validation(format!(
                "segment {i} ({}..{}) overlaps or precedes the previous segment ending at {prev_end}",
                s.start_frame, s.end_frame
            )));
        }
        prev_end = s.end_frame;
    }
    if let Some(t) = frames {
        if prev_end > t {
            return Err(XpqError::Validation(format!(
                "alignment ends at frame {prev_end} but the utterance has {t} frames"
            )));
        }
    }
    Ok(())
}

pub fn parse_alignment(text: &str, set: &LanguagePhonemeSet) -> Result<Vec<PhonemeSegment>> {
    let mut segments = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(XpqError::Format(format!(
                "alignment line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let phoneme = set.index_of(fields[0]).ok_or_else(|| XpqError::Vocabulary {
            language: set.language.clone(),
            symbol: fields[0].to_string(),
        })?;
        let frame = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                XpqError::Format(format!("alignment line {}: bad frame index {s:?}", lineno + 1))
            })
        };
        segments.push(PhonemeSegment {
            phoneme,
            start_frame: frame(fields[1])?,
            end_frame: frame(fields[2])?,
        });
    }
    check_segments(&segments, None)?;
    Ok(segments)
}

pub fn load_alignment(
    path: impl AsRef<Path>,
    set: &LanguagePhonemeSet,
) -> Result<Vec<PhonemeSegment>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| XpqError::io(path, e))?;
    parse_alignment(&text, set).map_err(|e| match e {
        XpqError::Format(m) => XpqError::Format(format!("{}: {m}", path.display())),
        XpqError::Validation(m) => XpqError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_alignment(segments: &[PhonemeSegment], set: &LanguagePhonemeSet) -> String {
    let mut out = String::new();
    for s in segments {
        let _ = writeln!(out, "{}\t{}\t{}", set.symbol(s.phoneme), s.start_frame, s.end_frame);
    }
    out
}

pub fn save_alignment(
    path: impl AsRef<Path>,
    segments: &[PhonemeSegment],
    set: &LanguagePhonemeSet,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_alignment(segments, set)).map_err(|e| XpqError::io(path, e))
}
