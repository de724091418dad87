//! Phoneme query extraction.
//!
//! For each utterance, frames of each phoneme are averaged into a temporary
//! representation. Queries are the unweighted mean of those temporary
//! representations across utterances; phonemes that never occur get a zero
//! row. Nothing here depends on training state, so seen and unseen languages
//! are handled identically.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_feature_file, FrameMatrix, LanguagePhonemeSet, Utterance};
use crate::error::{Result, XpqError};
use crate::linalg::Matrix;

/// `m × dim` phoneme queries for one language.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMatrix {
    pub language: String,
    pub matrix: Matrix,
    /// `present[p]` is false iff phoneme `p` never occurred; its row is zero.
    pub present: Vec<bool>,
}

impl QueryMatrix {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Mean frame vector of each phoneme occurring in `utt`, pooling all of its
/// segments. Frames outside every segment are ignored.
pub fn utterance_temp_reps(utt: &Utterance) -> BTreeMap<usize, Vec<f64>> {
    let dim = utt.features.dim();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for seg in &utt.alignment {
        let (sum, count) = acc.entry(seg.phoneme).or_insert_with(|| (vec![0.0; dim], 0));
        for t in seg.start_frame..seg.end_frame {
            for (s, &v) in sum.iter_mut().zip(utt.features.frame(t)) {
                *s += v as f64;
            }
        }
        *count += seg.len();
    }
    acc.into_iter()
        .map(|(p, (mut sum, count))| {
            let n = count as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            (p, sum)
        })
        .collect()
}

pub fn aggregate_queries(utterances: &[&Utterance], set: &LanguagePhonemeSet) -> Result<QueryMatrix> {
    let first = utterances
        .first()
        .ok_or_else(|| XpqError::Argument("cannot extract queries from zero utterances".into()))?;
    let dim = first.features.dim();
    for u in utterances {
        if u.language != set.language {
            return Err(XpqError::Argument(format!(
                "utterance `{}` is `{}`, queries requested for `{}`",
                u.id, u.language, set.language
            )));
        }
        if u.features.dim() != dim {
            return Err(XpqError::Argument(format!(
                "utterance `{}` has dim {}, expected {dim}",
                u.id,
                u.features.dim()
            )));
        }
        if let Some(s) = u.alignment.iter().find(|s| s.phoneme >= set.len()) {
            return Err(XpqError::Argument(format!(
                "utterance `{}` references phoneme {} outside the set",
                u.id, s.phoneme
            )));
        }
    }

    let reps: Vec<BTreeMap<usize, Vec<f64>>> =
        utterances.par_iter().map(|u| utterance_temp_reps(u)).collect();

    let m = set.len();
    let mut sums = vec![0.0f64; m * dim];
    let mut counts = vec![0usize; m];
    for rep in &reps {
        for (&p, mean) in rep {
            counts[p] += 1;
            for (s, v) in sums[p * dim..(p + 1) * dim].iter_mut().zip(mean) {
                *s += v;
            }
        }
    }
    let mut matrix = Matrix::zeros(m, dim);
    for p in 0..m {
        if counts[p] == 0 {
            continue;
        }
        let n = counts[p] as f64;
        for (d, s) in sums[p * dim..(p + 1) * dim].iter().enumerate() {
            matrix.set(p, d, (s / n) as f32 as f64);
        }
    }
    if !matrix.is_finite() {
        return Err(XpqError::Numeric("non-finite phoneme query".into()));
    }
    Ok(QueryMatrix {
        language: set.language.clone(),
        matrix,
        present: counts.iter().map(|&c| c > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySidecar {
    pub language: String,
    pub phonemes: Vec<String>,
    pub present: Vec<bool>,
}

/// Write `<stem>.xpqf` (feature format) and `<stem>.json` next to it.
pub fn save_query_matrix(
    queries: &QueryMatrix,
    set: &LanguagePhonemeSet,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    let data: Vec<f32> = queries.matrix.as_slice().iter().map(|&v| v as f32).collect();
    let frames = FrameMatrix::new(queries.len(), queries.dim(), data)?;
    save_feature_file(&frames, dir.join(format!("{stem}.xpqf")))?;
    let sidecar = QuerySidecar {
        language: queries.language.clone(),
        phonemes: set.phonemes.clone(),
        present: queries.present.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
        .map_err(|e| XpqError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PhonemeSegment, Split};
    use proptest::prelude::*;

    fn set() -> LanguagePhonemeSet {
        LanguagePhonemeSet::new("xx", vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn utt(id: &str, frames: &[Vec<f32>], segs: &[(usize, usize, usize)]) -> Utterance {
        Utterance {
            id: id.into(),
            language: "xx".into(),
            features: FrameMatrix::from_rows(frames).unwrap(),
            alignment: segs
                .iter()
                .map(|&(phoneme, start_frame, end_frame)| PhonemeSegment {
                    phoneme,
                    start_frame,
                    end_frame,
                })
                .collect(),
            speaker: None,
            split: Split::Train,
        }
    }

    #[test]
    fn two_frame_mean() {
        let u = utt("u", &[vec![2.0, 4.0], vec![4.0, 8.0]], &[(0, 0, 2)]);
        assert_eq!(utterance_temp_reps(&u)[&0], vec![3.0, 6.0]);
    }

    #[test]
    fn pooled_multi_segment_mean() {
        let u = utt(
            "u",
            &[vec![0.0, 0.0], vec![100.0, 100.0], vec![4.0, 4.0]],
            &[(0, 0, 1), (1, 1, 2), (0, 2, 3)],
        );
        assert_eq!(utterance_temp_reps(&u)[&0], vec![2.0, 2.0]);
    }

    #[test]
    fn absent_phoneme_has_no_entry() {
        let u = utt("u", &[vec![1.0]], &[(1, 0, 1)]);
        assert!(!utterance_temp_reps(&u).contains_key(&0));
    }

    #[test]
    fn mean_of_means() {
        let u1 = utt("u1", &[vec![1.0, 0.0]], &[(0, 0, 1)]);
        let u2 = utt("u2", &[vec![3.0, 2.0]], &[(0, 0, 1)]);
        let q = aggregate_queries(&[&u1, &u2], &set()).unwrap();
        assert_eq!(q.matrix.row(0), &[2.0, 1.0]);
        assert!(q.present[0]);
    }

    #[test]
    fn mean_of_means_is_not_frame_weighted() {
        let u1 = utt("u1", &[vec![0.0]], &[(0, 0, 1)]);
        let u2 = utt("u2", &[vec![4.0], vec![4.0], vec![4.0]], &[(0, 0, 3)]);
        let q = aggregate_queries(&[&u1, &u2], &set()).unwrap();
        assert_eq!(q.matrix.get(0, 0), 2.0);
    }

    #[test]
    fn unseen_phoneme_is_zero_and_absent() {
        let u1 = utt("u1", &[vec![1.0, 1.0]], &[(0, 0, 1)]);
        let q = aggregate_queries(&[&u1], &set()).unwrap();
        assert_eq!(q.matrix.row(2), &[0.0, 0.0]);
        assert_eq!(q.present, vec![true, false, false]);
    }

    #[test]
    fn empty_list_is_rejected() {
        assert!(matches!(aggregate_queries(&[], &set()), Err(XpqError::Argument(_))));
    }

    #[test]
    fn constant_frames_reproduce_the_constant() {
        let v = vec![0.1f32, -0.7, 0.3333];
        let u1 = utt("u1", &[v.clone(), v.clone(), v.clone()], &[(1, 0, 2)]);
        let u2 = utt("u2", std::slice::from_ref(&v), &[(1, 0, 1)]);
        let q = aggregate_queries(&[&u1, &u2], &set()).unwrap();
        let got: Vec<f32> = q.matrix.row(1).iter().map(|&x| x as f32).collect();
        assert_eq!(got, v);
    }

    proptest! {
        #[test]
        fn invariant_under_utterance_order(
            values in proptest::collection::vec(-5.0f32..5.0, 8..40),
            rot in 0usize..5,
        ) {
            let mut utts = Vec::new();
            for (i, chunk) in values.chunks(4).enumerate() {
                let frames: Vec<Vec<f32>> = chunk.iter().map(|&v| vec![v, -v]).collect();
                let segs: Vec<(usize, usize, usize)> =
                    (0..frames.len()).map(|t| ((i + t) % 3, t, t + 1)).collect();
                utts.push(utt(&format!("u{i}"), &frames, &segs));
            }
            let refs: Vec<&Utterance> = utts.iter().collect();
            let mut rotated = refs.clone();
            rotated.rotate_left(rot % refs.len());
            let a = aggregate_queries(&refs, &set()).unwrap();
            let b = aggregate_queries(&rotated, &set()).unwrap();
            prop_assert_eq!(&a.present, &b.present);
            for (x, y) in a.matrix.as_slice().iter().zip(b.matrix.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }
}
