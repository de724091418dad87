//! Synthetic multilingual corpora with known phoneme prototypes.
//!
//! Every phoneme of every language is tied to one prototype vector from a
//! shared pool. Frames are the prototype plus isotropic Gaussian noise, so the
//! "right answer" for query extraction and cross-language mapping is known.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_atomic, Corpus, FeatureSpec, FrameMatrix, LanguagePhonemeSet, PhonemeSegment, Split,
    Utterance,
};
use crate::error::{Result, XpqError};

const COVERAGE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLanguage {
    pub id: String,
    pub m: usize,
    pub shared_fraction: f64,
    /// Held-out languages get only `test` utterances and are never trained on.
    #[serde(default)]
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_prototypes: usize,
    pub languages: Vec<SynthLanguage>,
    pub noise_sigma: f64,
    pub utterances_per_language: usize,
    pub segments_per_utterance: (usize, usize),
    pub frames_per_segment: (usize, usize),
    /// Unaligned (silence) frames inserted before each segment.
    pub gap_frames: (usize, usize),
    pub val_fraction: f64,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let lang = |id: &str, held_out| SynthLanguage {
            id: id.into(),
            m: 20,
            shared_fraction: 0.6,
            held_out,
        };
        Self {
            dim: 16,
            num_prototypes: 24,
            languages: vec![
                lang("s1", false),
                lang("s2", false),
                lang("s3", false),
                lang("s4", false),
                lang("u1", true),
                lang("u2", true),
            ],
            noise_sigma: 0.1,
            utterances_per_language: 200,
            segments_per_utterance: (20, 30),
            frames_per_segment: (2, 6),
            gap_frames: (0, 2),
            val_fraction: 0.1,
            frame_rate_hz: 50.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XpqError::Config(m));
        if self.dim == 0 || self.num_prototypes == 0 || self.utterances_per_language == 0 {
            return bad("dim, num_prototypes and utterances_per_language must be positive".into());
        }
        if self.languages.is_empty() {
            return bad("no languages configured".into());
        }
        for (name, (lo, hi)) in [
            ("segments_per_utterance", self.segments_per_utterance),
            ("frames_per_segment", self.frames_per_segment),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
            }
        }
        if self.gap_frames.0 > self.gap_frames.1 {
            return bad("gap_frames must satisfy min <= max".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative finite number".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        let mut ids = BTreeSet::new();
        for l in &self.languages {
            if !ids.insert(&l.id) {
                return bad(format!("language `{}` listed twice", l.id));
            }
            if l.m == 0 || l.m > self.num_prototypes {
                return bad(format!(
                    "language `{}` needs 1 <= m <= num_prototypes ({}), got {}",
                    l.id, self.num_prototypes, l.m
                ));
            }
            if !(0.0..=1.0).contains(&l.shared_fraction) {
                return bad(format!("language `{}` shared_fraction outside [0, 1]", l.id));
            }
        }
        Ok(())
    }
}

/// Namespaced phoneme → prototype index.
pub type GroundTruthMap = BTreeMap<String, usize>;

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub ground_truth: GroundTruthMap,
    /// `num_prototypes × dim`, binary32 values.
    pub prototypes: Vec<Vec<f32>>,
}

impl SynthCorpus {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| XpqError::io(dir, e))?;
        self.corpus.write(dir)?;
        let gt = serde_json::to_string_pretty(&self.ground_truth).expect("map serializes");
        write_atomic(&dir.join("ground_truth.json"), gt.as_bytes())
    }
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruthMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| XpqError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| XpqError::json(path.display().to_string(), e))
}

/// Generate a corpus in memory. A pure function of `config`.
pub fn synthesize(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let prototypes: Vec<Vec<f32>> = (0..config.num_prototypes)
        .map(|_| {
            (0..config.dim)
                .map(|_| rng.random_range(-1.0f64..=1.0) as f32)
                .collect()
        })
        .collect();

    let assignments = assign_prototypes(config, &mut rng)?;

    let mut languages = Vec::with_capacity(config.languages.len());
    let mut ground_truth = GroundTruthMap::new();
    let mut utterances = Vec::new();
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| XpqError::Config(format!("noise_sigma: {e}")))?;

    for (lang, assigned) in config.languages.iter().zip(&assignments) {
        let width = (lang.m.max(2) - 1).to_string().len().max(2);
        let symbols: Vec<String> = (0..lang.m).map(|i| format!("p{i:0width$}")).collect();
        let set = LanguagePhonemeSet::new(lang.id.clone(), symbols)?;
        for (i, &proto) in assigned.iter().enumerate() {
            ground_truth.insert(set.namespaced(i), proto);
        }

        let n = config.utterances_per_language;
        let n_val = if lang.held_out {
            0
        } else {
            (config.val_fraction * n as f64).round() as usize
        };
        let split_of = |u: usize| {
            if lang.held_out {
                Split::Test
            } else if u >= n - n_val {
                Split::Val
            } else {
                Split::Train
            }
        };

        let sequences = covering_sequences(config, lang, n, |u| split_of(u) != Split::Val, &mut rng)?;

        for (u, seq) in sequences.iter().enumerate() {
            let mut frames: Vec<f32> = Vec::new();
            let mut alignment = Vec::with_capacity(seq.len());
            let mut t = 0;
            let push_frame = |base: Option<&[f32]>, frames: &mut Vec<f32>, rng: &mut ChaCha8Rng| {
                for d in 0..config.dim {
                    let mean = base.map_or(0.0, |b| b[d] as f64);
                    let v = if config.noise_sigma > 0.0 {
                        mean + noise.sample(rng)
                    } else {
                        mean
                    };
                    frames.push(v as f32);
                }
            };
            for &p in seq {
                let gap = rng.random_range(config.gap_frames.0..=config.gap_frames.1);
                for _ in 0..gap {
                    push_frame(None, &mut frames, &mut rng);
                }
                t += gap;
                let dur = rng.random_range(config.frames_per_segment.0..=config.frames_per_segment.1);
                let proto = &prototypes[assigned[p]];
                for _ in 0..dur {
                    push_frame(Some(proto), &mut frames, &mut rng);
                }
                alignment.push(PhonemeSegment {
                    phoneme: p,
                    start_frame: t,
                    end_frame: t + dur,
                });
                t += dur;
            }
            utterances.push(Utterance {
                id: format!("{}-{u:05}", lang.id),
                language: lang.id.clone(),
                features: FrameMatrix::new(t, config.dim, frames)?,
                alignment,
                speaker: None,
                split: split_of(u),
            });
        }
        languages.push(set);
    }

    let corpus = Corpus::new(
        FeatureSpec {
            dim: config.dim,
            frame_rate_hz: config.frame_rate_hz,
        },
        languages,
        utterances,
    )?;
    Ok(SynthCorpus {
        corpus,
        ground_truth,
        prototypes,
    })
}

/// Generate and write a corpus directory (manifest, files, `ground_truth.json`).
pub fn generate_corpus(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    let synth = synthesize(config)?;
    synth.write(out_dir)?;
    Ok(synth)
}

/// For each language, the prototype index of each of its phonemes.
///
/// Non-first languages draw `round(shared_fraction · m)` prototypes from those
/// already used by earlier languages. The rest come from unused prototypes
/// while any remain, then from the remaining used ones.
fn assign_prototypes(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let pool = config.num_prototypes;
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(config.languages.len());
    for (li, lang) in config.languages.iter().enumerate() {
        let mut assigned: Vec<usize> = if li == 0 {
            index::sample(rng, pool, lang.m).into_vec()
        } else {
            let shared = (lang.shared_fraction * lang.m as f64).round() as usize;
            let used_list: Vec<usize> = used.iter().copied().collect();
            if shared > used_list.len() {
                return Err(XpqError::Config(format!(
                    "language `{}` wants {shared} shared prototypes but only {} are in use",
                    lang.id,
                    used_list.len()
                )));
            }
            let mut chosen: Vec<usize> = index::sample(rng, used_list.len(), shared)
                .into_iter()
                .map(|i| used_list[i])
                .collect();
            let fresh: Vec<usize> = (0..pool).filter(|p| !used.contains(p)).collect();
            let take_fresh = (lang.m - shared).min(fresh.len());
            chosen.extend(index::sample(rng, fresh.len(), take_fresh).into_iter().map(|i| fresh[i]));
            let rest_needed = lang.m - chosen.len();
            if rest_needed > 0 {
                let remaining: Vec<usize> =
                    used_list.iter().copied().filter(|p| !chosen.contains(p)).collect();
                if remaining.len() < rest_needed {
                    return Err(XpqError::Config(format!(
                        "language `{}` cannot get {} distinct prototypes from a pool of {pool}",
                        lang.id, lang.m
                    )));
                }
                chosen.extend(
                    index::sample(rng, remaining.len(), rest_needed)
                        .into_iter()
                        .map(|i| remaining[i]),
                );
            }
            chosen
        };
        assigned.shuffle(rng);
        used.extend(assigned.iter().copied());
        out.push(assigned);
    }
    Ok(out)
}

/// Draw phoneme sequences until the utterances selected by `counts` cover
/// every phoneme of the language.
fn covering_sequences(
    config: &SynthConfig,
    lang: &SynthLanguage,
    n: usize,
    counts: impl Fn(usize) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    for _ in 0..COVERAGE_ATTEMPTS {
        let sequences: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = rng.random_range(
                    config.segments_per_utterance.0..=config.segments_per_utterance.1,
                );
                (0..len).map(|_| rng.random_range(0..lang.m)).collect()
            })
            .collect();
        let mut seen = vec![false; lang.m];
        for (u, seq) in sequences.iter().enumerate() {
            if counts(u) {
                seq.iter().for_each(|&p| seen[p] = true);
            }
        }
        if seen.iter().all(|&s| s) {
            return Ok(sequences);
        }
    }
    Err(XpqError::Config(format!(
        "language `{}`: could not cover all {} phonemes in {COVERAGE_ATTEMPTS} attempts; \
         increase utterances or segments",
        lang.id, lang.m
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            utterances_per_language: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_frames_equal_prototypes() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let s = synthesize(&cfg).unwrap();
        for u in &s.corpus.utterances {
            let set = s.corpus.language(&u.language).unwrap();
            for seg in &u.alignment {
                let proto = &s.prototypes[s.ground_truth[&set.namespaced(seg.phoneme)]];
                for t in seg.start_frame..seg.end_frame {
                    assert_eq!(u.features.frame(t), proto.as_slice());
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = synthesize(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn full_sharing_gives_a_bijection() {
        let cfg = SynthConfig {
            num_prototypes: 8,
            languages: vec![
                SynthLanguage { id: "a".into(), m: 8, shared_fraction: 0.0, held_out: false },
                SynthLanguage { id: "b".into(), m: 8, shared_fraction: 1.0, held_out: false },
            ],
            utterances_per_language: 10,
            ..SynthConfig::default()
        };
        let s = synthesize(&cfg).unwrap();
        let protos = |lang: &str| -> BTreeSet<usize> {
            s.ground_truth
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{lang}-")))
                .map(|(_, &v)| v)
                .collect()
        };
        let (a, b) = (protos("a"), protos("b"));
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn shared_fraction_is_respected_when_pool_allows() {
        let cfg = SynthConfig {
            num_prototypes: 40,
            languages: vec![
                SynthLanguage { id: "a".into(), m: 10, shared_fraction: 0.0, held_out: false },
                SynthLanguage { id: "b".into(), m: 10, shared_fraction: 0.6, held_out: false },
            ],
            utterances_per_language: 10,
            ..SynthConfig::default()
        };
        let s = synthesize(&cfg).unwrap();
        let a: BTreeSet<usize> =
            (0..10).map(|i| s.ground_truth[&format!("a-p{i:02}")]).collect();
        let shared = (0..10)
            .filter(|i| a.contains(&s.ground_truth[&format!("b-p{i:02}")]))
            .count();
        assert_eq!(shared, 6);
    }

    #[test]
    fn every_phoneme_occurs_outside_validation() {
        let s = synthesize(&small()).unwrap();
        for set in &s.corpus.languages {
            let mut seen = vec![false; set.len()];
            for u in s.corpus.utterances_of(&set.language, |sp| sp != Split::Val) {
                u.alignment.iter().for_each(|seg| seen[seg.phoneme] = true);
            }
            assert!(seen.iter().all(|&x| x), "{}", set.language);
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = SynthConfig {
            num_prototypes: 4,
            ..small()
        };
        assert!(matches!(synthesize(&cfg), Err(XpqError::Config(_))));
        let cfg = SynthConfig {
            segments_per_utterance: (5, 2),
            ..small()
        };
        assert!(matches!(synthesize(&cfg), Err(XpqError::Config(_))));
    }

    #[test]
    fn writes_ground_truth_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_corpus(&small(), dir.path()).unwrap();
        assert_eq!(load_ground_truth(dir.path().join("ground_truth.json")).unwrap(), s.ground_truth);
        assert_eq!(Corpus::load(dir.path()).unwrap(), s.corpus);
    }
}
