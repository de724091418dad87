#![allow(dead_code)]

use xpq_core::codebook::CodebookConfig;
use xpq_core::synth::{SynthConfig, SynthLanguage};
use xpq_core::trainer::TrainConfig;

pub fn lang(id: &str, m: usize, held_out: bool) -> SynthLanguage {
    SynthLanguage {
        id: id.into(),
        m,
        shared_fraction: 0.5,
        held_out,
    }
}

/// Two training languages and one held-out language, small enough for
/// quick tests.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        dim: 6,
        num_prototypes: 12,
        languages: vec![lang("a", 8, false), lang("b", 8, false), lang("h", 8, true)],
        utterances_per_language: 80,
        segments_per_utterance: (6, 10),
        frames_per_segment: (1, 3),
        seed,
        ..SynthConfig::default()
    }
}

pub fn small_codebook() -> CodebookConfig {
    CodebookConfig {
        n: 16,
        heads: 2,
        d_k: 8,
        d_v: 8,
        dim: 6,
    }
}

pub fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 20,
        gen_group_size: 16,
        loss_group_size: 4,
        warmup_steps: 10,
        total_steps: steps,
        checkpoint_every: 10,
        val_every: 10,
        lr: 0.003,
        ..TrainConfig::default()
    }
}

/// The same settings as a JSON run configuration.
pub fn small_config_json(steps: u64) -> String {
    format!(
        r#"{{
  "synth": {{
    "dim": 6, "num_prototypes": 12, "utterances_per_language": 80,
    "segments_per_utterance": [6, 10], "frames_per_segment": [1, 3],
    "languages": [
      {{"id": "a", "m": 8, "shared_fraction": 0.5}},
      {{"id": "b", "m": 8, "shared_fraction": 0.5}},
      {{"id": "h", "m": 8, "shared_fraction": 0.5, "held_out": true}}
    ]
  }},
  "codebook": {{"n": 16, "heads": 2, "d_k": 8, "d_v": 8, "dim": 6}},
  "train": {{
    "batch_size": 20, "gen_group_size": 16, "loss_group_size": 4,
    "warmup_steps": 10, "total_steps": {steps}, "checkpoint_every": 10,
    "val_every": 10, "lr": 0.003
  }},
  "adapt": {{"finetune_steps": 20, "eval_checkpoints": [0, 10, 20], "queries": 8}},
  "experiment": {{"ks": [2, 4], "tasks": 3}},
  "mapping": {{"covering_target": 20}}
}}"#
    )
}
