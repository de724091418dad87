mod common;

use std::path::Path;
use std::process::{Command, Output};

fn xpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpq"))
        .args(args)
        .env_remove("XPQ_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xpq(args);
    assert!(
        out.status.success(),
        "xpq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn setup(steps: u64) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, common::small_config_json(steps)).unwrap();
    ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&dir.path().join("corpus"))]);
    (dir, cfg)
}

#[test]
fn generated_corpus_validates_clean() {
    let (dir, _) = setup(10);
    let stdout = ok(&["validate", "--corpus", p(&dir.path().join("corpus"))]);
    assert!(stdout.starts_with("ok: 240 entries"), "{stdout}");
    assert!(dir.path().join("corpus/ground_truth.json").exists());
    assert!(dir.path().join("corpus/resolved_config.json").exists());
}

#[test]
fn broken_corpus_fails_validation() {
    let (dir, _) = setup(10);
    let corpus = dir.path().join("corpus");
    std::fs::write(corpus.join("features/a-00003.xpqf"), b"XPQF").unwrap();
    let out = xpq(&["validate", "--corpus", p(&corpus)]);
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("a-00003\t"), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[validation]"));
}

#[test]
fn extract_queries_writes_matrix_and_sidecar() {
    let (dir, _) = setup(10);
    let out = dir.path().join("q");
    ok(&["extract-queries", "--manifest", p(&dir.path().join("corpus")), "--language", "b", "--out", p(&out)]);
    let m = xpq_core::data::load_feature_file(out.join("b_queries.xpqf")).unwrap();
    assert_eq!((m.frames(), m.dim()), (8, 6));
    let sidecar: serde_json::Value = serde_json::from_slice(&read(out.join("b_queries.json"))).unwrap();
    assert_eq!(sidecar["language"], "b");
}

#[test]
fn resumed_training_matches_uninterrupted_bitwise() {
    let (dir, cfg) = setup(30);
    let corpus = dir.path().join("corpus");
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&full)]);
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&part), "--steps", "30"]);
    // roll the partial run back to its step-20 checkpoint by retraining to 20
    let part20 = dir.path().join("part20");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&part20), "--steps", "20"]);
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&part20), "--resume"]);
    for f in ["checkpoint/codebook.bin", "checkpoint/decoder.bin", "checkpoint/optim.bin", "checkpoint/meta.json", "loss.tsv", "val.tsv"] {
        assert_eq!(read(full.join(f)), read(part20.join(f)), "{f}");
        assert_eq!(read(full.join(f)), read(part.join(f)), "{f}");
    }
    let log = String::from_utf8(read(full.join("loss.tsv"))).unwrap();
    assert_eq!(log.lines().next(), Some("step\tlr\tloss"));
    assert_eq!(log.lines().count(), 31);
}

#[test]
fn pipeline_is_independent_of_thread_count() {
    let (dir, cfg) = setup(20);
    let corpus = dir.path().join("corpus");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let run = dir.path().join(format!("run{threads}"));
        let adapt = dir.path().join(format!("adapt{threads}"));
        let map = dir.path().join(format!("map{threads}"));
        ok(&["--threads", threads, "train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&run)]);
        ok(&[
            "adapt", "--threads", threads, "--config", p(&cfg), "--checkpoint", p(&run), "--corpus", p(&corpus),
            "--language", "h", "--mode", "both", "--out", p(&adapt),
        ]);
        ok(&["map-phonemes", "--config", p(&cfg), "--checkpoint", p(&run), "--corpus", p(&corpus), "--out", p(&map)]);
        outputs.push(
            [
                run.join("checkpoint/codebook.bin"),
                run.join("checkpoint/optim.bin"),
                run.join("loss.tsv"),
                adapt.join("report.json"),
                adapt.join("summary.tsv"),
                map.join("mappings.tsv"),
                map.join("scores.json"),
            ]
            .map(read),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
    let report: serde_json::Value = serde_json::from_slice(&outputs[0][3]).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 4);
    assert_eq!(report[0]["mode"], "codebook_init");
    assert_eq!(report[0]["tasks"][0]["checkpoints"][2]["step"], 20);
}

#[test]
fn adapt_on_unknown_language_fails_with_category() {
    let (dir, cfg) = setup(5);
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&run)]);
    let out = xpq(&[
        "adapt", "--checkpoint", p(&run), "--corpus", p(&corpus), "--language", "klingon", "--out",
        p(&dir.path().join("a")),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[vocabulary]"), "{stderr}");
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"synth\": {\n    \"dims\": 4\n  }\n}\n").unwrap();
    let out = xpq(&["gen-corpus", "--config", p(&cfg), "--out", p(&dir.path().join("c"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[config]"), "{stderr}");
    assert!(stderr.contains("dims") && stderr.contains("line 3"), "{stderr}");
}

#[test]
fn unknown_flags_are_errors_and_help_lists_flags() {
    let out = xpq(&["train", "--corpus", "x", "--out", "y", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[argument]"));
    for (cmd, flags) in [
        ("gen-corpus", &["--config", "--out", "--seed", "--threads"][..]),
        ("validate", &["--corpus"]),
        ("extract-queries", &["--manifest", "--language", "--out"]),
        ("train", &["--config", "--corpus", "--out", "--resume", "--steps"]),
        ("gradcheck", &["--seed", "--sizes", "--seeds"]),
        ("adapt", &["--checkpoint", "--corpus", "--language", "--k", "--tasks", "--mode", "--out"]),
        ("map-phonemes", &["--checkpoint", "--corpus", "--out", "--top-k"]),
    ] {
        let help = ok(&[cmd, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gradcheck_command_passes() {
    let stdout = ok(&["gradcheck", "--seeds", "2", "--sizes", "tiny,small"]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("\tPASS")).count(), 12);
    assert!(stdout.lines().last().unwrap().starts_with("PASS"));
}

#[test]
fn zero_threads_is_rejected() {
    let out = xpq(&["--threads", "0", "gradcheck", "--seeds", "1"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[argument]"));
}
