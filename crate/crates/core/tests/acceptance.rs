//! Acceptance run: every headline criterion at its stated tolerance, one
//! PASS/FAIL line each. Exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xpq_core::adaptation::{
    run_experiment, sample_task, task_is_covered, AdaptConfig, ExperimentReport, ExperimentSpec,
    InitMode, TaskSpec,
};
use xpq_core::codebook::{CodebookConfig, CodebookParams};
use xpq_core::data::{Corpus, Utterance};
use xpq_core::gradcheck::{run_gradcheck, PRESETS, TOLERANCE};
use xpq_core::linalg::Matrix;
use xpq_core::mapping::{map_phonemes, mapping_accuracy, DEFAULT_COVERING_TARGET};
use xpq_core::query::aggregate_queries;
use xpq_core::synth::{synthesize, SynthConfig, SynthCorpus, SynthLanguage};
use xpq_core::trainer::{coverage_holds, save_checkpoint, StepRecord, TrainConfig, Trainer};

const TEST_LANGUAGES: [&str; 2] = ["u1", "u2"];
const KS: [usize; 3] = [4, 16, 64];

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

struct Run {
    codebook: CodebookParams,
    checkpoint: Vec<(String, Vec<u8>)>,
    records: Vec<StepRecord>,
    reports: Vec<ExperimentReport>,
    train_time: Duration,
    adapt_time: Duration,
}

fn checkpoint_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Train with the default configuration, then run the adaptation grid on
/// each held-out language.
fn pipeline(corpus: &Corpus, seed: u64, modes: &[InitMode]) -> Run {
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let start = Instant::now();
    let mut trainer = Trainer::new(corpus, CodebookConfig::default(), config).unwrap();
    let records: Vec<StepRecord> = (0..config.total_steps).map(|_| trainer.step().unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trainer.state, &config, dir.path()).unwrap();
    let train_time = start.elapsed();

    let start = Instant::now();
    let reports = TEST_LANGUAGES
        .iter()
        .map(|lang| {
            let spec = ExperimentSpec {
                language: lang.to_string(),
                ks: KS.to_vec(),
                tasks: 20,
                modes: modes.to_vec(),
                seed,
            };
            run_experiment(corpus, &trainer.state.codebook, &trainer.state.decoder, &spec, &AdaptConfig::default())
                .unwrap()
        })
        .collect();
    Run {
        codebook: trainer.state.codebook.clone(),
        checkpoint: checkpoint_bytes(dir.path()),
        records,
        reports,
        train_time,
        adapt_time: start.elapsed(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let report = run_gradcheck(&PRESETS, &seeds).unwrap();
    let elapsed = start.elapsed();
    let passed = report.passed() && elapsed < Duration::from_secs(60);
    Outcome {
        name: "gradient suite",
        passed,
        detail: format!(
            "{} checks (3 suites x {} shapes x {} seeds), max rel err {:.2e} (< {:e}), {:.1}s (< 60s)",
            report.results.len(),
            PRESETS.len(),
            seeds.len(),
            report.max_rel_err(),
            TOLERANCE,
            elapsed.as_secs_f64()
        ),
    }
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 200;
    let mut failures = Vec::new();
    for trial in 0..trials {
        let n = 1usize << rng.random_range(0..8);
        let cfg = CodebookConfig {
            n,
            heads: rng.random_range(1..5),
            d_k: rng.random_range(1..9),
            d_v: rng.random_range(1..6),
            dim: rng.random_range(1..17),
        };
        let cb = CodebookParams::init(cfg, rng.random()).unwrap();
        let m = rng.random_range(2..24);
        let scale = rng.random_range(0.01..30.0);
        let mut q = Matrix::from_fn(m, cfg.dim, |_, _| rng.random_range(-scale..scale));
        let zero = rng.random_range(0..m);
        q.row_mut(zero).fill(0.0);
        let (out, rec) = cb.forward_matrix(&q).unwrap();

        let stochastic = rec.weights.iter().all(|w| {
            (0..m).all(|r| w.row(r).iter().all(|&x| x >= 0.0) && (w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6)
        });
        let uniform = rec.weights.iter().all(|w| w.row(zero).iter().all(|&x| x == 1.0 / n as f64));

        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pq = Matrix::from_fn(m, cfg.dim, |r, c| q.get(perm[r], c));
        let (pout, prec) = cb.forward_matrix(&pq).unwrap();
        let equivariant = (0..m).all(|r| {
            pout.row(r) == out.row(perm[r])
                && prec.weights.iter().zip(&rec.weights).all(|(a, b)| a.row(r) == b.row(perm[r]))
        });
        if !(stochastic && uniform && equivariant) {
            failures.push(format!("trial {trial}: stochastic={stochastic} uniform={uniform} equivariant={equivariant}"));
        }
    }
    Outcome {
        name: "attention invariants",
        passed: failures.is_empty(),
        detail: format!(
            "{}/{trials} randomized instances pass row-stochastic (1e-6), exact zero-query uniform, bitwise permutation equivariance{}",
            trials - failures.len(),
            failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    }
}

fn trend(run: &Run) -> Outcome {
    let mut pairs = 0;
    let mut wins = 0;
    let mut ckpt0_strict = true;
    let mut per_step: Vec<(u64, usize, usize)> = Vec::new();
    for report in &run.reports {
        for k in KS {
            let a = report.cell(k, InitMode::CodebookInit).unwrap();
            let b = report.cell(k, InitMode::RandomInit).unwrap();
            for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
                assert_eq!(ta.task_seed, tb.task_seed);
                for (ci, (ca, cb)) in ta.checkpoints.iter().zip(&tb.checkpoints).enumerate() {
                    let win = ca.mean_mse < cb.mean_mse;
                    pairs += 1;
                    wins += usize::from(win);
                    if ci == 0 && !win {
                        ckpt0_strict = false;
                    }
                    match per_step.iter_mut().find(|(s, _, _)| *s == ca.step) {
                        Some(e) => {
                            e.1 += usize::from(win);
                            e.2 += 1;
                        }
                        None => per_step.push((ca.step, usize::from(win), 1)),
                    }
                }
            }
            ckpt0_strict &= a.mean[0] < b.mean[0];
        }
    }
    let frac = wins as f64 / pairs as f64;
    let total = run.train_time + run.adapt_time;
    let breakdown: Vec<String> = per_step.iter().map(|(s, w, n)| format!("step {s}: {w}/{n}")).collect();
    Outcome {
        name: "trend reproduction",
        passed: frac >= 0.9 && ckpt0_strict && total < Duration::from_secs(600),
        detail: format!(
            "codebook_init < random_init in {wins}/{pairs} = {:.1}% of (task, checkpoint) pairs (need >= 90%) [{}]; \
             strict at checkpoint 0 for all k: {ckpt0_strict}; {:.0}s (< 600s)",
            100.0 * frac,
            breakdown.join(", "),
            total.as_secs_f64()
        ),
    }
}

fn final_means(report: &ExperimentReport) -> Vec<f64> {
    KS.iter()
        .map(|&k| *report.cell(k, InitMode::CodebookInit).unwrap().mean.last().unwrap())
        .collect()
}

fn monotonic_shots(seed0: &Run) -> Outcome {
    let mut violations = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let reports = if seed == 0 {
            seed0.reports.clone()
        } else {
            let synth = synthesize(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
            pipeline(&synth.corpus, seed, &[InitMode::CodebookInit]).reports
        };
        for (lang, report) in TEST_LANGUAGES.iter().zip(&reports) {
            let m = final_means(report);
            let ok = m.windows(2).all(|w| w[0] >= w[1]);
            lines.push(format!("seed {seed} {lang}: {:.5}/{:.5}/{:.5}", m[0], m[1], m[2]));
            if !ok && !violations.contains(&seed) {
                violations.push(seed);
            }
        }
    }
    Outcome {
        name: "monotonic shots",
        passed: violations.len() <= 1,
        detail: format!(
            "{} of 5 corpus seeds violate 4 >= 16 >= 64 (allow <= 1) [{}]",
            violations.len(),
            lines.join("; ")
        ),
    }
}

fn mapping_recovery(synth: &SynthCorpus, run: &Run) -> Outcome {
    let start = Instant::now();
    let result = map_phonemes(&synth.corpus, &run.codebook, DEFAULT_COVERING_TARGET, 0).unwrap();
    let acc = mapping_accuracy(&result.table, &synth.ground_truth).unwrap();
    let total = run.train_time + start.elapsed();
    Outcome {
        name: "mapping recovery",
        passed: acc.top1 >= 0.8 && acc.top5 >= 0.95 && total < Duration::from_secs(60),
        detail: format!(
            "{} shared phonemes, top-1 {:.1}% (>= 80%), top-5 {:.1}% (>= 95%), {:.1}s incl. training (< 60s)",
            acc.shared,
            100.0 * acc.top1,
            100.0 * acc.top5,
            total.as_secs_f64()
        ),
    }
}

fn coverage(corpus: &Corpus, run: &Run) -> Outcome {
    let group = |ids: &[usize]| -> Vec<&Utterance> { ids.iter().map(|&i| &corpus.utterances[i]).collect() };
    let splits_ok = run
        .records
        .iter()
        .filter(|r| coverage_holds(&group(&r.gen), &group(&r.loss_group)))
        .count();
    let mut tasks = 0;
    let mut tasks_ok = 0;
    for lang in TEST_LANGUAGES {
        for k in KS {
            for seed in 0..40 {
                let spec = TaskSpec { language: lang.into(), k, q: 64, seed };
                let task = sample_task(corpus, &spec, 1000).unwrap();
                tasks += 1;
                tasks_ok += usize::from(task_is_covered(corpus, &task));
            }
        }
    }
    Outcome {
        name: "coverage properties",
        passed: splits_ok == run.records.len() && run.records.len() >= 100 && tasks_ok == tasks && tasks >= 100,
        detail: format!(
            "{splits_ok}/{} executed training splits and {tasks_ok}/{tasks} sampled tasks satisfy coverage",
            run.records.len()
        ),
    }
}

fn determinism(corpus: &Corpus, first: &Run) -> Outcome {
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pipeline(corpus, 0, &[InitMode::CodebookInit, InitMode::RandomInit]))
    };
    let runs = [in_pool(1), in_pool(4)];
    let json = |r: &Run| r.reports.iter().map(|x| x.to_json()).collect::<Vec<_>>();
    let same: Vec<bool> = runs
        .iter()
        .map(|r| r.checkpoint == first.checkpoint && json(r) == json(first))
        .collect();
    Outcome {
        name: "determinism",
        passed: same.iter().all(|&s| s),
        detail: format!(
            "checkpoint files and adaptation reports bitwise identical to the first run: repeat with 1 thread {}, repeat with 4 threads {}",
            same[0],
            same[1]
        ),
    }
}

fn zero_noise_oracle() -> Outcome {
    let synth = synthesize(&SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() }).unwrap();
    let mut worst = 0.0f64;
    for set in &synth.corpus.languages {
        let utts = synth.corpus.utterances_of(&set.language, |_| true);
        let q = aggregate_queries(&utts, set).unwrap();
        for p in 0..set.len() {
            let proto = &synth.prototypes[synth.ground_truth[&set.namespaced(p)]];
            let err: f64 = q.matrix.row(p).iter().zip(proto).map(|(a, &b)| (a - b as f64).powi(2)).sum();
            let norm: f64 = proto.iter().map(|&b| (b as f64).powi(2)).sum();
            worst = worst.max((err / norm).sqrt());
        }
    }

    let single = SynthConfig {
        noise_sigma: 0.0,
        languages: vec![SynthLanguage { id: "s1".into(), m: 20, shared_fraction: 0.6, held_out: false }],
        ..SynthConfig::default()
    };
    let corpus = synthesize(&single).unwrap().corpus;
    let config = TrainConfig::default();
    let mut trainer = Trainer::new(&corpus, CodebookConfig::default(), config).unwrap();
    let losses: Vec<f64> = (0..config.total_steps).map(|_| trainer.step().unwrap().loss).collect();
    let first_below = losses.iter().position(|&l| l < 1e-3).map(|i| i + 1);
    let last = *losses.last().unwrap();
    Outcome {
        name: "zero-noise oracle",
        passed: worst <= 1e-6 && last < 1e-3,
        detail: format!(
            "max query/prototype rel err {worst:.2e} (<= 1e-6); single-language loss first < 1e-3 at step {}, {last:.2e} at step {}",
            first_below.map_or("never".to_string(), |s| s.to_string()),
            config.total_steps
        ),
    }
}

fn main() {
    let start = Instant::now();
    let synth = synthesize(&SynthConfig::default()).unwrap();
    let run = pipeline(&synth.corpus, 0, &[InitMode::CodebookInit, InitMode::RandomInit]);

    let outcomes = [
        gradient_suite(),
        attention_invariants(),
        trend(&run),
        monotonic_shots(&run),
        mapping_recovery(&synth, &run),
        coverage(&synth.corpus, &run),
        determinism(&synth.corpus, &run),
        zero_noise_oracle(),
    ];
    println!();
    for o in &outcomes {
        println!("{} [{}] {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "\nacceptance: {}/{} criteria pass ({:.0}s)",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
