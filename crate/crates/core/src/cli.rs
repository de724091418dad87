//! `xpq` command-line interface.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adaptation::{run_experiment, ExperimentSpec, InitMode};
use crate::config::RunConfig;
use crate::data::{manifest_location, validate_corpus, write_atomic, Corpus, CorpusManifest};
use crate::error::{Result, XpqError};
use crate::gradcheck::{run_gradcheck, ShapePreset};
use crate::mapping::{map_phonemes, mapping_accuracy};
use crate::query::{aggregate_queries, save_query_matrix};
use crate::synth::{generate_corpus, load_ground_truth};
use crate::trainer::{load_model, run_training};

#[derive(Debug, Parser)]
#[command(name = "xpq", version, about = "Transferable phoneme embeddings for few-shot adaptation")]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = "XPQ_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth prototypes.
    GenCorpus(GenCorpusArgs),
    /// Check a corpus manifest and every file it references.
    Validate(ValidateArgs),
    /// Write the phoneme query matrix of one language.
    ExtractQueries(ExtractArgs),
    /// Episodic codebook training.
    Train(TrainArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Few-shot adaptation experiment on one language.
    Adapt(AdaptArgs),
    /// Cross-language phoneme mapping from attention weights.
    MapPhonemes(MapArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load_or_default(self.config.as_deref())?.with_seed(self.seed);
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override synth.noise_sigma.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Corpus directory or manifest file.
    #[arg(long, alias = "manifest")]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Corpus directory or manifest file.
    #[arg(long, alias = "corpus")]
    pub manifest: PathBuf,
    /// Language id.
    #[arg(long)]
    pub language: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    pub resume: bool,
    /// Override train.total_steps.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed; seeds run from here upward.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "tiny,small,medium")]
    pub sizes: Vec<ShapePreset>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "codebook_init")]
    CodebookInit,
    #[value(name = "random_init")]
    RandomInit,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<InitMode> {
        match self {
            ModeArg::CodebookInit => vec![InitMode::CodebookInit],
            ModeArg::RandomInit => vec![InitMode::RandomInit],
            ModeArg::Both => vec![InitMode::CodebookInit, InitMode::RandomInit],
        }
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out language id.
    #[arg(long)]
    pub language: String,
    /// Shot counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Tasks per cell.
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Queries per task.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Fine-tuning steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Evaluation checkpoints, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eval_steps: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Covering sentences per language.
    #[arg(long)]
    pub target: Option<usize>,
    /// Neighbors listed per phoneme.
    #[arg(long)]
    pub top_k: Option<usize>,
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| XpqError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &text)
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join("resolved_config.json"), &cfg.to_json())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.join("meta.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(noise) = args.noise {
        cfg.synth.noise_sigma = noise;
    }
    cfg.validate()?;
    create_out(&args.out)?;
    let synth = generate_corpus(&cfg.synth, &args.out)?;
    write_config(&args.out, &cfg)?;
    println!(
        "wrote {} utterances in {} languages to {}",
        synth.corpus.utterances.len(),
        synth.corpus.languages.len(),
        args.out.display()
    );
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<()> {
    let (manifest_path, base) = manifest_location(&args.corpus);
    let manifest = CorpusManifest::load(&manifest_path)?;
    let report = validate_corpus(&manifest, &base);
    for issue in &report.issues {
        println!("{}\t{}", if issue.id.is_empty() { "<manifest>" } else { &issue.id }, issue.message);
    }
    if report.is_clean() {
        println!("ok: {} entries", manifest.entries.len());
        Ok(())
    } else {
        Err(XpqError::Validation(format!("{} issue(s) in {}", report.issues.len(), manifest_path.display())))
    }
}

fn extract_queries(args: &ExtractArgs) -> Result<()> {
    let corpus = Corpus::load(&args.manifest)?;
    let set = corpus.language(&args.language)?;
    let utts = corpus.utterances_of(&args.language, |_| true);
    let queries = aggregate_queries(&utts, set)?;
    create_out(&args.out)?;
    let stem = format!("{}_queries", args.language);
    save_query_matrix(&queries, set, &args.out, &stem)?;
    println!(
        "{} of {} phonemes present; wrote {}",
        queries.present.iter().filter(|&&p| p).count(),
        set.len(),
        args.out.join(format!("{stem}.xpqf")).display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
    }
    cfg.codebook.validate()?;
    cfg.train.validate()?;
    let corpus = Corpus::load(&args.corpus)?;
    create_out(&args.out)?;
    write_config(&args.out, &cfg)?;
    let summary = run_training(&corpus, cfg.codebook, cfg.train, &args.out, args.resume)?;
    match summary.final_loss {
        Some(loss) => println!("step {}: loss {loss}", summary.final_step),
        None => println!("already at step {}", summary.final_step),
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let report = run_gradcheck(&args.sizes, &seeds)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        create_out(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        println!("PASS max_rel_err {:.3e} < {:e}", report.max_rel_err(), report.tolerance);
        Ok(())
    } else {
        Err(XpqError::Numeric(format!(
            "gradient check failed: max_rel_err {:.3e} >= {:e}",
            report.max_rel_err(),
            report.tolerance
        )))
    }
}

fn adapt(args: &AdaptArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(k) = &args.k {
        cfg.experiment.ks = k.clone();
    }
    if let Some(t) = args.tasks {
        cfg.experiment.tasks = t;
    }
    if let Some(m) = args.mode {
        cfg.experiment.modes = m.modes();
    }
    if let Some(q) = args.queries {
        cfg.adapt.queries = q;
    }
    if let Some(s) = args.steps {
        cfg.adapt.finetune_steps = s;
    }
    if let Some(e) = &args.eval_steps {
        cfg.adapt.eval_checkpoints = e.clone();
    }
    cfg.adapt.validate()?;
    let corpus = Corpus::load(&args.corpus)?;
    corpus.language(&args.language)?;
    let (codebook, decoder) = load_model(checkpoint_dir(&args.checkpoint))?;
    let spec = ExperimentSpec {
        language: args.language.clone(),
        ks: cfg.experiment.ks.clone(),
        tasks: cfg.experiment.tasks,
        modes: cfg.experiment.modes.clone(),
        seed: cfg.experiment.seed,
    };
    let report = run_experiment(&corpus, &codebook, &decoder, &spec, &cfg.adapt)?;
    create_out(&args.out)?;
    write_config(&args.out, &cfg)?;
    write_text(&args.out.join("report.json"), &report.to_json())?;
    let tsv = report.to_tsv();
    write_text(&args.out.join("summary.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn map(args: &MapArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(t) = args.target {
        cfg.mapping.covering_target = t;
    }
    if let Some(k) = args.top_k {
        cfg.mapping.top_k = k;
    }
    let corpus = Corpus::load(&args.corpus)?;
    let (codebook, _) = load_model(checkpoint_dir(&args.checkpoint))?;
    let result = map_phonemes(&corpus, &codebook, cfg.mapping.covering_target, cfg.mapping.seed)?;
    for c in result.covering.iter().filter(|c| c.exceeds_target) {
        eprintln!(
            "warning: minimum cover for `{}` needs {} sentences, above the target {}",
            c.language,
            c.utterances.len(),
            cfg.mapping.covering_target
        );
    }
    create_out(&args.out)?;
    write_config(&args.out, &cfg)?;
    write_text(&args.out.join("mappings.tsv"), &result.table.to_tsv(cfg.mapping.top_k))?;
    write_text(&args.out.join("scores.json"), &result.table.to_json())?;
    let (_, base) = manifest_location(&args.corpus);
    let truth_path = base.join("ground_truth.json");
    if truth_path.exists() {
        let acc = mapping_accuracy(&result.table, &load_ground_truth(&truth_path)?)?;
        write_json(&args.out.join("accuracy.json"), &acc)?;
        println!("shared {}: top1 {:.4} top5 {:.4}", acc.shared, acc.top1, acc.top5);
    }
    println!("{} phonemes scored", result.table.phonemes.len());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let run = || match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Validate(a) => validate(a),
        Command::ExtractQueries(a) => extract_queries(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Adapt(a) => adapt(a),
        Command::MapPhonemes(a) => map(a),
    };
    match cli.threads {
        Some(0) => Err(XpqError::Argument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| XpqError::Argument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Parse, run, and report. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[argument]: {}", first.trim_start_matches("error: "));
            let _ = std::io::stderr().write_all(rendered.as_bytes());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}
