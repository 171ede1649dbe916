//! Command implementations behind the `idea` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use idea_core::checkpoint;
use idea_core::datasets::Dataset;
use idea_core::encoder::EncoderBackend;
use idea_core::export::export_features;
use idea_core::head::{AblationMode, GammaMode};
use idea_core::model::{gradient_check_tiny_model, L2Scope, TinyModelShape};
use idea_core::stats::{summarize, welch_t_test};
use idea_core::synthetic::SyntheticConfig;
use idea_core::text::{load_csv, make_batches, stratified_subsample, write_csv, Document, LabelSet, Vocab};
use idea_core::train::{evaluate, train, Corpus, RunResult, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMINGS_FILE: &str = "timings.txt";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "idea", version, about = "Train and evaluate IDEA text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint, vocabulary and report.
    Train(TrainArgs),
    /// Evaluate a trained model on a CSV file.
    Eval(EvalArgs),
    /// Train every ablation mode for each seed and compare against the full model.
    Ablate(AblateArgs),
    /// Finite-difference gradient check of a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the fused feature vector z of every document as TSV.
    ExportFeatures(ExportArgs),
    /// Generate a synthetic keyword corpus.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// Known corpus supplying label names and the epoch default {agnews, dbpedia, yahoo, yelpp, yelpf}
    #[arg(long)]
    pub dataset: Option<String>,
    /// Training CSV: class index (1-based) followed by text fields
    #[arg(long)]
    pub train_csv: Option<PathBuf>,
    /// Test CSV in the same layout
    #[arg(long)]
    pub test_csv: Option<PathBuf>,
    /// Comma-separated label names in class order (overrides --dataset)
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Debug, Default, Args)]
pub struct HyperArgs {
    /// TOML file with any of the options below; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training epochs [default: 2; agnews 2, dbpedia 3, yahoo 2, yelpp 5, yelpf 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps [default: none]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Learning rate [default: 5e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// L2 coefficient on the attention and classifier weights [default: 0.01]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dropout rate [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Parameters under the L2 term {weight-matrices, with-embeddings} [default: weight-matrices]
    #[arg(long, value_parser = parse_l2_scope)]
    pub l2_scope: Option<L2Scope>,
    /// Scope of the fusion weight {per-sample, per-batch-literal} [default: per-sample]
    #[arg(long, value_parser = parse_gamma_mode)]
    pub gamma_mode: Option<GammaMode>,
    /// Stratified subsample of the training file [default: all]
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Stratified subsample of the test file [default: all]
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Validation holdout taken from training data [default: test size]
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Maximum words per document [default: 128]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Hidden size [default: 64]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Transformer layers [default: 2]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Encoder {mini-transformer, bag-of-embeddings} [default: mini-transformer]
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<EncoderBackend>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Head variant {full, only-text, only-fusing, no-abs-diff, no-ele-prod} [default: full]
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<AblationMode>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for model.ckpt, vocab.txt, report.txt and timings.txt
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated seeds [default: 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Directory for per-run reports and the comparison table
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `idea train --out`
    #[arg(long)]
    pub model: PathBuf,
    /// CSV to evaluate
    #[arg(long)]
    pub test_csv: PathBuf,
    /// Stratified subsample of the file [default: all]
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Seed for the subsample
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory written by `idea train --out`
    #[arg(long)]
    pub model: PathBuf,
    /// CSV whose documents are exported
    #[arg(long)]
    pub csv: PathBuf,
    /// Output TSV: gold, predicted, then the z components
    #[arg(long)]
    pub out: PathBuf,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Head variant
    #[arg(long, value_parser = parse_ablation, default_value = "full")]
    pub ablation: AblationMode,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// Output directory for train.csv, test.csv and labels.txt
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training documents
    #[arg(long, default_value_t = 300)]
    pub train_size: usize,
    /// Test documents
    #[arg(long, default_value_t = 150)]
    pub test_size: usize,
    /// Words per document
    #[arg(long, default_value_t = 12)]
    pub doc_len: usize,
    /// Marker keywords per class besides the label name
    #[arg(long, default_value_t = 4)]
    pub keywords: usize,
    /// Shared noise vocabulary size
    #[arg(long, default_value_t = 40)]
    pub noise_vocab: usize,
    /// Fraction of words drawn from the class keywords
    #[arg(long, default_value_t = 0.3)]
    pub keyword_rate: f64,
    /// Probability a class keyword is the label name itself
    #[arg(long, default_value_t = 0.5)]
    pub label_overlap: f64,
    /// Fraction of words drawn from other classes' keywords
    #[arg(long, default_value_t = 0.0)]
    pub confuser_rate: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub labels: Option<String>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub dropout: Option<f64>,
    pub l2_scope: Option<String>,
    pub gamma_mode: Option<String>,
    pub ablation: Option<String>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub val_size: Option<usize>,
    pub max_len: Option<usize>,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub backend: Option<String>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs. Exit code 1.
    Validation(String),
    /// Failure while running. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<idea_core::Error> for CliError {
    fn from(e: idea_core::Error) -> Self {
        match e {
            idea_core::Error::InvalidArgument(_) | idea_core::Error::Parse { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn parse_file<T>(v: &Option<String>, f: fn(&str) -> Result<T, String>) -> Result<Option<T>, CliError> {
    v.as_deref().map(f).transpose().map_err(CliError::Validation)
}

fn parse_ablation(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: idea_core::Error| e.to_string())
}

fn parse_gamma_mode(s: &str) -> Result<GammaMode, String> {
    s.parse().map_err(|e: idea_core::Error| e.to_string())
}

fn parse_l2_scope(s: &str) -> Result<L2Scope, String> {
    s.parse().map_err(|e: idea_core::Error| e.to_string())
}

fn parse_backend(s: &str) -> Result<EncoderBackend, String> {
    s.parse().map_err(|e: idea_core::Error| e.to_string())
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::ExportFeatures(a) => cmd_export_features(&a, out),
        Command::MakeSynthetic(a) => cmd_make_synthetic(&a, out),
    }
}

/// Everything a training command needs after merging flags, file and defaults.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub labels: LabelSet,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

/// Merge command-line flags over the config file over built-in defaults.
pub fn resolve(
    data: &DataArgs,
    hyper: &HyperArgs,
    ablation: Option<AblationMode>,
    seed: Option<u64>,
    seeds: Option<&[u64]>,
    out: Option<&Path>,
) -> Result<Resolved, CliError> {
    let file = match &hyper.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let dataset: Option<Dataset> = data.dataset.clone().or(file.dataset.clone()).map(|s| s.parse()).transpose()?;

    let mut cfg = TrainConfig::default();
    if let Some(ds) = dataset {
        cfg.epochs = ds.default_epochs();
    }
    macro_rules! set {
        ($field:ident, $flag:expr, $file:expr) => {
            if let Some(v) = $flag.or($file) {
                cfg.$field = v;
            }
        };
    }
    set!(epochs, hyper.epochs, file.epochs);
    set!(learning_rate, hyper.lr, file.lr);
    set!(batch_size, hyper.batch_size, file.batch_size);
    set!(lambda_l2, hyper.lambda, file.lambda);
    set!(dropout, hyper.dropout, file.dropout);
    set!(max_len, hyper.max_len, file.max_len);
    set!(d, hyper.d_model, file.d_model);
    set!(n_layers, hyper.layers, file.layers);
    set!(n_heads, hyper.heads, file.heads);
    set!(seed, seed, file.seed);
    set!(
        gamma_mode,
        hyper.gamma_mode,
        parse_file(&file.gamma_mode, parse_gamma_mode)?
    );
    set!(l2_scope, hyper.l2_scope, parse_file(&file.l2_scope, parse_l2_scope)?);
    set!(
        backend,
        hyper.backend,
        parse_file(&file.backend, parse_backend)?
    );
    set!(
        ablation,
        ablation,
        parse_file(&file.ablation, parse_ablation)?
    );
    cfg.max_steps = hyper.max_steps.or(file.max_steps);
    cfg.train_limit = hyper.train_limit.or(file.train_limit);
    cfg.test_limit = hyper.test_limit.or(file.test_limit);
    cfg.val_size = hyper.val_size.or(file.val_size);
    cfg.validate()?;

    let labels = match (data.labels.clone().or(file.labels.clone()), dataset) {
        (Some(list), _) => LabelSet::parse(&list)?,
        (None, Some(ds)) => LabelSet::new(&ds.default_labels())?,
        (None, None) => return Err(CliError::Validation("provide --labels or --dataset".into())),
    };
    let existing = |flag: &str, p: Option<PathBuf>| match p {
        Some(p) if p.is_file() => Ok(p),
        Some(p) => Err(CliError::Validation(format!("{flag} {} does not exist", p.display()))),
        None => Err(CliError::Validation(format!("{flag} is required"))),
    };
    let seeds = seeds
        .map(<[u64]>::to_vec)
        .or(file.seeds)
        .unwrap_or_else(|| vec![0, 1, 2, 3, 4]);
    if seeds.is_empty() {
        return Err(CliError::Validation("--seeds is empty".into()));
    }
    Ok(Resolved {
        train: cfg,
        labels,
        train_csv: existing("--train-csv", data.train_csv.clone().or(file.train_csv))?,
        test_csv: existing("--test-csv", data.test_csv.clone().or(file.test_csv))?,
        seeds,
        out: out.map(Path::to_path_buf).or(file.out),
    })
}

pub fn load_corpus(r: &Resolved) -> Result<Corpus, CliError> {
    Ok(Corpus {
        labels: r.labels.clone(),
        train: load_csv(&r.train_csv, r.labels.len())?,
        test: load_csv(&r.test_csv, r.labels.len())?,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(&format!("create {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(&format!("write {}", path.display()), e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let r = resolve(&args.data, &args.hyper, args.ablation, args.seed, None, args.out.as_deref())?;
    let corpus = load_corpus(&r)?;
    let outcome = train(&r.train, &corpus)?;
    let report = outcome.result.report();
    if let Some(dir) = &r.out {
        create_dir(dir)?;
        checkpoint::save(&outcome.model, &dir.join(CHECKPOINT_FILE))?;
        outcome.vocab.save(&dir.join(VOCAB_FILE))?;
        write_file(&dir.join(REPORT_FILE), &report)?;
        write_file(&dir.join(TIMINGS_FILE), &outcome.result.timings())?;
    }
    write!(out, "{report}").map_err(|e| runtime("write report", e))?;
    Ok(0)
}

fn load_trained(dir: &Path) -> Result<(idea_core::model::IdeaModel, Vocab), CliError> {
    for f in [CHECKPOINT_FILE, VOCAB_FILE] {
        if !dir.join(f).is_file() {
            return Err(CliError::Validation(format!("{} has no {f}", dir.display())));
        }
    }
    Ok((checkpoint::load(&dir.join(CHECKPOINT_FILE))?, Vocab::load(&dir.join(VOCAB_FILE))?))
}

fn max_len_of(model: &idea_core::model::IdeaModel) -> usize {
    model.config.encoder.max_positions.saturating_sub(2).max(1)
}

fn existing_file(flag: &str, p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{flag} {} does not exist", p.display())))
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    existing_file("--test-csv", &args.test_csv)?;
    if args.batch_size == 0 {
        return Err(CliError::Validation("batch size must be at least 1".into()));
    }
    let (model, vocab) = load_trained(&args.model)?;
    let mut docs = load_csv(&args.test_csv, model.labels.len())?;
    if let Some(n) = args.test_limit {
        docs = stratified_subsample(&docs, n, args.seed)?;
    }
    let metrics = evaluate(&model, &vocab, &docs, args.batch_size, max_len_of(&model))?;
    let mut report = String::new();
    metrics.write_report("test_", &mut report);
    write!(out, "{report}").map_err(|e| runtime("write report", e))?;
    Ok(0)
}

pub fn cmd_export_features(args: &ExportArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    existing_file("--csv", &args.csv)?;
    if args.batch_size == 0 {
        return Err(CliError::Validation("batch size must be at least 1".into()));
    }
    let (model, vocab) = load_trained(&args.model)?;
    let docs: Vec<Document> = load_csv(&args.csv, model.labels.len())?
        .into_iter()
        .filter(|d| !idea_core::text::tokenize(&d.text).is_empty())
        .collect();
    let batches = make_batches(&docs, &vocab, args.batch_size, max_len_of(&model), false, 0)?;
    let rows = export_features(&model, &batches, &args.out)?;
    writeln!(out, "wrote {rows} rows of width {} to {}", 2 + model.config.z_width(), args.out.display())
        .map_err(|e| runtime("write", e))?;
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if !(args.step > 0.0) {
        return Err(CliError::Validation("step must be positive".into()));
    }
    let mut worst: f64 = 0.0;
    let mut text = String::new();
    for &seed in &args.seeds {
        let report = gradient_check_tiny_model(TinyModelShape::default(), seed, args.step, args.ablation)?;
        for (name, err) in &report.per_parameter_errors {
            let _ = writeln!(text, "seed={seed} param={name} relative_error={err:.3e}");
        }
        let _ = writeln!(text, "seed={seed} max_relative_error={:.3e}", report.max_relative_error);
        worst = worst.max(report.max_relative_error);
    }
    let _ = writeln!(text, "max_relative_error={worst:.3e}");
    let _ = writeln!(text, "tolerance={GRADCHECK_TOLERANCE:e}");
    write!(out, "{text}").map_err(|e| runtime("write", e))?;
    if worst < GRADCHECK_TOLERANCE {
        Ok(0)
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

pub fn cmd_make_synthetic(args: &SyntheticArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = SyntheticConfig {
        num_classes: args.classes,
        train_size: args.train_size,
        test_size: args.test_size,
        doc_len: args.doc_len,
        keywords_per_class: args.keywords,
        noise_vocab: args.noise_vocab,
        keyword_rate: args.keyword_rate,
        label_overlap: args.label_overlap,
        confuser_rate: args.confuser_rate,
        seed: args.seed,
    };
    let corpus = cfg.generate()?;
    create_dir(&args.out)?;
    write_csv(&args.out.join("train.csv"), &corpus.train)?;
    write_csv(&args.out.join("test.csv"), &corpus.test)?;
    let labels = corpus.labels.names().join(",");
    write_file(&args.out.join("labels.txt"), &format!("{labels}\n"))?;
    writeln!(
        out,
        "wrote {} training and {} test documents to {}\nlabels={labels}",
        corpus.train.len(),
        corpus.test.len(),
        args.out.display()
    )
    .map_err(|e| runtime("write", e))?;
    Ok(0)
}

/// Test results of one ablation mode across seeds.
#[derive(Clone, Debug)]
pub struct ModeRuns {
    pub mode: AblationMode,
    pub runs: Vec<RunResult>,
}

impl ModeRuns {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test.accuracy).collect()
    }

    pub fn macro_f1s(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test.macro_f1).collect()
    }
}

/// Train every ablation mode once per seed.
pub fn ablation_sweep(config: &TrainConfig, corpus: &Corpus, seeds: &[u64]) -> Result<Vec<ModeRuns>, CliError> {
    AblationMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig { ablation: mode, ..config.clone() };
            let runs = idea_core::train::seed_sweep(&cfg, corpus, seeds)?;
            Ok(ModeRuns { mode, runs })
        })
        .collect()
}

/// Per-run lines followed by one summary row per mode with Welch's test
/// of its test accuracies against the full model.
pub fn ablation_table(sweep: &[ModeRuns]) -> Result<String, CliError> {
    let full = sweep
        .iter()
        .find(|m| m.mode == AblationMode::Full)
        .ok_or_else(|| CliError::Runtime("ablation sweep has no full-model runs".into()))?
        .accuracies();
    let mut s = String::new();
    for m in sweep {
        for r in &m.runs {
            let _ = writeln!(
                s,
                "run mode={} seed={} test_accuracy={:.6} test_macro_f1={:.6}",
                m.mode, r.seed, r.test.accuracy, r.test.macro_f1
            );
        }
    }
    let _ = writeln!(
        s,
        "{:<12} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8} {:>9}",
        "mode", "n", "acc_mean", "acc_std", "acc_se", "f1_mean", "welch_t", "df", "p"
    );
    for m in sweep {
        let acc = summarize(&m.accuracies())?;
        let f1 = summarize(&m.macro_f1s())?;
        let (t, df, p) = match welch_t_test(&m.accuracies(), &full) {
            Ok(w) => (format!("{:.4}", w.t), format!("{:.3}", w.df), format!("{:.4}", w.p)),
            Err(_) => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{:<12} {:>3} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>9} {:>8} {:>9}",
            m.mode.name(),
            acc.n,
            acc.mean,
            acc.std,
            acc.stderr,
            f1.mean,
            t,
            df,
            p
        );
    }
    Ok(s)
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let r = resolve(&args.data, &args.hyper, None, None, args.seeds.as_deref(), args.out.as_deref())?;
    let corpus = load_corpus(&r)?;
    let sweep = ablation_sweep(&r.train, &corpus, &r.seeds)?;
    let table = ablation_table(&sweep)?;
    if let Some(dir) = &r.out {
        for m in &sweep {
            for run in &m.runs {
                let run_dir = dir.join(m.mode.name()).join(format!("seed{}", run.seed));
                create_dir(&run_dir)?;
                write_file(&run_dir.join(REPORT_FILE), &run.report())?;
                write_file(&run_dir.join(TIMINGS_FILE), &run.timings())?;
            }
        }
        write_file(&dir.join("ablation.txt"), &table)?;
    }
    write!(out, "{table}").map_err(|e| runtime("write table", e))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn help_default(cmd: &clap::Command, arg: &str) -> String {
        let help = cmd
            .get_arguments()
            .find(|a| a.get_id() == arg)
            .unwrap_or_else(|| panic!("no flag {arg}"))
            .get_help()
            .unwrap()
            .to_string();
        let Some(start) = help.find("[default: ") else {
            let a = cmd.get_arguments().find(|a| a.get_id() == arg).unwrap();
            return a.get_default_values()[0].to_string_lossy().into_owned();
        };
        let start = start + "[default: ".len();
        let rest = &help[start..];
        rest[..rest.find([']', ';']).unwrap()].to_string()
    }

    #[test]
    fn help_defaults_match_train_config() {
        let cli = Cli::command();
        let train = cli.find_subcommand("train").unwrap();
        let d = TrainConfig::default();
        let num = |flag: &str| help_default(train, flag).parse::<f64>().unwrap();
        assert_eq!(num("epochs"), d.epochs as f64);
        assert_eq!(num("lr"), d.learning_rate);
        assert_eq!(num("batch_size"), d.batch_size as f64);
        assert_eq!(num("lambda"), d.lambda_l2);
        assert_eq!(num("dropout"), d.dropout);
        assert_eq!(num("max_len"), d.max_len as f64);
        assert_eq!(num("d_model"), d.d as f64);
        assert_eq!(num("layers"), d.n_layers as f64);
        assert_eq!(num("heads"), d.n_heads as f64);
        assert_eq!(num("seed"), d.seed as f64);
        assert_eq!(help_default(train, "ablation"), d.ablation.name());
        assert_eq!(help_default(train, "gamma_mode"), d.gamma_mode.name());
        assert_eq!(help_default(train, "backend"), d.backend.name());
        assert_eq!(help_default(train, "l2_scope"), d.l2_scope.name());
        for ds in Dataset::ALL {
            let help = train.get_arguments().find(|a| a.get_id() == "epochs").unwrap().get_help().unwrap().to_string();
            assert!(help.contains(&format!("{ds} {}", ds.default_epochs())), "{help}");
        }
    }

    #[test]
    fn help_defaults_match_synthetic_config() {
        let cli = Cli::command();
        let cmd = cli.find_subcommand("make-synthetic").unwrap();
        let d = SyntheticConfig::default();
        let num = |flag: &str| help_default(cmd, flag).parse::<f64>().unwrap();
        assert_eq!(num("classes"), d.num_classes as f64);
        assert_eq!(num("train_size"), d.train_size as f64);
        assert_eq!(num("test_size"), d.test_size as f64);
        assert_eq!(num("doc_len"), d.doc_len as f64);
        assert_eq!(num("keywords"), d.keywords_per_class as f64);
        assert_eq!(num("noise_vocab"), d.noise_vocab as f64);
        assert_eq!(num("keyword_rate"), d.keyword_rate);
        assert_eq!(num("label_overlap"), d.label_overlap);
        assert_eq!(num("confuser_rate"), d.confuser_rate);
    }

    #[test]
    fn every_flag_has_help() {
        fn walk(cmd: &clap::Command) {
            for a in cmd.get_arguments() {
                if a.get_id() != "help" && a.get_id() != "version" {
                    assert!(a.get_help().is_some(), "{} --{}", cmd.get_name(), a.get_id());
                }
            }
            cmd.get_subcommands().for_each(walk);
        }
        Cli::command().debug_assert();
        walk(&Cli::command());
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let v: CliError = idea_core::Error::InvalidArgument("x".into()).into();
        assert_eq!(v.exit_code(), 1);
        let r: CliError = idea_core::Error::Checkpoint("x".into()).into();
        assert_eq!(r.exit_code(), 2);
    }
}
