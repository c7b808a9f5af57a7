//! Command implementations behind the `mastitis` binary. Each command
//! writes its report to `out` and returns a [`Failure`] carrying the exit
//! code on error.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use mastitis_core::cfx::{self, CfxConfig, DistanceWeights};
use mastitis_core::checks::{self, CheckOptions};
use mastitis_core::dataset::{self, FeatureVector, Herd, HerdContext, LabeledInstance, SynthConfig};
use mastitis_core::evalkit::{self, HorizonCurve, ScoreShiftSummary};
use mastitis_core::featcat::{self, FeatureCatalog};
use mastitis_core::gbm::{self, Ensemble, GbmError, ScoreModel, TrainConfig, DEFAULT_THRESHOLD};
use mastitis_core::narrate::{self, NarrationStyle, NumberStyle};
use mastitis_core::stats;
use mastitis_service::{AppState, ServiceConfig};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PRECONDITION: u8 = 3;

pub const DEFAULT_SPLIT_DATE: &str = "2018-04-01";
/// One structured counterfactual document per line, in sample order.
pub const COUNTERFACTUALS_FILE: &str = "counterfactuals.jsonl";

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

trait Exit<T> {
    fn exit(self, code: u8) -> CmdResult<T>;
    fn usage(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.exit(EXIT_USAGE)
    }
    fn failure(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.exit(EXIT_FAILURE)
    }
}

impl<T, E: Into<anyhow::Error>> Exit<T> for Result<T, E> {
    fn exit(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn fail<T>(code: u8, error: anyhow::Error) -> CmdResult<T> {
    Err(Failure { code, error })
}

fn emit(out: &mut dyn Write, text: impl fmt::Display) -> CmdResult {
    writeln!(out, "{text}").context("writing output").failure()
}

#[derive(Debug, Parser)]
#[command(name = "mastitis", version, about = "Mastitis risk prediction with counterfactual explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic herd as CSV files.
    Synth(SynthArgs),
    /// Train a model on a temporal split and report its quality.
    Train(TrainArgs),
    /// Horizon recall plus batch counterfactuals for confidently healthy predictions.
    Eval(EvalArgs),
    /// Explain one cow's healthy prediction in a sentence.
    Explain(ExplainArgs),
    /// Compare the numerics against independent oracles.
    OracleCheck(OracleCheckArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON file with synthetic herd settings; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for the CSV files.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of cows.
    #[arg(long)]
    pub n_cows: Option<usize>,
    /// Override the number of simulated days.
    #[arg(long)]
    pub n_days: Option<i64>,
}

#[derive(Debug, Clone, Args)]
pub struct CatalogArgs {
    /// Feature policy file; the built-in catalog when absent.
    #[arg(long)]
    pub policy_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Herd CSV directory.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Instances dated before this day train; the rest test.
    #[arg(long, default_value = DEFAULT_SPLIT_DATE)]
    pub split_date: NaiveDate,
    /// Label horizon in days (1 to 7).
    #[arg(long, default_value_t = 7)]
    pub horizon: u8,
    /// Scores at or above this are classified Sick.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub catalog: CatalogArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    /// JSON file with training settings; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the model; distance weights go next to it.
    #[arg(long)]
    pub out_model: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Most features a counterfactual may change.
    #[arg(long, default_value_t = 3)]
    pub max_changes: usize,
    /// Search the min-change lattice exactly instead of solving continuously.
    #[arg(long)]
    pub grid: bool,
}

impl SearchArgs {
    fn config(&self) -> CmdResult<CfxConfig> {
        let config = CfxConfig { max_changes: self.max_changes, grid_mode: self.grid, ..CfxConfig::default() };
        config.validate().usage()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for the CSV and JSON reports.
    #[arg(long)]
    pub report_dir: PathBuf,
    /// Test instances to explain.
    #[arg(long, default_value_t = 200)]
    pub sample_n: usize,
    /// Only instances with P(Healthy) at least this are sampled.
    #[arg(long, default_value_t = 0.8)]
    pub min_healthy_confidence: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Herd CSV directory.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Cow identifier.
    #[arg(long)]
    pub cow: String,
    /// Day to explain; the cow's last recording when absent.
    #[arg(long)]
    pub date: Option<NaiveDate>,
    /// Scores at or above this are classified Sick.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write amounts as digits rather than words.
    #[arg(long)]
    pub digits: bool,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub catalog: CatalogArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OracleCheckArgs {
    /// Random toy instances for the grid check; numeric oracles use 20 vectors per instance.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// Seed for the random vectors and instances.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Herd CSV directory.
    #[arg(long, env = "MASTITIS_DATA_DIR")]
    pub data_dir: PathBuf,
    /// Model file; the service answers 503 for scoring until one is loaded.
    #[arg(long, env = "MASTITIS_MODEL")]
    pub model: Option<PathBuf>,
    /// TCP port to listen on.
    #[arg(long, env = "MASTITIS_PORT", default_value_t = mastitis_service::state::DEFAULT_PORT)]
    pub port: u16,
    /// Feature policy file; the built-in catalog when absent.
    #[arg(long, env = "MASTITIS_POLICY_FILE")]
    pub policy_file: Option<PathBuf>,
    /// Accepted for symmetry with the other commands; serving is deterministic.
    #[arg(long, env = "MASTITIS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory with the UI bundle served at `/`.
    #[arg(long, env = "MASTITIS_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// Explanation audit log; `audit.jsonl` in the data directory when absent.
    #[arg(long, env = "MASTITIS_AUDIT_LOG")]
    pub audit_log: Option<PathBuf>,
    /// Seconds allowed for one explanation.
    #[arg(long, default_value_t = 10)]
    pub timeout_secs: u64,
    /// Scores at or above this are classified Sick.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out).map(drop),
        Command::Eval(a) => eval(&a, out).map(drop),
        Command::Explain(a) => explain(&a, out).map(drop),
        Command::OracleCheck(a) => oracle_check(&a, out),
        Command::Serve(a) => serve(&a, out),
    }
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CmdResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).usage()?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).usage()
}

fn load_catalog(args: &CatalogArgs) -> CmdResult<FeatureCatalog> {
    match &args.policy_file {
        Some(p) => featcat::load_catalog(p).with_context(|| format!("policy file {}", p.display())).usage(),
        None => Ok(featcat::default_catalog()),
    }
}

fn load_herd(dir: &Path) -> CmdResult<Herd> {
    dataset::load_csv(dir).with_context(|| format!("herd data in {}", dir.display())).usage()
}

fn load_model(path: &Path, catalog: &FeatureCatalog) -> CmdResult<Ensemble> {
    gbm::load_model(path, catalog).with_context(|| format!("model {}", path.display())).usage()
}

/// Sidecar weights when present, otherwise the MAD of `rows`.
fn load_weights(model_path: &Path, rows: &[&[f64]], catalog: &FeatureCatalog) -> CmdResult<DistanceWeights> {
    let sidecar = cfx::weights_path_for(model_path);
    if sidecar.exists() {
        DistanceWeights::load(&sidecar, catalog).usage()
    } else {
        cfx::mad_weights(rows, catalog).usage()
    }
}

fn check_threshold(threshold: f64) -> CmdResult {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        fail(EXIT_USAGE, anyhow!("--threshold must be strictly between 0 and 1, got {threshold}"))
    }
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let mut config: SynthConfig = read_json_config(args.config.as_deref())?;
    if let Some(n) = args.n_cows {
        config.n_cows = n;
    }
    if let Some(n) = args.n_days {
        config.n_days = n;
    }
    let herd = dataset::generate_herd(&config, args.seed).usage()?;
    dataset::save_csv(&herd, &args.out).with_context(|| format!("writing {}", args.out.display())).failure()?;
    emit(
        out,
        format_args!(
            "wrote {} cows and {} milk recordings to {}",
            herd.cows.len(),
            herd.milk.len(),
            args.out.display()
        ),
    )
}

struct Split {
    catalog: FeatureCatalog,
    herd: Herd,
    train: Vec<LabeledInstance>,
    test: Vec<LabeledInstance>,
}

fn split(args: &SplitArgs) -> CmdResult<Split> {
    check_threshold(args.threshold)?;
    let catalog = load_catalog(&args.catalog)?;
    let herd = load_herd(&args.data_dir)?;
    let instances = dataset::label_instances(&herd, args.horizon, &catalog).usage()?;
    let (train, test) = evalkit::temporal_split(instances, args.split_date).usage()?;
    Ok(Split { catalog, herd, train, test })
}

fn sick_count(instances: &[LabeledInstance]) -> usize {
    instances.iter().filter(|i| i.label.is_sick()).count()
}

fn auc(model: &Ensemble, instances: &[LabeledInstance]) -> Option<f64> {
    let scores: Vec<f64> = instances.iter().map(|i| model.score(&i.x.values)).collect();
    let labels: Vec<bool> = instances.iter().map(|i| i.label.is_sick()).collect();
    stats::roc_auc(&scores, &labels)
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "n/a (one class only)".into(), |a| format!("{a:.3}"))
}

fn test_vectors(test: &[LabeledInstance]) -> Vec<FeatureVector> {
    test.iter().map(|i| i.x.clone()).collect()
}

fn print_curve(out: &mut dyn Write, curve: Option<&HorizonCurve>, threshold: f64) -> CmdResult {
    let Some(curve) = curve else {
        return emit(out, "recall by warning horizon: no infection in the test period has a preceding record");
    };
    let n = curve.points.first().map_or(0, |p| p.n_infections);
    emit(out, format_args!("recall by warning horizon (threshold {threshold}, {n} infections):"))?;
    for p in &curve.points {
        let days = if p.horizon_days == 1 { "day" } else { "days" };
        emit(out, format_args!("  {} {days} ahead: {:.3}", p.horizon_days, p.proportion_found))?;
    }
    Ok(())
}

fn horizon_curve(model: &Ensemble, s: &Split, split: NaiveDate, threshold: f64) -> Option<HorizonCurve> {
    let infections = evalkit::infections_from(&s.herd, split);
    evalkit::horizon_recall(model, &test_vectors(&s.test), &infections, threshold).ok()
}

/// Metrics printed by `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub curve: Option<HorizonCurve>,
    pub model_hash: String,
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CmdResult<TrainSummary> {
    let config: TrainConfig = read_json_config(args.config.as_deref())?;
    let s = split(&args.split)?;
    let model = gbm::train(&s.train, &config, &s.catalog.version).map_err(|e| match e {
        GbmError::SingleClass(_) => Failure { code: EXIT_PRECONDITION, error: e.into() },
        e => Failure { code: EXIT_USAGE, error: e.into() },
    })?;
    gbm::save_model(&model, &args.out_model).with_context(|| format!("writing {}", args.out_model.display())).failure()?;
    let rows: Vec<&[f64]> = s.train.iter().map(|i| i.x.values.as_slice()).collect();
    let weights = cfx::mad_weights(&rows, &s.catalog).failure()?;
    weights.save(&cfx::weights_path_for(&args.out_model), &s.catalog).failure()?;

    let summary = TrainSummary {
        n_train: s.train.len(),
        n_test: s.test.len(),
        train_auc: auc(&model, &s.train),
        test_auc: auc(&model, &s.test),
        curve: horizon_curve(&model, &s, args.split.split_date, args.split.threshold),
        model_hash: model.fingerprint(),
    };
    emit(out, format_args!("training instances: {} ({} sick)", s.train.len(), sick_count(&s.train)))?;
    emit(out, format_args!("test instances: {} ({} sick)", s.test.len(), sick_count(&s.test)))?;
    emit(out, format_args!("train AUC: {}", fmt_auc(summary.train_auc)))?;
    emit(out, format_args!("test AUC: {}", fmt_auc(summary.test_auc)))?;
    print_curve(out, summary.curve.as_ref(), args.split.threshold)?;
    emit(out, format_args!("model written to {} (sha256 {})", args.out_model.display(), summary.model_hash))?;
    Ok(summary)
}

/// Results printed by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub curve: Option<HorizonCurve>,
    pub shift: ScoreShiftSummary,
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CmdResult<EvalSummary> {
    let search = args.search.config()?;
    let s = split(&args.split)?;
    let model = load_model(&args.model, &s.catalog)?;
    let rows: Vec<&[f64]> = s.train.iter().map(|i| i.x.values.as_slice()).collect();
    let weights = load_weights(&args.model, &rows, &s.catalog)?;

    let curve = horizon_curve(&model, &s, args.split.split_date, args.split.threshold);
    let vectors = test_vectors(&s.test);
    let samples = evalkit::sample_high_confidence_healthy(
        &model,
        &vectors,
        args.min_healthy_confidence,
        args.sample_n,
        args.seed,
    )
    .usage()?;
    let results = evalkit::explain_batch(&model, &samples, &search, &s.catalog, &weights);

    let mut lines = String::new();
    for (x, r) in samples.iter().zip(&results) {
        let r = r.as_ref().map_err(|e| anyhow!("cow {} on {}: {e}", x.cow_id, x.as_of)).failure()?;
        let doc = r.document(x, &s.catalog, &weights);
        lines.push_str(&serde_json::to_string(&doc).expect("document serializes"));
        lines.push('\n');
    }
    let shift = evalkit::summarize(&results);
    let report_curve = curve.clone().unwrap_or(HorizonCurve { points: vec![] });
    evalkit::export_report(&report_curve, &shift, &args.report_dir).failure()?;
    let path = args.report_dir.join(COUNTERFACTUALS_FILE);
    std::fs::write(&path, lines).with_context(|| format!("writing {}", path.display())).failure()?;

    print_curve(out, curve.as_ref(), args.split.threshold)?;
    let cutoff = 1.0 - args.min_healthy_confidence;
    emit(out, format_args!("sampled {} test instances with P(Sick) <= {cutoff:.2}", shift.n_samples))?;
    emit(out, format_args!("counterfactuals found: {} of {}", shift.n_found, shift.n_samples))?;
    emit(out, format_args!("flip_rate: {:.3}", shift.flip_rate))?;
    for (o, c) in shift.original_quantiles.iter().zip(&shift.counterfactual_quantiles) {
        emit(out, format_args!("  q{:<4} P(Sick) {:.3} -> {:.3}", o.level, o.value, c.value))?;
    }
    emit(out, format_args!("report written to {}", args.report_dir.display()))?;
    Ok(EvalSummary { curve, shift })
}

/// What `explain` printed.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub sentence: Option<String>,
    pub document: cfx::CounterfactualDocument,
}

pub fn explain(args: &ExplainArgs, out: &mut dyn Write) -> CmdResult<Explanation> {
    check_threshold(args.threshold)?;
    let search = args.search.config()?;
    let catalog = load_catalog(&args.catalog)?;
    let model = load_model(&args.model, &catalog)?;
    let herd = load_herd(&args.data_dir)?;
    let Some(cow) = herd.cow(&args.cow) else {
        return fail(EXIT_USAGE, anyhow!("no cow `{}` in {}", args.cow, args.data_dir.display()));
    };
    let milk = herd.milk_for(&cow.cow_id);
    let date = match args.date.or_else(|| milk.last().map(|m| m.date)) {
        Some(d) => d,
        None => return fail(EXIT_USAGE, anyhow!("cow {} has no milk recordings", cow.cow_id)),
    };
    let ctx = HerdContext::from_herd(&herd);
    let x = dataset::engineer_features(cow, &milk, date, &catalog, &ctx).usage()?;
    let score = model.score(&x.values);
    if score >= args.threshold {
        return fail(
            EXIT_PRECONDITION,
            anyhow!("cow {} is already predicted to succumb to mastitis (P(Sick) = {score:.3})", cow.cow_id),
        );
    }
    let all = dataset::herd_vectors(&herd, &catalog);
    let rows: Vec<&[f64]> = all.iter().map(|v| v.values.as_slice()).collect();
    let weights = load_weights(&args.model, &rows, &catalog)?;
    let result = cfx::find_counterfactual(&model, &x, &catalog, &weights, &search).map_err(|e| match e {
        cfx::CfxError::AlreadySick { .. } => Failure { code: EXIT_PRECONDITION, error: e.into() },
        e => Failure { code: EXIT_USAGE, error: e.into() },
    })?;
    let document = result.document(&x, &catalog, &weights);
    let number_style = if args.digits { NumberStyle::Digits } else { NumberStyle::Words };
    let style = NarrationStyle::for_catalog(&catalog, number_style);
    let sentence = narrate::render(&cow.cow_id, &document, &style).ok();
    match &sentence {
        Some(s) => emit(out, s)?,
        None => emit(
            out,
            format_args!(
                "No change to at most {} actionable features makes cow {} likely to succumb to mastitis.",
                search.max_changes, cow.cow_id
            ),
        )?,
    }
    emit(out, serde_json::to_string_pretty(&document).expect("document serializes"))?;
    Ok(Explanation { sentence, document })
}

pub fn oracle_check(args: &OracleCheckArgs, out: &mut dyn Write) -> CmdResult {
    if args.n == 0 {
        eprintln!("warning: --n 0 samples nothing; the randomized checks pass vacuously");
    }
    let outcomes = checks::run_all(&CheckOptions::scaled(args.n, args.seed));
    for o in &outcomes {
        emit(out, format_args!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail))?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        fail(EXIT_FAILURE, anyhow!("oracle checks failed: {}", failed.join(", ")))
    }
}

pub fn serve_config(args: &ServeArgs) -> ServiceConfig {
    let mut config = ServiceConfig::new(&args.data_dir);
    config.model_path = args.model.clone();
    config.policy_file = args.policy_file.clone();
    config.port = args.port;
    config.seed = args.seed;
    config.static_dir = args.static_dir.clone();
    if let Some(p) = &args.audit_log {
        config.audit_log = p.clone();
    }
    config.request_timeout = Duration::from_secs(args.timeout_secs);
    config.threshold = args.threshold;
    config
}

pub fn serve(args: &ServeArgs, out: &mut dyn Write) -> CmdResult {
    let config = serve_config(args);
    let state = AppState::load(config).usage()?;
    let addr = mastitis_service::state::bind_addr(&state.config);
    emit(out, format_args!("serving {} cows on http://{addr}", state.bundle().snapshot.cows.len()))?;
    out.flush().ok();
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime").failure()?;
    runtime.block_on(mastitis_service::serve(state)).failure()
}
