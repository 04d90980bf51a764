//! `a3r`: command-line driver for the re-ranking engine.
//!
//! Exit status is 0 on success, 1 for validation and configuration errors,
//! and 2 for I/O and file-format errors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a3r::augment::{augment_manifest, AttributeVocabulary, AugmentMode};
use a3r::eval::{mean_ap_at_k, movement_table, run_movement, EvalReport, Qrels, RecallDenominator};
use a3r::fixtures::{generate, FixtureParams};
use a3r::pipeline::{run_batch, Method, RerankConfig};
use a3r::provider::{EmbeddingProvider, FixtureProvider, StdioProvider};
use a3r::ranking::{encode_run, format_sig, load_run, round_sig};
use a3r::store::{
    l2_normalize, load_embeddings, load_manifest, save_embeddings, save_manifest, write_atomic,
};
use a3r::{EmbeddingMatrix, Manifest, RankedList};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

mod settings;

use settings::{FileSettings, RerankOverrides};

/// Rows must have unit norm within this tolerance to be accepted.
const UNIT_NORM_TOLERANCE: f64 = 1e-4;
const DEFAULT_EVAL_K: usize = 10;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn io(message: String) -> Self {
        CliError { code: 2, message }
    }

    fn config(message: String) -> Self {
        CliError { code: 1, message }
    }

    /// Prefixes `path` unless the message already names it.
    fn context(mut self, path: &Path) -> Self {
        let shown = path.display().to_string();
        if !self.message.contains(&shown) {
            self.message = format!("{shown}: {}", self.message);
        }
        self
    }
}

impl From<a3r::Error> for CliError {
    fn from(e: a3r::Error) -> Self {
        CliError {
            code: if e.is_io_or_format() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

trait Context<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for a3r::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::from(e).context(path))
    }
}

#[derive(Parser)]
#[command(
    name = "a3r",
    version,
    about = "Re-rank and evaluate text-to-image retrieval over precomputed embeddings"
)]
struct Cli {
    /// JSON settings file; command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// L2-normalize every row of an embedding file.
    Normalize(NormalizeArgs),
    /// Fill missing attribute slots of the gallery manifest.
    Augment(AugmentArgs),
    /// Plain cosine top-K search.
    Search(SearchArgs),
    /// Rank the gallery for every query with the chosen method.
    Rerank(RerankArgs),
    /// Score a run file with mAP@K.
    Eval(EvalArgs),
    /// Baseline search, re-ranking, evaluation and rank movement in one go.
    Pipeline(PipelineArgs),
    /// Compare where relevant items sit in two run files.
    Report(ReportArgs),
    /// Write a seeded synthetic dataset.
    Fixtures(FixturesArgs),
}

#[derive(Args)]
struct GalleryArgs {
    #[arg(long, value_name = "FILE")]
    gallery_emb: PathBuf,
    #[arg(long, value_name = "FILE")]
    gallery_manifest: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, value_name = "FILE")]
    query_emb: PathBuf,
    #[arg(long, value_name = "FILE")]
    query_manifest: PathBuf,
}

#[derive(Args)]
struct RerankFlags {
    /// none, krnn or a3r.
    #[arg(long)]
    method: Option<Method>,
    /// Candidates re-ranked per query (0 = whole gallery).
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Zero out negative query-candidate similarities before adaptation.
    #[arg(long)]
    clamp: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl RerankFlags {
    fn overrides(&self) -> RerankOverrides {
        RerankOverrides {
            method: self.method,
            pool: self.pool,
            k1: self.k1,
            k2: self.k2,
            lambda: self.lambda,
            clamp: self.clamp,
        }
    }
}

#[derive(Args)]
struct ProviderArgs {
    /// Attribute vocabulary JSON.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Candidate-text embeddings; the text lookup sits next to it as .jsonl.
    #[arg(long, value_name = "FILE", conflicts_with = "provider_cmd")]
    provider_fixture: Option<PathBuf>,
    /// Encoder process speaking the stdio embedding protocol.
    #[arg(long, value_name = "COMMAND")]
    provider_cmd: Option<String>,
    /// Score all value combinations together instead of one slot at a time.
    #[arg(long)]
    joint: bool,
}

#[derive(Args)]
struct RelevanceArgs {
    /// Relevance judgments, JSON lines.
    #[arg(long, value_name = "FILE", conflicts_with = "by_label")]
    qrels: Option<PathBuf>,
    /// Judge relevance by label equality between the query and gallery manifests.
    #[arg(long)]
    by_label: bool,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Embedding file to normalize.
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    gallery: GalleryArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Augmented manifest (default: standard output).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    gallery: GalleryArgs,
    #[command(flatten)]
    query: QueryArgs,
    /// Results per query.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run file (default: standard output).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    #[command(flatten)]
    gallery: GalleryArgs,
    #[command(flatten)]
    query: QueryArgs,
    #[command(flatten)]
    rerank: RerankFlags,
    /// Results per query (default: the whole gallery).
    #[arg(long)]
    k: Option<usize>,
    /// Run file (default: standard output).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run file to score.
    #[arg(long, value_name = "FILE")]
    run: PathBuf,
    #[command(flatten)]
    relevance: RelevanceArgs,
    #[arg(long, value_name = "FILE", requires = "by_label")]
    query_manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "by_label")]
    gallery_manifest: Option<PathBuf>,
    /// Cutoff K (default 10).
    #[arg(long)]
    k: Option<usize>,
    /// Include per-query AP values.
    #[arg(long)]
    per_query: bool,
    /// Divide recall by the number of relevant items instead of min(relevant, K).
    #[arg(long)]
    strict_recall: bool,
    /// Report file (default: standard output).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    gallery: GalleryArgs,
    #[command(flatten)]
    query: QueryArgs,
    #[command(flatten)]
    rerank: RerankFlags,
    #[command(flatten)]
    relevance: RelevanceArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Evaluation cutoff K (default 10).
    #[arg(long)]
    k: Option<usize>,
    /// Divide recall by the number of relevant items instead of min(relevant, K).
    #[arg(long)]
    strict_recall: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline run file.
    #[arg(long, value_name = "FILE")]
    before: PathBuf,
    /// Re-ranked run file.
    #[arg(long, value_name = "FILE")]
    after: PathBuf,
    #[command(flatten)]
    relevance: RelevanceArgs,
    #[arg(long, value_name = "FILE", requires = "by_label")]
    query_manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "by_label")]
    gallery_manifest: Option<PathBuf>,
    /// JSON report file. The table goes to standard output when this is
    /// set, to standard error otherwise.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Norm of the offset shared by every query.
    #[arg(long, default_value_t = 0.9)]
    gap: f64,
    /// Gallery noise per coordinate.
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Query noise per coordinate.
    #[arg(long, default_value_t = 0.15)]
    query_sigma: f64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("A3R_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("a3r: error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => FileSettings::load(p)?,
        None => FileSettings::default(),
    };
    match cli.command {
        Command::Normalize(a) => cmd_normalize(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Search(a) => cmd_search(a, &file),
        Command::Rerank(a) => cmd_rerank(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Pipeline(a) => cmd_pipeline(a, &file),
        Command::Report(a) => cmd_report(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    }
}

fn load_unit_embeddings(path: &Path) -> CliResult<EmbeddingMatrix> {
    let m = load_embeddings(path).at(path)?;
    for (i, row) in m.iter_rows().enumerate() {
        let n = a3r::similarity::norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(CliError::config(format!(
                "{}: row {i} has norm {}, expected unit rows (see `a3r normalize`)",
                path.display(),
                format_sig(n)
            )));
        }
    }
    Ok(m)
}

fn load_pair(emb: &Path, manifest: &Path, what: &str) -> CliResult<(EmbeddingMatrix, Manifest)> {
    let m = load_unit_embeddings(emb)?;
    let ids = load_manifest(manifest).at(manifest)?;
    ids.check_aligned(&m, what).at(manifest)?;
    Ok((m, ids))
}

fn workers(flag: Option<usize>, file: &FileSettings) -> usize {
    flag.or(file.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_qrels(
    rel: &RelevanceArgs,
    query_manifest: Option<&Path>,
    gallery_manifest: Option<&Path>,
) -> CliResult<Qrels> {
    if let Some(p) = &rel.qrels {
        return Qrels::load(p).at(p);
    }
    if !rel.by_label {
        return Err(CliError::config(
            "relevance needs --qrels or --by-label".into(),
        ));
    }
    let (Some(q), Some(g)) = (query_manifest, gallery_manifest) else {
        return Err(CliError::config(
            "--by-label needs --query-manifest and --gallery-manifest".into(),
        ));
    };
    Qrels::from_labels(&load_manifest(q).at(q)?, &load_manifest(g).at(g)?).map_err(Into::into)
}

/// Writes `text` to `path`, or to standard output without a path. A
/// trailing newline is added when missing.
fn emit(path: Option<&Path>, text: &str) -> CliResult {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match path {
        Some(p) => write_atomic(p, text.as_bytes()).at(p),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(format!("standard output: {e}"))),
    }
}

/// Rounds every float in `v` to nine significant digits.
fn sig_digits(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => json!(round_sig(n.as_f64().expect("checked f64"))),
        Value::Array(a) => Value::Array(a.into_iter().map(sig_digits).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, sig_digits(v))).collect()),
        other => other,
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(&sig_digits(v.clone())).expect("JSON values serialize") + "\n"
}

fn config_echo(cfg: &RerankConfig, k: usize) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v["k"] = json!(k);
    v
}

fn cmd_normalize(a: NormalizeArgs) -> CliResult {
    let m = load_embeddings(&a.input).at(&a.input)?;
    let n = l2_normalize(&m).at(&a.input)?;
    save_embeddings(&n, &a.out).at(&a.out)
}

fn make_provider(p: &ProviderArgs) -> CliResult<Box<dyn EmbeddingProvider>> {
    match (&p.provider_fixture, &p.provider_cmd) {
        (Some(path), _) => Ok(Box::new(FixtureProvider::load(path).at(path)?)),
        (None, Some(cmd)) => Ok(Box::new(StdioProvider::spawn_command_line(cmd)?)),
        (None, None) => Err(CliError::config(
            "augmentation needs --provider-fixture or --provider-cmd".into(),
        )),
    }
}

fn augment(
    gallery: &EmbeddingMatrix,
    manifest: &Manifest,
    p: &ProviderArgs,
) -> CliResult<Manifest> {
    let vocab_path = p
        .vocab
        .as_deref()
        .ok_or_else(|| CliError::config("augmentation needs --vocab".into()))?;
    let vocab = AttributeVocabulary::load(vocab_path).at(vocab_path)?;
    let provider = make_provider(p)?;
    let mode = if p.joint {
        AugmentMode::Joint
    } else {
        AugmentMode::Greedy
    };
    Ok(augment_manifest(
        manifest,
        gallery,
        &vocab,
        provider.as_ref(),
        mode,
    )?)
}

fn cmd_augment(a: AugmentArgs) -> CliResult {
    let (g, ids) = load_pair(
        &a.gallery.gallery_emb,
        &a.gallery.gallery_manifest,
        "gallery",
    )?;
    let out = augment(&g, &ids, &a.provider)?;
    match &a.out {
        Some(p) => save_manifest(&out, p).at(p),
        None => {
            let mut text = String::new();
            for r in out.records() {
                text.push_str(&serde_json::to_string(r).expect("records serialize"));
                text.push('\n');
            }
            emit(None, &text)
        }
    }
}

fn batch(
    a_gallery: &GalleryArgs,
    a_query: &QueryArgs,
    cfg: &RerankConfig,
    workers: usize,
) -> CliResult<(Vec<RankedList>, Manifest, Manifest)> {
    let (g, gids) = load_pair(
        &a_gallery.gallery_emb,
        &a_gallery.gallery_manifest,
        "gallery",
    )?;
    let (q, qids) = load_pair(&a_query.query_emb, &a_query.query_manifest, "queries")?;
    let runs = run_batch(&q, &qids, &g, &gids, cfg, workers)?;
    Ok((runs, qids, gids))
}

fn cmd_search(a: SearchArgs, file: &FileSettings) -> CliResult {
    let k = a.k.or(file.k).unwrap_or(DEFAULT_EVAL_K);
    if k == 0 {
        return Err(CliError::config("--k must be at least 1".into()));
    }
    let cfg = RerankConfig {
        keep: k,
        ..RerankConfig::with_method(Method::None)
    };
    let (runs, _, _) = batch(&a.gallery, &a.query, &cfg, workers(a.workers, file))?;
    emit(a.out.as_deref(), &encode_run(&runs))
}

fn cmd_rerank(a: RerankArgs, file: &FileSettings) -> CliResult {
    let mut cfg = a.rerank.overrides().apply(file.rerank);
    if let Some(k) = a.k.or(file.k) {
        cfg.keep = k;
    }
    let (runs, _, _) = batch(&a.gallery, &a.query, &cfg, workers(a.rerank.workers, file))?;
    emit(a.out.as_deref(), &encode_run(&runs))
}

fn eval_value(report: &EvalReport, per_query: bool) -> Value {
    let mut v = serde_json::to_value(report).expect("reports serialize");
    if !per_query {
        v.as_object_mut()
            .expect("report is an object")
            .remove("per_query");
    }
    v
}

fn denominator(strict: bool) -> RecallDenominator {
    if strict {
        RecallDenominator::Relevant
    } else {
        RecallDenominator::MinRelevantK
    }
}

fn cmd_eval(a: EvalArgs, file: &FileSettings) -> CliResult {
    let k = a.k.or(file.k).unwrap_or(DEFAULT_EVAL_K);
    let runs = load_run(&a.run).at(&a.run)?;
    let qrels = load_qrels(
        &a.relevance,
        a.query_manifest.as_deref(),
        a.gallery_manifest.as_deref(),
    )?;
    let report = mean_ap_at_k(&runs, &qrels, k, denominator(a.strict_recall)).at(&a.run)?;
    emit(a.out.as_deref(), &pretty(&eval_value(&report, a.per_query)))
}

fn cmd_report(a: ReportArgs) -> CliResult {
    let before = load_run(&a.before).at(&a.before)?;
    let after = load_run(&a.after).at(&a.after)?;
    let qrels = load_qrels(
        &a.relevance,
        a.query_manifest.as_deref(),
        a.gallery_manifest.as_deref(),
    )?;
    let movement = run_movement(&before, &after, &qrels)?;
    let report = pretty(&serde_json::to_value(&movement).expect("movement serializes"));
    let table = movement_table(&movement);
    match &a.out {
        Some(p) => {
            emit(Some(p), &report)?;
            emit(None, &table)
        }
        None => {
            eprint!("{table}");
            emit(None, &report)
        }
    }
}

fn cmd_pipeline(a: PipelineArgs, file: &FileSettings) -> CliResult {
    let cfg = a.rerank.overrides().apply(file.rerank);
    cfg.validate()?;
    let k = a.k.or(file.k).unwrap_or(DEFAULT_EVAL_K);
    if k == 0 {
        return Err(CliError::config("--k must be at least 1".into()));
    }
    let workers = workers(a.rerank.workers, file);
    let (g, gids) = load_pair(
        &a.gallery.gallery_emb,
        &a.gallery.gallery_manifest,
        "gallery",
    )?;
    let (q, qids) = load_pair(&a.query.query_emb, &a.query.query_manifest, "queries")?;
    let qrels = match (&a.relevance.qrels, a.relevance.by_label) {
        (Some(p), _) => Qrels::load(p).at(p)?,
        (None, true) => Qrels::from_labels(&qids, &gids)?,
        (None, false) => {
            return Err(CliError::config(
                "relevance needs --qrels or --by-label".into(),
            ))
        }
    };
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;

    let augmented = if a.provider.vocab.is_some() {
        Some(augment(&g, &gids, &a.provider)?)
    } else {
        None
    };

    let baseline_cfg = RerankConfig {
        keep: 0,
        ..RerankConfig::with_method(Method::None)
    };
    let baseline = run_batch(&q, &qids, &g, &gids, &baseline_cfg, workers)?;
    let runs = run_batch(&q, &qids, &g, &gids, &cfg, workers)?;
    let denom = denominator(a.strict_recall);
    let base_eval = mean_ap_at_k(&baseline, &qrels, k, denom)?;
    let eval = mean_ap_at_k(&runs, &qrels, k, denom)?;
    let movement = run_movement(&baseline, &runs, &qrels)?;

    let out = |name: &str| a.out.join(name);
    emit(Some(&out("baseline.jsonl")), &encode_run(&baseline))?;
    emit(Some(&out("run.jsonl")), &encode_run(&runs))?;
    if let Some(m) = &augmented {
        save_manifest(m, out("augmented_gallery.jsonl")).at(&out("augmented_gallery.jsonl"))?;
    }
    let mut summary = BTreeMap::new();
    summary.insert("promoted", movement.promoted);
    summary.insert("demoted", movement.demoted);
    summary.insert("unchanged", movement.unchanged);
    let report = json!({
        "config": config_echo(&cfg, k),
        "method": cfg.method.to_string(),
        "map_at_k": eval.map_at_k,
        "baseline_map_at_k": base_eval.map_at_k,
        "movement": summary,
        "eval": eval_value(&eval, true),
        "baseline_eval": eval_value(&base_eval, true),
    });
    emit(Some(&out("report.json")), &pretty(&report))?;
    emit(
        Some(&out("movement.json")),
        &pretty(&serde_json::to_value(&movement).expect("movement serializes")),
    )?;
    emit(Some(&out("movement.txt")), &movement_table(&movement))?;

    emit(
        None,
        &format!(
            "method {}  mAP@{k} {}  none {}  promoted {}  demoted {}",
            cfg.method,
            format_sig(eval.map_at_k),
            format_sig(base_eval.map_at_k),
            movement.promoted,
            movement.demoted
        ),
    )
}

fn cmd_fixtures(a: FixturesArgs) -> CliResult {
    let params = FixtureParams {
        gap: a.gap,
        sigma: a.sigma,
        query_sigma: a.query_sigma,
        ..FixtureParams::with_seed(a.seed)
    };
    let f = generate(&params)?;
    f.write(&a.out)?;
    emit(
        None,
        &format!("wrote fixture seed {} to {}", a.seed, a.out.display()),
    )
}
