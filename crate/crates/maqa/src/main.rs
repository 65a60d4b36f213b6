use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maqa::analysis::{
    attack_reader, attack_verifier, cluster_usage_from_report, evidence_usage,
    summarize_reader_attacks, summarize_verifier_attacks, support_distribution, write_records_jsonl,
    AttackOptions, AttackRecord, QuestionSelection, ReaderAttack, VerifierAttack,
};
use maqa::backend::{
    BudgetReader, EmbedderBackend, GoldMap, HashEmbedder, KeywordReader, KeywordRecaller,
    OracleReader, OracleRecaller, PrefixEmbedder, ReaderBackend, RecallerBackend, SlotReader,
    SupportContrastVerifier, SupportCountVerifier, ThresholdReader, VerifierBackend,
};
use maqa::config::ConfigOverlay;
use maqa::cost::{cost_report, CostProfile, Stage};
use maqa::dataset::{
    import_flat_dataset, load_corpus, load_dataset, load_reports, save_corpus, save_dataset,
    save_reports, split_into_passages,
};
use maqa::error::{MaqaError, Result};
use maqa::metrics::{Matcher, NormalizeOptions};
use maqa::pipeline::{
    recall_candidates, run_rtr_batch, run_rtv_batch, select_predictions, verify_candidates,
    FailurePolicy, RtvBackends, RunReport, TAU_GRID,
};
use maqa::retrieval::{aggregate_evidence, opr_rank, retrieve, EmbeddingStore, RankedList};
use maqa::service::{ServiceClient, ServiceConfig};
use maqa::stub::{StubOptions, StubServer};
use maqa::synth::{generate_synthetic, SyntheticSpec};
use maqa::types::{
    truncate_tokens, CandidateSet, Corpus, MatchStrategy, Passage, PipelineConfig, Question,
    Similarity,
};

#[derive(Parser)]
#[command(name = "maqa", version, about = "Multi-answer QA pipelines: recall-then-verify and a rerank-then-read baseline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank corpus passages against each question by embedding similarity.
    Retrieve(RetrieveArgs),
    /// Extract answer candidates from the retrieved passages.
    Recall(RecallArgs),
    /// Collect per-candidate evidence passages.
    Aggregate(AggregateArgs),
    /// Score each candidate against its own evidence.
    Verify(VerifyArgs),
    /// Full recall-then-verify runs, one report per question.
    RunRtv(RunRtvArgs),
    /// Full rerank-then-read baseline runs.
    RunRtr(RunRtrArgs),
    /// Score saved run reports against gold answers.
    Evaluate(EvaluateArgs),
    /// Pick the validity threshold maximizing F1(all) + F1(multi).
    Calibrate(CalibrateArgs),
    /// Per-stage inference cost report.
    Cost(CostArgs),
    /// Embed a corpus into a binary vector store.
    Embed(EmbedArgs),
    /// Generate a synthetic workload with planted answers.
    Synth(SynthArgs),
    /// Convert external dataset or text formats.
    Import(ImportArgs),
    /// Serve the four model endpoints with deterministic local backends.
    ServeStub(ServeStubArgs),
    /// Passage-removal attacks against a reader or verifier.
    Attack(AttackArgs),
    /// Support-count and evidence-usage statistics from saved reports.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Dot,
    Cosine,
}

impl From<SimilarityArg> for Similarity {
    fn from(v: SimilarityArg) -> Similarity {
        match v {
            SimilarityArg::Dot => Similarity::Dot,
            SimilarityArg::Cosine => Similarity::Cosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchStrategyArg {
    Greedy,
    Optimal,
}

impl From<MatchStrategyArg> for MatchStrategy {
    fn from(v: MatchStrategyArg) -> MatchStrategy {
        match v {
            MatchStrategyArg::Greedy => MatchStrategy::Greedy,
            MatchStrategyArg::Optimal => MatchStrategy::Optimal,
        }
    }
}

/// Pipeline knobs. Command-line values override the config file, which
/// overrides built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file (keys named after the pipeline fields).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Passages fetched per question.
    #[arg(long)]
    retrieval_size: Option<usize>,
    /// Evidence passages per candidate / reading budget of the baseline.
    #[arg(long)]
    evidence_k: Option<usize>,
    /// Validity threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Whitespace-token cap on passage text.
    #[arg(long)]
    max_passage_tokens: Option<usize>,
    /// Separator between question and candidate in verifier input.
    #[arg(long)]
    qc_separator: Option<String>,
    /// Separator between answers in reader output.
    #[arg(long)]
    reader_separator: Option<String>,
    #[arg(long, value_enum)]
    similarity: Option<SimilarityArg>,
    #[arg(long, value_enum)]
    match_strategy: Option<MatchStrategyArg>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let overlay = ConfigOverlay {
            retrieval_size: self.retrieval_size,
            evidence_k: self.evidence_k,
            tau: self.tau,
            max_passage_tokens: self.max_passage_tokens,
            qc_separator: self.qc_separator.clone(),
            reader_separator: self.reader_separator.clone(),
            similarity: self.similarity.map(Into::into),
            match_strategy: self.match_strategy.map(Into::into),
        };
        let file = match &self.config {
            Some(path) => Some(ConfigOverlay::from_toml_file(path)?),
            None => None,
        };
        maqa::config::resolve(&overlay, file.as_ref())
    }
}

fn matcher_for(config: &PipelineConfig) -> Matcher {
    Matcher::new(NormalizeOptions::default(), config.match_strategy)
}

#[derive(Args)]
struct DataArgs {
    /// Questions JSONL ({"id", "question", "answers": [[form, ...], ...]}).
    #[arg(long)]
    dataset: PathBuf,
    /// Passage corpus JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Binary embedding store covering the corpus.
    #[arg(long)]
    store: PathBuf,
    /// Restrict to a single question id.
    #[arg(long)]
    id: Option<String>,
}

impl DataArgs {
    fn load(&self) -> Result<(Vec<Question>, Corpus, EmbeddingStore)> {
        let mut questions = load_dataset(&self.dataset)?;
        if let Some(id) = &self.id {
            questions.retain(|q| &q.id == id);
            if questions.is_empty() {
                return Err(MaqaError::invalid(format!(
                    "question {id:?} not found in {}",
                    self.dataset.display()
                )));
            }
        }
        let corpus = load_corpus(&self.corpus)?;
        let store = EmbeddingStore::load(&self.store)?;
        store.validate_covers(&corpus)?;
        Ok((questions, corpus, store))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderArg {
    /// Deterministic hash features; no model required.
    Hash,
    /// Question vectors from a file written by `synth`.
    Synthetic,
    /// Remote /embed endpoint.
    Service,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecallerArg {
    Keyword,
    Oracle,
    Service,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifierArg {
    SupportCount,
    SupportContrast,
    Service,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReaderArg {
    Oracle,
    Keyword,
    Slot,
    Threshold,
    Budget,
    Service,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "hash")]
    embedder: EmbedderArg,
    /// Embedding dimension of the hash embedder.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Question-vector JSON for the synthetic embedder.
    #[arg(long)]
    question_vectors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "keyword")]
    recaller: RecallerArg,
    #[arg(long, value_enum, default_value = "support-contrast")]
    verifier: VerifierArg,
    #[arg(long, value_enum, default_value = "oracle")]
    reader: ReaderArg,
    /// Answer capacity of the slot reader.
    #[arg(long, default_value_t = 3)]
    slots: usize,
    /// Supports required per answer (threshold and budget readers).
    #[arg(long, default_value_t = 3)]
    min_supports: usize,
    /// Attended-passage budget of the budget reader.
    #[arg(long, default_value_t = 6)]
    budget: usize,
    /// Model service base URL.
    #[arg(long, env = "MAQA_SERVICE_URL")]
    service_url: Option<String>,
}

impl BackendArgs {
    fn client(&self) -> Result<Arc<ServiceClient>> {
        let url = self.service_url.as_deref().ok_or_else(|| {
            MaqaError::Config(
                "service backend selected but no --service-url or MAQA_SERVICE_URL".to_string(),
            )
        })?;
        Ok(Arc::new(ServiceClient::new(ServiceConfig::new(url))?))
    }

    fn embedder(&self) -> Result<Box<dyn EmbedderBackend>> {
        Ok(match self.embedder {
            EmbedderArg::Hash => Box::new(HashEmbedder::new(self.dim)),
            EmbedderArg::Synthetic => {
                let path = self.question_vectors.as_ref().ok_or_else(|| {
                    MaqaError::Config("synthetic embedder needs --question-vectors".to_string())
                })?;
                let raw = std::fs::read_to_string(path)?;
                let entries: Vec<(String, Vec<f32>)> = serde_json::from_str(&raw)
                    .map_err(|e| MaqaError::Config(format!("{}: {e}", path.display())))?;
                let dim = entries
                    .first()
                    .map(|(_, v)| v.len())
                    .ok_or_else(|| MaqaError::Config("question-vector file is empty".to_string()))?;
                Box::new(PrefixEmbedder::new(dim, entries)?)
            }
            EmbedderArg::Service => Box::new(maqa::service::ServiceEmbedder::new(self.client()?)),
        })
    }

    fn recaller(&self, gold: &GoldMap, matcher: Matcher) -> Result<Box<dyn RecallerBackend>> {
        Ok(match self.recaller {
            RecallerArg::Keyword => Box::new(KeywordRecaller::new(matcher)),
            RecallerArg::Oracle => Box::new(OracleRecaller::new(gold.clone(), matcher)),
            RecallerArg::Service => Box::new(maqa::service::ServiceRecaller::new(self.client()?)),
        })
    }

    fn verifier(&self, matcher: Matcher) -> Result<Box<dyn VerifierBackend>> {
        Ok(match self.verifier {
            VerifierArg::SupportCount => Box::new(SupportCountVerifier::new(matcher)),
            VerifierArg::SupportContrast => Box::new(SupportContrastVerifier::new(matcher)),
            VerifierArg::Service => Box::new(maqa::service::ServiceVerifier::new(self.client()?)),
        })
    }

    fn reader(&self, gold: &GoldMap, matcher: Matcher, separator: &str) -> Result<Box<dyn ReaderBackend>> {
        Ok(match self.reader {
            ReaderArg::Oracle => Box::new(OracleReader::new(gold.clone(), matcher, separator)),
            ReaderArg::Keyword => Box::new(KeywordReader::new(matcher, separator)),
            ReaderArg::Slot => Box::new(SlotReader::new(gold.clone(), matcher, self.slots, separator)),
            ReaderArg::Threshold => Box::new(ThresholdReader::new(
                gold.clone(),
                matcher,
                self.min_supports,
                separator,
            )),
            ReaderArg::Budget => Box::new(BudgetReader::new(
                gold.clone(),
                matcher,
                self.budget,
                self.min_supports,
                separator,
            )),
            ReaderArg::Service => Box::new(maqa::service::ServiceReader::new(self.client()?)),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    FailFast,
    Skip,
}

impl From<PolicyArg> for FailurePolicy {
    fn from(v: PolicyArg) -> FailurePolicy {
        match v {
            PolicyArg::FailFast => FailurePolicy::FailFast,
            PolicyArg::Skip => FailurePolicy::Skip,
        }
    }
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct RecallArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct AggregateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[arg(long, value_enum, default_value = "fail-fast")]
    policy: PolicyArg,
}

#[derive(Args)]
struct RunRtvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[arg(long, value_enum, default_value = "fail-fast")]
    policy: PolicyArg,
    /// Write one report per question to this JSONL file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunRtrArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Questions JSONL with gold answers.
    #[arg(long)]
    dataset: PathBuf,
    /// Run reports JSONL.
    #[arg(long)]
    reports: PathBuf,
    /// Corpus JSONL; needed when --ks asks for MRecall.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// MRecall cutoffs, comma separated (e.g. 5,10).
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Print the full result as JSON instead of a summary.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Reports carrying scored candidates (from run-rtv).
    #[arg(long)]
    reports: PathBuf,
    /// Threshold grid, comma separated; defaults to 0.3..0.9.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CostArgs {
    /// Encoder length in tokens.
    #[arg(long)]
    l_p: Option<f64>,
    /// Decoder length in tokens.
    #[arg(long)]
    l_a: Option<f64>,
    /// Retrieved passages per question.
    #[arg(long)]
    b: Option<f64>,
    /// Evidence passages per candidate.
    #[arg(long)]
    k: Option<f64>,
    /// Candidates per question.
    #[arg(long)]
    a: Option<f64>,
    /// TOML file mapping stage names to measured seconds per cost unit.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output store path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    questions: usize,
    #[arg(long, default_value_t = 1)]
    answers_min: usize,
    #[arg(long, default_value_t = 5)]
    answers_max: usize,
    #[arg(long, default_value_t = 2)]
    supports_min: usize,
    #[arg(long, default_value_t = 6)]
    supports_max: usize,
    #[arg(long, default_value_t = 500)]
    distractors: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_scale: f32,
    /// Directory receiving dataset.jsonl, corpus.jsonl, store.bin and
    /// question_vectors.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    /// Flat-format question JSONL: answers as one "a|alias; b" string.
    #[arg(long, conflicts_with = "text")]
    flat: Option<PathBuf>,
    /// Plain text to split into fixed-length passages.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Words per passage when splitting text.
    #[arg(long, default_value_t = 100)]
    words: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeStubArgs {
    #[arg(long, default_value_t = 0)]
    port: u16,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Reply 500 to this many requests first.
    #[arg(long, default_value_t = 0)]
    fail_first: u64,
    /// Delay every response by this many milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackModeArg {
    Reader,
    Verifier,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    mode: AttackModeArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backends: BackendArgs,
    /// Enumerate all non-empty removal subsets up to this many removable
    /// passages; sample beyond it.
    #[arg(long, default_value_t = 12)]
    exhaustive_limit: usize,
    /// Sampled subsets when enumeration is off.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write every attack record to this JSONL file.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    reports: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() {
    env_logger::init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Recall(args) => cmd_recall(args),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Verify(args) => cmd_verify(args),
        Command::RunRtv(args) => cmd_run_rtv(args),
        Command::RunRtr(args) => cmd_run_rtr(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Import(args) => cmd_import(args),
        Command::ServeStub(args) => cmd_serve_stub(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

/// Write a line to stdout, exiting quietly when the consumer closed the pipe.
fn emit(text: impl AsRef<str>) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{}", text.as_ref()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        return Err(e.into());
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(
        serde_json::to_string(value)
            .map_err(|e| MaqaError::invalid(format!("serializing output: {e}")))?,
    )
}

fn print_json_pretty<T: Serialize>(value: &T) -> Result<()> {
    emit(
        serde_json::to_string_pretty(value)
            .map_err(|e| MaqaError::invalid(format!("serializing output: {e}")))?,
    )
}

/// Retrieval plus truncated passage materialization, the common prefix of
/// the per-stage commands.
fn retrieve_passages(
    question: &Question,
    corpus: &Corpus,
    store: &EmbeddingStore,
    embedder: &dyn EmbedderBackend,
    config: &PipelineConfig,
) -> Result<(RankedList, Vec<Passage>)> {
    let q_vec = embedder.embed_one(&question.text)?;
    let retrieved = retrieve(&q_vec, store, config.retrieval_size)?;
    let passages = retrieved
        .materialize(corpus)?
        .into_iter()
        .map(|mut p| {
            p.text = truncate_tokens(&p.text, config.max_passage_tokens);
            p
        })
        .collect();
    Ok((retrieved, passages))
}

fn aggregate_all(
    question: &Question,
    candidates: &CandidateSet,
    retrieved: &RankedList,
    corpus: &Corpus,
    store: &EmbeddingStore,
    embedder: &dyn EmbedderBackend,
    config: &PipelineConfig,
    matcher: &Matcher,
) -> Result<Vec<maqa::types::Evidence>> {
    if candidates.candidates.is_empty() {
        return Ok(Vec::new());
    }
    let qc_texts: Vec<String> = candidates
        .candidates
        .iter()
        .map(|c| format!("{} {} {}", question.text, config.qc_separator, c.text))
        .collect();
    let qc_vectors = embedder.embed(&qc_texts)?;
    if qc_vectors.len() != qc_texts.len() {
        return Err(MaqaError::backend(
            "embedder",
            format!("returned {} vectors for {} texts", qc_vectors.len(), qc_texts.len()),
        ));
    }
    candidates
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            aggregate_evidence(
                c,
                i,
                &qc_vectors[i],
                retrieved,
                corpus,
                store,
                config.evidence_k,
                config.similarity,
                matcher,
            )
        })
        .collect()
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    for q in &questions {
        let (retrieved, _) = retrieve_passages(q, &corpus, &store, embedder.as_ref(), &config)?;
        print_json(&serde_json::json!({
            "question_id": q.id,
            "retrieved": retrieved,
        }))?;
    }
    Ok(())
}

fn cmd_recall(args: RecallArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let recaller = args.backends.recaller(&gold, matcher)?;
    for q in &questions {
        let (_, passages) = retrieve_passages(q, &corpus, &store, embedder.as_ref(), &config)?;
        let candidates =
            recall_candidates(q, &passages, recaller.as_ref(), &matcher, FailurePolicy::FailFast)?;
        print_json(&candidates)?;
    }
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let recaller = args.backends.recaller(&gold, matcher)?;
    for q in &questions {
        let (retrieved, passages) =
            retrieve_passages(q, &corpus, &store, embedder.as_ref(), &config)?;
        let candidates =
            recall_candidates(q, &passages, recaller.as_ref(), &matcher, FailurePolicy::FailFast)?;
        let evidences = aggregate_all(
            q,
            &candidates,
            &retrieved,
            &corpus,
            &store,
            embedder.as_ref(),
            &config,
            &matcher,
        )?;
        print_json(&serde_json::json!({
            "candidates": candidates,
            "evidences": evidences,
        }))?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let recaller = args.backends.recaller(&gold, matcher)?;
    let verifier = args.backends.verifier(matcher)?;
    let policy = args.policy.into();
    for q in &questions {
        let (retrieved, passages) =
            retrieve_passages(q, &corpus, &store, embedder.as_ref(), &config)?;
        let candidates = recall_candidates(q, &passages, recaller.as_ref(), &matcher, policy)?;
        let evidences = aggregate_all(
            q,
            &candidates,
            &retrieved,
            &corpus,
            &store,
            embedder.as_ref(),
            &config,
            &matcher,
        )?;
        let scored =
            verify_candidates(q, candidates, &evidences, &corpus, verifier.as_ref(), &config, policy)?;
        let predictions = select_predictions(&scored, config.tau);
        print_json(&serde_json::json!({
            "candidates": scored,
            "predictions": predictions,
        }))?;
    }
    Ok(())
}

fn summarize_runs(questions: &[Question], reports: &[RunReport], matcher: &Matcher) -> Result<()> {
    if questions.iter().any(|q| q.answers.is_empty()) {
        eprintln!("gold answers missing for some questions; skipping evaluation summary");
        return Ok(());
    }
    let predictions: Vec<(String, Vec<String>)> = reports
        .iter()
        .map(|r| (r.question_id.clone(), r.predictions.clone()))
        .collect();
    let result = matcher.evaluate_dataset(questions, &predictions, &[], &[])?;
    match result.f1_multi {
        Some(m) => emit(format!(
            "{} questions ({} multi): F1(all) {:.4}, F1(multi) {:.4}",
            result.questions, result.multi_questions, result.f1_all, m
        )),
        None => emit(format!(
            "{} questions: F1(all) {:.4}",
            result.questions, result.f1_all
        )),
    }
}

fn cmd_run_rtv(args: RunRtvArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let recaller = args.backends.recaller(&gold, matcher)?;
    let verifier = args.backends.verifier(matcher)?;
    let backends = RtvBackends {
        embedder: embedder.as_ref(),
        recaller: recaller.as_ref(),
        verifier: verifier.as_ref(),
    };
    let reports = run_rtv_batch(
        &questions,
        &corpus,
        &store,
        &backends,
        &config,
        &matcher,
        args.policy.into(),
    )?;
    match &args.out {
        Some(path) => save_reports(path, &reports)?,
        None => {
            for r in &reports {
                print_json(r)?;
            }
        }
    }
    summarize_runs(&questions, &reports, &matcher)
}

fn cmd_run_rtr(args: RunRtrArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let reader = args.backends.reader(&gold, matcher, &config.reader_separator)?;
    let reports = run_rtr_batch(
        &questions,
        &corpus,
        &store,
        embedder.as_ref(),
        reader.as_ref(),
        &config,
        &matcher,
    )?;
    match &args.out {
        Some(path) => save_reports(path, &reports)?,
        None => {
            for r in &reports {
                print_json(r)?;
            }
        }
    }
    summarize_runs(&questions, &reports, &matcher)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let questions = load_dataset(&args.dataset)?;
    let reports = load_reports(&args.reports)?;
    let predictions: Vec<(String, Vec<String>)> = reports
        .iter()
        .map(|r| (r.question_id.clone(), r.predictions.clone()))
        .collect();
    let ranked: Vec<(String, Vec<Passage>)> = if args.ks.is_empty() {
        Vec::new()
    } else {
        let corpus_path = args.corpus.as_ref().ok_or_else(|| {
            MaqaError::invalid("--ks needs --corpus to materialize ranked passages")
        })?;
        let corpus = load_corpus(corpus_path)?;
        reports
            .iter()
            .map(|r| Ok((r.question_id.clone(), r.retrieved.materialize(&corpus)?)))
            .collect::<Result<_>>()?
    };
    let result = matcher.evaluate_dataset(&questions, &predictions, &ranked, &args.ks)?;
    if args.json {
        return print_json_pretty(&result);
    }
    emit(format!(
        "questions        {} ({} multi-answer)",
        result.questions, result.multi_questions
    ))?;
    emit(format!("F1 (all)         {:.4}", result.f1_all))?;
    match result.f1_multi {
        Some(m) => emit(format!("F1 (multi)       {m:.4}"))?,
        None => emit("F1 (multi)       n/a")?,
    }
    emit(format!("precision (all)  {:.4}", result.precision_all))?;
    emit(format!("recall (all)     {:.4}", result.recall_all))?;
    for (k, rate) in &result.mrecall {
        match rate.rate_multi {
            Some(m) => emit(format!("MRecall@{k:<8} {:.4} all / {m:.4} multi", rate.rate_all))?,
            None => emit(format!("MRecall@{k:<8} {:.4} all", rate.rate_all))?,
        }
    }
    emit(format!("matched clusters {}", result.hits))?;
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let questions = load_dataset(&args.dataset)?;
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let reports = load_reports(&args.reports)?;
    let mut dev: Vec<(Question, CandidateSet)> = Vec::with_capacity(reports.len());
    for r in &reports {
        let q = by_id.get(r.question_id.as_str()).ok_or_else(|| {
            MaqaError::invalid(format!("report question {} not in dataset", r.question_id))
        })?;
        let set = r.candidates.clone().ok_or_else(|| {
            MaqaError::invalid(format!(
                "report for {} carries no scored candidates; calibrate needs run-rtv reports",
                r.question_id
            ))
        })?;
        dev.push(((*q).clone(), set));
    }
    let grid: Vec<f64> = if args.grid.is_empty() {
        TAU_GRID.to_vec()
    } else {
        args.grid.clone()
    };
    for &tau in &grid {
        let mut f1_sum = 0.0;
        let mut multi_sum = 0.0;
        let mut multi_n = 0usize;
        for (q, set) in &dev {
            let preds = select_predictions(set, tau);
            let s = matcher.multi_answer_f1(&preds, &q.answers)?;
            f1_sum += s.f1;
            if q.is_multi_answer() {
                multi_sum += s.f1;
                multi_n += 1;
            }
        }
        let f1_all = f1_sum / dev.len() as f64;
        let f1_multi = if multi_n > 0 { multi_sum / multi_n as f64 } else { 0.0 };
        emit(format!(
            "tau {tau:.2}: F1(all) {f1_all:.4} + F1(multi) {f1_multi:.4} = {:.4}",
            f1_all + f1_multi
        ))?;
    }
    let chosen = maqa::pipeline::calibrate_tau(&dev, &grid, &matcher)?;
    emit(format!("selected tau = {chosen}"))?;
    Ok(())
}

fn cmd_cost(args: CostArgs) -> Result<()> {
    let mut profile = CostProfile::default();
    if let Some(v) = args.l_p {
        profile.l_p = v;
    }
    if let Some(v) = args.l_a {
        profile.l_a = v;
    }
    if let Some(v) = args.b {
        profile.b = v;
    }
    if let Some(v) = args.k {
        profile.k = v;
    }
    if let Some(v) = args.a {
        profile.a = v;
    }
    let calibration = match &args.calibration {
        None => None,
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let named: BTreeMap<String, f64> = toml::from_str(&raw)
                .map_err(|e| MaqaError::Config(format!("{}: {e}", path.display())))?;
            let mut by_stage = BTreeMap::new();
            for (name, seconds) in named {
                let stage = Stage::ALL
                    .into_iter()
                    .find(|s| s.name() == name)
                    .ok_or_else(|| MaqaError::Config(format!("unknown stage {name:?}")))?;
                by_stage.insert(stage, seconds);
            }
            Some(by_stage)
        }
    };
    let report = cost_report(&profile, calibration.as_ref())?;
    emit(format!("{report}").trim_end())?;
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let embedder = args.backends.embedder()?;
    let texts: Vec<String> = corpus.passages().iter().map(|p| p.text.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(MaqaError::backend(
            "embedder",
            format!("returned {} vectors for {} passages", vectors.len(), texts.len()),
        ));
    }
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    let entries: Vec<(u64, Vec<f32>)> = corpus
        .passages()
        .iter()
        .map(|p| p.id)
        .zip(vectors)
        .collect();
    let store = EmbeddingStore::from_entries(dim, entries)?;
    store.save(&args.out)?;
    emit(format!(
        "embedded {} passages (dim {dim}) into {}",
        corpus.len(),
        args.out.display()
    ))?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        questions: args.questions,
        answers_per_question: (args.answers_min, args.answers_max),
        supports_per_answer: (args.supports_min, args.supports_max),
        distractors: args.distractors,
        dim: args.dim,
        noise_scale: args.noise_scale,
    };
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_dataset(args.out_dir.join("dataset.jsonl"), &data.questions)?;
    save_corpus(args.out_dir.join("corpus.jsonl"), &data.corpus)?;
    data.store.save(args.out_dir.join("store.bin"))?;
    let vectors = serde_json::to_string(&data.question_vectors)
        .map_err(|e| MaqaError::invalid(format!("serializing question vectors: {e}")))?;
    std::fs::write(args.out_dir.join("question_vectors.json"), vectors)?;
    emit(format!(
        "wrote {} questions, {} passages (dim {}) to {}",
        data.questions.len(),
        data.corpus.len(),
        data.store.dim(),
        args.out_dir.display()
    ))?;
    Ok(())
}

fn cmd_import(args: ImportArgs) -> Result<()> {
    match (&args.flat, &args.text) {
        (Some(flat), None) => {
            let questions = import_flat_dataset(flat)?;
            save_dataset(&args.out, &questions)?;
            emit(format!(
                "imported {} questions to {}",
                questions.len(),
                args.out.display()
            ))?;
            Ok(())
        }
        (None, Some(text)) => {
            let raw = std::fs::read_to_string(text)?;
            let title = text
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let chunks = split_into_passages(&raw, args.words)?;
            let passages: Vec<Passage> = chunks
                .into_iter()
                .enumerate()
                .map(|(i, chunk)| Passage::new(i as u64, title.clone(), chunk))
                .collect::<Result<_>>()?;
            let corpus = Corpus::new(passages)?;
            save_corpus(&args.out, &corpus)?;
            emit(format!(
                "split into {} passages at {}",
                corpus.len(),
                args.out.display()
            ))?;
            Ok(())
        }
        _ => Err(MaqaError::invalid("import needs exactly one of --flat or --text")),
    }
}

fn cmd_serve_stub(args: ServeStubArgs) -> Result<()> {
    let server = StubServer::start(StubOptions {
        port: args.port,
        dim: args.dim,
        fail_first: args.fail_first,
        delay: Duration::from_millis(args.delay_ms),
        ..StubOptions::default()
    })?;
    emit(server.base_url())?;
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let (questions, corpus, store) = args.data.load()?;
    let embedder = args.backends.embedder()?;
    let gold = GoldMap::from_questions(&questions);
    let options = AttackOptions {
        exhaustive_limit: args.exhaustive_limit,
        sample_count: args.samples,
        seed: args.seed,
    };
    let mut all_records: Vec<AttackRecord> = Vec::new();
    let mut skipped = 0usize;
    match args.mode {
        AttackModeArg::Reader => {
            let reader = args.backends.reader(&gold, matcher, &config.reader_separator)?;
            let mut attacks: Vec<ReaderAttack> = Vec::new();
            for q in &questions {
                let q_vec = embedder.embed_one(&q.text)?;
                let retrieved = retrieve(&q_vec, &store, config.retrieval_size)?;
                let reranked = opr_rank(&retrieved, &q.answers, &corpus, &matcher)?;
                match attack_reader(q, &reranked, &corpus, reader.as_ref(), &config, &matcher, &options)
                {
                    Ok(a) => {
                        all_records.extend(a.records.iter().cloned());
                        attacks.push(a);
                    }
                    Err(MaqaError::NotAttackTarget(check)) => {
                        log::info!("question {} is not attackable: {check}", q.id);
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            let summary = summarize_reader_attacks(&attacks);
            print_json_pretty(&serde_json::json!({
                "summary": summary,
                "skipped_questions": skipped,
            }))?;
        }
        AttackModeArg::Verifier => {
            let recaller = args.backends.recaller(&gold, matcher)?;
            let verifier = args.backends.verifier(matcher)?;
            let backends = RtvBackends {
                embedder: embedder.as_ref(),
                recaller: recaller.as_ref(),
                verifier: verifier.as_ref(),
            };
            let mut attacks: Vec<VerifierAttack> = Vec::new();
            for q in &questions {
                let report = maqa::pipeline::run_recall_then_verify(
                    q,
                    &corpus,
                    &store,
                    &backends,
                    &config,
                    &matcher,
                    FailurePolicy::FailFast,
                )?;
                let set = report.candidates.as_ref().expect("rtv report carries candidates");
                for (i, cand) in set.candidates.iter().enumerate() {
                    match attack_verifier(
                        q,
                        cand,
                        &report.evidences[i],
                        &report.retrieved,
                        &corpus,
                        verifier.as_ref(),
                        &config,
                        &matcher,
                        &options,
                    ) {
                        Ok(a) => {
                            all_records.extend(a.records.iter().cloned());
                            attacks.push(a);
                        }
                        Err(MaqaError::NotAttackTarget(check)) => {
                            log::info!(
                                "candidate {:?} of question {} is not attackable: {check}",
                                cand.text,
                                q.id
                            );
                            skipped += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            let summary = summarize_verifier_attacks(&attacks);
            print_json_pretty(&serde_json::json!({
                "summary": summary,
                "skipped_candidates": skipped,
            }))?;
        }
    }
    if let Some(path) = &args.records {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_records_jsonl(&mut file, &all_records)?;
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let matcher = matcher_for(&config);
    let questions = load_dataset(&args.dataset)?;
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let corpus = load_corpus(&args.corpus)?;
    let reports = load_reports(&args.reports)?;
    let mut selections: Vec<QuestionSelection> = Vec::with_capacity(reports.len());
    let mut usages = Vec::new();
    for r in &reports {
        let q = by_id.get(r.question_id.as_str()).ok_or_else(|| {
            MaqaError::invalid(format!("report question {} not in dataset", r.question_id))
        })?;
        selections.push(QuestionSelection::from_report(q, r, &corpus)?);
        usages.extend(cluster_usage_from_report(q, r, &corpus, &matcher)?);
    }
    let distribution = support_distribution(&selections, &matcher);
    let usage = evidence_usage(&usages)?;
    print_json_pretty(&serde_json::json!({
        "support_distribution": distribution,
        "evidence_usage": usage,
    }))
}
