//! C ABI for the multi-answer QA engine.
//!
//! Conventions:
//! - Every fallible function returns a [`MaqaStatus`]; `MAQA_STATUS_OK` is 0.
//! - Structured data crosses the boundary as JSON strings.
//! - Strings returned through `char **` out-parameters are owned by the
//!   caller and must be released with [`maqa_string_free`].
//! - [`maqa_last_error_message`] describes the most recent failure on the
//!   calling thread.
//! - The engine handle is opaque; create with one of the `maqa_engine_new_*`
//!   constructors and release with [`maqa_engine_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;

use maqa::backend::{
    EmbedderBackend, GoldMap, HashEmbedder, KeywordRecaller, OracleRecaller, RecallerBackend,
    SupportContrastVerifier, SupportCountVerifier, VerifierBackend,
};
use maqa::dataset::{load_corpus, load_dataset};
use maqa::error::MaqaError;
use maqa::metrics::{normalize, Matcher, NormalizeOptions};
use maqa::pipeline::{
    run_recall_then_verify, validity_score, FailurePolicy, RtvBackends, VerifierLogits,
};
use maqa::retrieval::EmbeddingStore;
use maqa::synth::{generate_synthetic, SyntheticSpec};
use maqa::types::{AnswerCluster, Corpus, PipelineConfig, Question};

/// Result of a C API call. Zero is success; everything else is an error and
/// leaves a message readable via `maqa_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaqaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// Referenced question or passage does not exist.
    NotFound = 4,
    Io = 5,
    /// Malformed JSON, JSONL or binary input.
    Parse = 6,
    Config = 7,
    /// A pipeline backend reported a failure.
    Backend = 8,
    /// An HTTP model service could not be reached or answered badly.
    Service = 9,
    /// Unexpected internal failure.
    Internal = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn clear_error() {
    LAST_ERROR.with(|e| e.borrow_mut().take());
}

fn remember(message: String, status: MaqaStatus) -> MaqaStatus {
    let stored = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("unrepresentable error message").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(stored));
    status
}

fn status_of(e: &MaqaError) -> MaqaStatus {
    match e {
        MaqaError::Io(_) => MaqaStatus::Io,
        MaqaError::Parse { .. } | MaqaError::Corrupt { .. } => MaqaStatus::Parse,
        MaqaError::Config(_) => MaqaStatus::Config,
        MaqaError::UnknownPassage(_) => MaqaStatus::NotFound,
        MaqaError::Backend { .. } => MaqaStatus::Backend,
        MaqaError::Service { .. } => MaqaStatus::Service,
        _ => MaqaStatus::InvalidArgument,
    }
}

fn fail(e: MaqaError) -> MaqaStatus {
    let status = status_of(&e);
    remember(e.to_string(), status)
}

/// Run `f` with panics converted to `MAQA_STATUS_INTERNAL`.
fn guarded(f: impl FnOnce() -> MaqaStatus) -> MaqaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => remember("internal panic".to_string(), MaqaStatus::Internal),
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, MaqaStatus> {
    if ptr.is_null() {
        return Err(remember(format!("{name} is null"), MaqaStatus::NullArgument));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| remember(format!("{name} is not valid UTF-8"), MaqaStatus::InvalidUtf8))
}

fn into_c_string(text: String) -> Result<*mut c_char, MaqaStatus> {
    CString::new(text).map(CString::into_raw).map_err(|_| {
        remember(
            "output contains an interior NUL byte".to_string(),
            MaqaStatus::Internal,
        )
    })
}

/// # Safety
/// `out` must be a valid pointer to writable memory.
unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), MaqaStatus> {
    if out.is_null() {
        return Err(remember(format!("{name} is null"), MaqaStatus::NullArgument));
    }
    out.write(value);
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<*mut c_char, MaqaStatus> {
    match serde_json::to_string(value) {
        Ok(json) => into_c_string(json),
        Err(e) => Err(remember(format!("serializing output: {e}"), MaqaStatus::Internal)),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(raw: &str, what: &str) -> Result<T, MaqaStatus> {
    serde_json::from_str(raw)
        .map_err(|e| remember(format!("parsing {what}: {e}"), MaqaStatus::Parse))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn maqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread, or null when the last call
/// succeeded. The string is owned by the caller; free with
/// `maqa_string_free`.
#[no_mangle]
pub extern "C" fn maqa_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by a `maqa_*` function
/// and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Canonical answer normalization: lowercase, punctuation stripped,
/// articles removed, whitespace collapsed. Returns null on error.
///
/// # Safety
/// `text` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn maqa_normalize(text: *const c_char) -> *mut c_char {
    clear_error();
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<*mut c_char, MaqaStatus> {
        let text = read_str(text, "text")?;
        into_c_string(normalize(text))
    }));
    match result {
        Ok(Ok(ptr)) => ptr,
        Ok(Err(_)) => std::ptr::null_mut(),
        Err(_) => {
            remember("internal panic".to_string(), MaqaStatus::Internal);
            std::ptr::null_mut()
        }
    }
}

/// Softmax probability of the "right" decision over two verifier logits.
///
/// # Safety
/// `out_score` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_validity_score(
    logit_right: f64,
    logit_wrong: f64,
    out_score: *mut f64,
) -> MaqaStatus {
    guarded(|| {
        let logits = match VerifierLogits::new(logit_right, logit_wrong) {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        match validity_score(logits) {
            Ok(score) => match write_out(out_score, score, "out_score") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(e) => fail(e),
        }
    })
}

/// Multi-answer F1 of predictions against gold clusters.
///
/// `predictions_json` is a JSON array of strings; `gold_json` is a JSON
/// array of clusters, each a non-empty array of equivalent forms. The
/// result is `{"precision", "recall", "f1", "matches"}`.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out_json` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_answer_f1_json(
    predictions_json: *const c_char,
    gold_json: *const c_char,
    out_json: *mut *mut c_char,
) -> MaqaStatus {
    guarded(|| {
        let inner = || -> Result<*mut c_char, MaqaStatus> {
            let predictions: Vec<String> =
                from_json(read_str(predictions_json, "predictions_json")?, "predictions")?;
            let gold_forms: Vec<Vec<String>> = from_json(read_str(gold_json, "gold_json")?, "gold")?;
            let gold: Vec<AnswerCluster> = gold_forms
                .into_iter()
                .map(AnswerCluster::new)
                .collect::<Result<_, _>>()
                .map_err(fail)?;
            let scores = Matcher::default()
                .multi_answer_f1(&predictions, &gold)
                .map_err(fail)?;
            to_json(&scores)
        };
        match inner() {
            Ok(ptr) => match write_out(out_json, ptr, "out_json") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(status) => status,
        }
    })
}

/// Per-stage inference cost report for an operating point.
///
/// `profile_json` configures token lengths and batch shape (all fields
/// optional); pass null for the reference operating point. The result is
/// the full report with per-stage unit totals.
///
/// # Safety
/// `profile_json` must be null or a valid NUL-terminated string; `out_json`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_cost_report_json(
    profile_json: *const c_char,
    out_json: *mut *mut c_char,
) -> MaqaStatus {
    guarded(|| {
        let inner = || -> Result<*mut c_char, MaqaStatus> {
            let profile: maqa::cost::CostProfile = if profile_json.is_null() {
                maqa::cost::CostProfile::default()
            } else {
                from_json(read_str(profile_json, "profile_json")?, "cost profile")?
            };
            let report = maqa::cost::cost_report(&profile, None).map_err(fail)?;
            to_json(&report)
        };
        match inner() {
            Ok(ptr) => match write_out(out_json, ptr, "out_json") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(status) => status,
        }
    })
}

/// Opaque handle around a loaded workload and its pipeline backends.
pub struct MaqaEngine {
    questions: Vec<Question>,
    corpus: Corpus,
    store: EmbeddingStore,
    embedder: Box<dyn EmbedderBackend>,
    recaller: Box<dyn RecallerBackend>,
    verifier: Box<dyn VerifierBackend>,
    config: PipelineConfig,
    matcher: Matcher,
}

impl MaqaEngine {
    fn run_one(&self, question: &Question) -> Result<maqa::pipeline::RunReport, MaqaError> {
        let backends = RtvBackends {
            embedder: self.embedder.as_ref(),
            recaller: self.recaller.as_ref(),
            verifier: self.verifier.as_ref(),
        };
        run_recall_then_verify(
            question,
            &self.corpus,
            &self.store,
            &backends,
            &self.config,
            &self.matcher,
            FailurePolicy::FailFast,
        )
    }
}

fn parse_config(raw: Option<&str>) -> Result<(PipelineConfig, Matcher), MaqaStatus> {
    let config: PipelineConfig = match raw {
        None => PipelineConfig::default(),
        Some(raw) => from_json(raw, "pipeline config")?,
    };
    config.validate().map_err(fail)?;
    let matcher = Matcher::new(NormalizeOptions::default(), config.match_strategy);
    Ok((config, matcher))
}

/// Build an engine over a generated synthetic workload with planted
/// answers, using gold-oracle backends. `spec_json` configures the
/// generator (all fields optional); pass null for defaults.
///
/// # Safety
/// `spec_json` and `config_json` must each be null or valid NUL-terminated
/// strings; `out_engine` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_new_synthetic(
    spec_json: *const c_char,
    config_json: *const c_char,
    out_engine: *mut *mut MaqaEngine,
) -> MaqaStatus {
    guarded(|| {
        let inner = || -> Result<*mut MaqaEngine, MaqaStatus> {
            let spec: SyntheticSpec = if spec_json.is_null() {
                SyntheticSpec::default()
            } else {
                from_json(read_str(spec_json, "spec_json")?, "synthetic spec")?
            };
            let raw_config = if config_json.is_null() {
                None
            } else {
                Some(read_str(config_json, "config_json")?)
            };
            let (config, matcher) = parse_config(raw_config)?;
            let data = generate_synthetic(&spec).map_err(fail)?;
            let embedder = data.embedder().map_err(fail)?;
            let gold = GoldMap::from_questions(&data.questions);
            let engine = MaqaEngine {
                questions: data.questions,
                corpus: data.corpus,
                store: data.store,
                embedder: Box::new(embedder),
                recaller: Box::new(OracleRecaller::new(gold, matcher)),
                verifier: Box::new(SupportCountVerifier::new(matcher)),
                config,
                matcher,
            };
            Ok(Box::into_raw(Box::new(engine)))
        };
        match inner() {
            Ok(ptr) => match write_out(out_engine, ptr, "out_engine") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => {
                    drop(Box::from_raw(ptr));
                    status
                }
            },
            Err(status) => status,
        }
    })
}

/// Build an engine from files: questions JSONL, passage corpus JSONL and a
/// binary embedding store. Uses the deterministic local backends (hash
/// embedder, keyword recaller, support-contrast verifier); no model service
/// is contacted.
///
/// # Safety
/// Path arguments must be valid NUL-terminated strings; `config_json` must
/// be null or a valid string; `out_engine` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_new_from_files(
    dataset_path: *const c_char,
    corpus_path: *const c_char,
    store_path: *const c_char,
    config_json: *const c_char,
    out_engine: *mut *mut MaqaEngine,
) -> MaqaStatus {
    guarded(|| {
        let inner = || -> Result<*mut MaqaEngine, MaqaStatus> {
            let dataset_path = read_str(dataset_path, "dataset_path")?;
            let corpus_path = read_str(corpus_path, "corpus_path")?;
            let store_path = read_str(store_path, "store_path")?;
            let raw_config = if config_json.is_null() {
                None
            } else {
                Some(read_str(config_json, "config_json")?)
            };
            let (config, matcher) = parse_config(raw_config)?;
            let questions = load_dataset(Path::new(dataset_path)).map_err(fail)?;
            let corpus = load_corpus(Path::new(corpus_path)).map_err(fail)?;
            let store = EmbeddingStore::load(Path::new(store_path)).map_err(fail)?;
            store.validate_covers(&corpus).map_err(fail)?;
            let engine = MaqaEngine {
                questions,
                corpus,
                embedder: Box::new(HashEmbedder::new(store.dim())),
                store,
                recaller: Box::new(KeywordRecaller::new(matcher)),
                verifier: Box::new(SupportContrastVerifier::new(matcher)),
                config,
                matcher,
            };
            Ok(Box::into_raw(Box::new(engine)))
        };
        match inner() {
            Ok(ptr) => match write_out(out_engine, ptr, "out_engine") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => {
                    drop(Box::from_raw(ptr));
                    status
                }
            },
            Err(status) => status,
        }
    })
}

/// Number of questions in the engine's workload; -1 when `engine` is null.
///
/// # Safety
/// `engine` must be null or a valid engine handle.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_question_count(engine: *const MaqaEngine) -> i64 {
    if engine.is_null() {
        return -1;
    }
    (*engine).questions.len() as i64
}

/// Id of the question at `index`, via `out_id` (caller-owned).
///
/// # Safety
/// `engine` must be a valid engine handle; `out_id` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_question_id(
    engine: *const MaqaEngine,
    index: usize,
    out_id: *mut *mut c_char,
) -> MaqaStatus {
    guarded(|| {
        if engine.is_null() {
            return remember("engine is null".to_string(), MaqaStatus::NullArgument);
        }
        let engine = &*engine;
        let Some(q) = engine.questions.get(index) else {
            return remember(
                format!("question index {index} out of range ({} questions)", engine.questions.len()),
                MaqaStatus::NotFound,
            );
        };
        match into_c_string(q.id.clone()) {
            Ok(ptr) => match write_out(out_id, ptr, "out_id") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(status) => status,
        }
    })
}

/// Run recall-then-verify for one question id; the full run report is
/// returned as JSON via `out_report_json` (caller-owned).
///
/// # Safety
/// `engine` must be a valid engine handle; `question_id` must be a valid
/// NUL-terminated string; `out_report_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_run_question(
    engine: *const MaqaEngine,
    question_id: *const c_char,
    out_report_json: *mut *mut c_char,
) -> MaqaStatus {
    guarded(|| {
        if engine.is_null() {
            return remember("engine is null".to_string(), MaqaStatus::NullArgument);
        }
        let engine = &*engine;
        let inner = || -> Result<*mut c_char, MaqaStatus> {
            let id = read_str(question_id, "question_id")?;
            let question = engine
                .questions
                .iter()
                .find(|q| q.id == id)
                .ok_or_else(|| remember(format!("unknown question id {id:?}"), MaqaStatus::NotFound))?;
            let report = engine.run_one(question).map_err(fail)?;
            to_json(&report)
        };
        match inner() {
            Ok(ptr) => match write_out(out_report_json, ptr, "out_report_json") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(status) => status,
        }
    })
}

/// Run the whole workload and score it against gold answers. The result is
/// the macro-averaged evaluation as JSON via `out_eval_json`
/// (caller-owned).
///
/// # Safety
/// `engine` must be a valid engine handle; `out_eval_json` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_evaluate(
    engine: *const MaqaEngine,
    out_eval_json: *mut *mut c_char,
) -> MaqaStatus {
    guarded(|| {
        if engine.is_null() {
            return remember("engine is null".to_string(), MaqaStatus::NullArgument);
        }
        let engine = &*engine;
        let inner = || -> Result<*mut c_char, MaqaStatus> {
            let mut predictions = Vec::with_capacity(engine.questions.len());
            for q in &engine.questions {
                let report = engine.run_one(q).map_err(fail)?;
                predictions.push((q.id.clone(), report.predictions));
            }
            let result = engine
                .matcher
                .evaluate_dataset(&engine.questions, &predictions, &[], &[])
                .map_err(fail)?;
            to_json(&result)
        };
        match inner() {
            Ok(ptr) => match write_out(out_eval_json, ptr, "out_eval_json") {
                Ok(()) => MaqaStatus::Ok,
                Err(status) => status,
            },
            Err(status) => status,
        }
    })
}

/// Release an engine handle.
///
/// # Safety
/// `engine` must be null or a handle returned by a `maqa_engine_new_*`
/// constructor and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maqa_engine_free(engine: *mut MaqaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
