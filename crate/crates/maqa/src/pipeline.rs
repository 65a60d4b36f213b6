//! Stage orchestration for both pipelines: candidate recall, validity
//! scoring, thresholding, calibration, and the end-to-end runners.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{EmbedderBackend, ReaderBackend, RecallerBackend, VerifierBackend};
use crate::error::{MaqaError, Result};
use crate::metrics::Matcher;
use crate::retrieval::{aggregate_evidence, retrieve, EmbeddingStore, RankedList};
use crate::types::{
    BackendMetadata, Candidate, CandidateSet, Corpus, Evidence, Passage, PipelineConfig, Question,
    truncate_tokens,
};

/// Marker a recaller emits for a passage containing no answer.
pub const IRRELEVANT_MARKER: &str = "IRRELEVANT";

/// Default threshold calibration grid.
pub const TAU_GRID: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Per-passage recaller result: a list of answer strings, or a marker that
/// the passage is irrelevant to the question.
///
/// Serialized as either a JSON array of strings or the literal string
/// `"IRRELEVANT"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecallerOutput {
    Answers(Vec<String>),
    Irrelevant,
}

impl Serialize for RecallerOutput {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RecallerOutput::Answers(v) => v.serialize(s),
            RecallerOutput::Irrelevant => s.serialize_str(IRRELEVANT_MARKER),
        }
    }
}

impl<'de> Deserialize<'de> for RecallerOutput {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Marker(String),
            Answers(Vec<String>),
        }
        match Repr::deserialize(d)? {
            Repr::Marker(s) if s == IRRELEVANT_MARKER => Ok(RecallerOutput::Irrelevant),
            Repr::Marker(s) => Err(serde::de::Error::custom(format!(
                "expected an answer array or {IRRELEVANT_MARKER:?}, got string {s:?}"
            ))),
            Repr::Answers(v) => {
                if v.iter().any(|a| a.is_empty()) {
                    Err(serde::de::Error::custom("empty answer string in recaller output"))
                } else {
                    Ok(RecallerOutput::Answers(v))
                }
            }
        }
    }
}

/// Raw verifier output: unnormalized logits for the "right" and "wrong"
/// decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierLogits {
    pub logit_right: f64,
    pub logit_wrong: f64,
}

impl VerifierLogits {
    pub fn new(logit_right: f64, logit_wrong: f64) -> Result<Self> {
        let l = VerifierLogits {
            logit_right,
            logit_wrong,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_right.is_finite() && self.logit_wrong.is_finite()) {
            return Err(MaqaError::NonFiniteLogit {
                logit_right: self.logit_right,
                logit_wrong: self.logit_wrong,
            });
        }
        Ok(())
    }
}

/// What to do when a backend call fails mid-stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Propagate the first failure (default; keeps evaluations honest).
    #[default]
    FailFast,
    /// Skip the failing unit and count it in the output.
    Skip,
}

/// Softmax probability of the "right" decision over the two logits,
/// computed in a numerically stable form.
pub fn validity_score(logits: VerifierLogits) -> Result<f64> {
    logits.validate()?;
    let d = logits.logit_right - logits.logit_wrong;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

/// Build the candidate set for a question: per-passage backend recalls,
/// irrelevant passages excluded, deduplicated by normalized form with the
/// first-seen surface form kept and full passage provenance, ordered by
/// first occurrence.
pub fn recall_candidates(
    question: &Question,
    retrieved: &[Passage],
    backend: &dyn RecallerBackend,
    matcher: &Matcher,
    policy: FailurePolicy,
) -> Result<CandidateSet> {
    if retrieved.is_empty() {
        return Err(MaqaError::invalid("recaller needs at least one retrieved passage"));
    }
    let mut skipped = 0usize;
    let outputs: Vec<Option<RecallerOutput>> = match backend.recall(&question.text, retrieved) {
        Ok(v) => {
            if v.len() != retrieved.len() {
                return Err(MaqaError::backend(
                    "recaller",
                    format!("returned {} outputs for {} passages", v.len(), retrieved.len()),
                ));
            }
            v.into_iter().map(Some).collect()
        }
        Err(e) => match policy {
            FailurePolicy::FailFast => return Err(e),
            FailurePolicy::Skip => {
                log::warn!(
                    "recaller batch failed for question {} ({e}); retrying per passage",
                    question.id
                );
                retrieved
                    .iter()
                    .map(|p| match backend.recall(&question.text, std::slice::from_ref(p)) {
                        Ok(mut v) if v.len() == 1 => Some(v.pop().unwrap()),
                        _ => {
                            skipped += 1;
                            None
                        }
                    })
                    .collect()
            }
        },
    };

    let mut set = CandidateSet {
        question_id: question.id.clone(),
        ..CandidateSet::default()
    };
    set.skipped_passages = skipped;
    let mut by_norm: HashMap<String, usize> = HashMap::new();
    for (p, out) in retrieved.iter().zip(outputs) {
        let answers = match out {
            None => continue,
            Some(RecallerOutput::Irrelevant) => continue,
            Some(RecallerOutput::Answers(a)) => a,
        };
        for a in answers {
            let norm = matcher.normalize(&a);
            if norm.is_empty() {
                set.dropped_empty += 1;
                continue;
            }
            match by_norm.get(&norm) {
                Some(&i) => {
                    let sources = &mut set.candidates[i].source_passage_ids;
                    if !sources.contains(&p.id) {
                        sources.push(p.id);
                    }
                }
                None => {
                    by_norm.insert(norm.clone(), set.candidates.len());
                    set.candidates.push(Candidate {
                        text: a,
                        normalized: norm,
                        source_passage_ids: vec![p.id],
                        validity_score: None,
                    });
                }
            }
        }
    }
    for c in &mut set.candidates {
        c.source_passage_ids.sort_unstable();
    }
    Ok(set)
}

fn evidence_passages(
    evidence: &Evidence,
    corpus: &Corpus,
    max_passage_tokens: usize,
) -> Result<Vec<Passage>> {
    evidence
        .passages
        .iter()
        .map(|&pid| {
            corpus.require(pid).map(|p| {
                let mut p = p.clone();
                p.text = truncate_tokens(&p.text, max_passage_tokens);
                p
            })
        })
        .collect()
}

/// Score each candidate against its own evidence. Candidate order is
/// preserved; each score depends only on (question, candidate, evidence).
pub fn verify_candidates(
    question: &Question,
    mut candidates: CandidateSet,
    evidences: &[Evidence],
    corpus: &Corpus,
    backend: &dyn VerifierBackend,
    config: &PipelineConfig,
    policy: FailurePolicy,
) -> Result<CandidateSet> {
    if evidences.len() != candidates.candidates.len() {
        return Err(MaqaError::invalid(format!(
            "{} evidence sets for {} candidates",
            evidences.len(),
            candidates.candidates.len()
        )));
    }
    for (i, ev) in evidences.iter().enumerate() {
        if ev.candidate_index != i {
            return Err(MaqaError::invalid(format!(
                "evidence at position {i} carries candidate_index {}",
                ev.candidate_index
            )));
        }
        let passages = evidence_passages(ev, corpus, config.max_passage_tokens)?;
        match backend.verify(&question.text, &candidates.candidates[i].text, &passages) {
            Ok(logits) => {
                candidates.candidates[i].validity_score = Some(validity_score(logits)?);
            }
            Err(e) => match policy {
                FailurePolicy::FailFast => return Err(e),
                FailurePolicy::Skip => {
                    log::warn!(
                        "verifier failed on candidate {:?} of question {} ({e}); skipping",
                        candidates.candidates[i].text,
                        question.id
                    );
                    candidates.skipped_candidates += 1;
                }
            },
        }
    }
    Ok(candidates)
}

/// Candidates scoring at least `tau`, in descending score order; ties keep
/// candidate order. Unscored candidates are never selected.
pub fn select_predictions(scored: &CandidateSet, tau: f64) -> Vec<String> {
    let mut picked: Vec<(usize, f64)> = scored
        .candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.validity_score.filter(|&s| s >= tau).map(|s| (i, s)))
        .collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1));
    picked
        .into_iter()
        .map(|(i, _)| scored.candidates[i].text.clone())
        .collect()
}

/// The single best-scoring candidate (ties keep the earlier candidate), for
/// single-answer operation.
pub fn single_answer_select(scored: &CandidateSet) -> Result<String> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in scored.candidates.iter().enumerate() {
        if let Some(s) = c.validity_score {
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| scored.candidates[i].text.clone())
        .ok_or_else(|| MaqaError::invalid("no scored candidate to select"))
}

/// Pick the grid threshold maximizing F1(all) + F1(multi) on already-scored
/// dev runs; ties go to the larger threshold. The multi term is 0 when the
/// dev set has no multi-answer question.
pub fn calibrate_tau(dev: &[(Question, CandidateSet)], grid: &[f64], matcher: &Matcher) -> Result<f64> {
    if grid.is_empty() {
        return Err(MaqaError::invalid("calibration grid must be non-empty"));
    }
    if dev.is_empty() {
        return Err(MaqaError::invalid("calibration needs at least one dev question"));
    }
    for (q, _) in dev {
        if q.answers.is_empty() {
            return Err(MaqaError::invalid(format!(
                "question {} has no gold answers; cannot calibrate",
                q.id
            )));
        }
    }
    let mut taus: Vec<f64> = grid.to_vec();
    for &t in &taus {
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(MaqaError::invalid(format!("grid threshold {t} outside [0, 1]")));
        }
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let mut best: Option<(f64, f64)> = None;
    for &tau in &taus {
        let mut f1_sum = 0.0;
        let mut multi_sum = 0.0;
        let mut multi_n = 0usize;
        for (q, set) in dev {
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
        let objective = f1_all + f1_multi;
        if best.map_or(true, |(b, _)| objective >= b) {
            best = Some((objective, tau));
        }
    }
    Ok(best.unwrap().1)
}

/// Which pipeline produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    RecallThenVerify,
    RerankThenRead,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieve_ms: f64,
    pub recall_ms: f64,
    pub aggregate_ms: f64,
    pub verify_ms: f64,
    pub read_ms: f64,
    pub total_ms: f64,
}

/// Everything one pipeline run produced for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub question_id: String,
    pub framework: Framework,
    pub config: PipelineConfig,
    pub backends: Vec<BackendMetadata>,
    pub retrieved: RankedList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidences: Vec<Evidence>,
    /// Passage ids handed to the reader, in rank order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reader_input: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reader_output: Option<String>,
    pub predictions: Vec<String>,
    /// True when the recaller produced no candidate at all.
    pub empty_candidate_set: bool,
    pub timings: StageTimings,
}

impl RunReport {
    /// Copy with all wall-times zeroed, for byte-level determinism checks.
    pub fn with_zeroed_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.timings = StageTimings::default();
        r
    }
}

/// The three backends the recall-then-verify pipeline needs.
pub struct RtvBackends<'a> {
    pub embedder: &'a dyn EmbedderBackend,
    pub recaller: &'a dyn RecallerBackend,
    pub verifier: &'a dyn VerifierBackend,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn truncated(passages: Vec<Passage>, max_tokens: usize) -> Vec<Passage> {
    passages
        .into_iter()
        .map(|mut p| {
            p.text = truncate_tokens(&p.text, max_tokens);
            p
        })
        .collect()
}

/// Full recall-then-verify run for one question: retrieve, recall
/// candidates, aggregate per-candidate evidence, verify, threshold.
pub fn run_recall_then_verify(
    question: &Question,
    corpus: &Corpus,
    store: &EmbeddingStore,
    backends: &RtvBackends,
    config: &PipelineConfig,
    matcher: &Matcher,
    policy: FailurePolicy,
) -> Result<RunReport> {
    config.validate()?;
    let t_total = Instant::now();

    let t = Instant::now();
    let q_vec = backends.embedder.embed_one(&question.text)?;
    let retrieved = retrieve(&q_vec, store, config.retrieval_size)?;
    let retrieve_ms = ms(t);

    let passages = truncated(retrieved.materialize(corpus)?, config.max_passage_tokens);

    let t = Instant::now();
    let candidates = recall_candidates(question, &passages, backends.recaller, matcher, policy)?;
    let recall_ms = ms(t);
    let empty_candidate_set = candidates.candidates.is_empty();

    let t = Instant::now();
    let evidences = if empty_candidate_set {
        Vec::new()
    } else {
        let qc_texts: Vec<String> = candidates
            .candidates
            .iter()
            .map(|c| format!("{} {} {}", question.text, config.qc_separator, c.text))
            .collect();
        let qc_vectors = backends.embedder.embed(&qc_texts)?;
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
                    &retrieved,
                    corpus,
                    store,
                    config.evidence_k,
                    config.similarity,
                    matcher,
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    let aggregate_ms = ms(t);

    let t = Instant::now();
    let scored = verify_candidates(
        question,
        candidates,
        &evidences,
        corpus,
        backends.verifier,
        config,
        policy,
    )?;
    let verify_ms = ms(t);

    let predictions = select_predictions(&scored, config.tau);
    Ok(RunReport {
        question_id: question.id.clone(),
        framework: Framework::RecallThenVerify,
        config: config.clone(),
        backends: vec![
            backends.embedder.metadata(),
            backends.recaller.metadata(),
            backends.verifier.metadata(),
        ],
        retrieved,
        candidates: Some(scored),
        evidences,
        reader_input: Vec::new(),
        reader_output: None,
        predictions,
        empty_candidate_set,
        timings: StageTimings {
            retrieve_ms,
            recall_ms,
            aggregate_ms,
            verify_ms,
            read_ms: 0.0,
            total_ms: ms(t_total),
        },
    })
}

/// Baseline run for one question: retrieve, rerank with gold knowledge,
/// read the top-k once, split the answer sequence on the separator.
pub fn run_rerank_then_read(
    question: &Question,
    corpus: &Corpus,
    store: &EmbeddingStore,
    embedder: &dyn EmbedderBackend,
    reader: &dyn ReaderBackend,
    config: &PipelineConfig,
    matcher: &Matcher,
) -> Result<RunReport> {
    config.validate()?;
    let t_total = Instant::now();

    let t = Instant::now();
    let q_vec = embedder.embed_one(&question.text)?;
    let retrieved = retrieve(&q_vec, store, config.retrieval_size)?;
    let retrieve_ms = ms(t);

    let reranked = crate::retrieval::opr_rank(&retrieved, &question.answers, corpus, matcher)?;
    let top_k = RankedList::new(
        reranked.entries[..config.evidence_k.min(reranked.len())].to_vec(),
    );
    let reader_passages = truncated(top_k.materialize(corpus)?, config.max_passage_tokens);

    let t = Instant::now();
    let raw = reader.read(&question.text, &reader_passages)?;
    let read_ms = ms(t);

    let predictions: Vec<String> = raw
        .split(config.reader_separator.as_str())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();

    Ok(RunReport {
        question_id: question.id.clone(),
        framework: Framework::RerankThenRead,
        config: config.clone(),
        backends: vec![embedder.metadata(), reader.metadata()],
        retrieved,
        candidates: None,
        evidences: Vec::new(),
        reader_input: top_k.ids().collect(),
        reader_output: Some(raw),
        predictions,
        empty_candidate_set: false,
        timings: StageTimings {
            retrieve_ms,
            recall_ms: 0.0,
            aggregate_ms: 0.0,
            verify_ms: 0.0,
            read_ms,
            total_ms: ms(t_total),
        },
    })
}

/// Run recall-then-verify over many questions. Runs in parallel when every
/// backend declares itself safe for concurrent calls; output order always
/// matches input order.
pub fn run_rtv_batch(
    questions: &[Question],
    corpus: &Corpus,
    store: &EmbeddingStore,
    backends: &RtvBackends,
    config: &PipelineConfig,
    matcher: &Matcher,
    policy: FailurePolicy,
) -> Result<Vec<RunReport>> {
    let concurrent = backends.embedder.metadata().concurrent_safe
        && backends.recaller.metadata().concurrent_safe
        && backends.verifier.metadata().concurrent_safe;
    if concurrent {
        questions
            .par_iter()
            .map(|q| run_recall_then_verify(q, corpus, store, backends, config, matcher, policy))
            .collect()
    } else {
        questions
            .iter()
            .map(|q| run_recall_then_verify(q, corpus, store, backends, config, matcher, policy))
            .collect()
    }
}

/// Run the baseline over many questions, parallel when the backends allow.
pub fn run_rtr_batch(
    questions: &[Question],
    corpus: &Corpus,
    store: &EmbeddingStore,
    embedder: &dyn EmbedderBackend,
    reader: &dyn ReaderBackend,
    config: &PipelineConfig,
    matcher: &Matcher,
) -> Result<Vec<RunReport>> {
    let concurrent = embedder.metadata().concurrent_safe && reader.metadata().concurrent_safe;
    if concurrent {
        questions
            .par_iter()
            .map(|q| run_rerank_then_read(q, corpus, store, embedder, reader, config, matcher))
            .collect()
    } else {
        questions
            .iter()
            .map(|q| run_rerank_then_read(q, corpus, store, embedder, reader, config, matcher))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        ConstantVerifier, GoldMap, OracleReader, OracleRecaller, PrefixEmbedder,
        SupportContrastVerifier, SupportCountVerifier,
    };
    use crate::types::AnswerCluster;

    fn passage(id: u64, text: &str) -> Passage {
        Passage::new(id, "", text).unwrap()
    }

    #[test]
    fn recaller_output_serde() {
        let a = RecallerOutput::Answers(vec!["x".into(), "y".into()]);
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"["x","y"]"#);
        let i = RecallerOutput::Irrelevant;
        assert_eq!(serde_json::to_string(&i).unwrap(), r#""IRRELEVANT""#);
        assert_eq!(serde_json::from_str::<RecallerOutput>(r#"["x","y"]"#).unwrap(), a);
        assert_eq!(serde_json::from_str::<RecallerOutput>(r#""IRRELEVANT""#).unwrap(), i);
        assert!(serde_json::from_str::<RecallerOutput>(r#""OTHER""#).is_err());
        assert!(serde_json::from_str::<RecallerOutput>(r#"["x",""]"#).is_err());
    }

    #[test]
    fn validity_score_examples() {
        let s = |a, b| validity_score(VerifierLogits { logit_right: a, logit_wrong: b }).unwrap();
        assert_eq!(s(3.25, 3.25), 0.5);
        assert!((s(1.0, 0.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((s(1.0, 0.0) - 0.731059).abs() < 1e-6);
        let big = s(1000.0, 0.0);
        assert!(big.is_finite() && big > 0.999999);
        let small = s(0.0, 1000.0);
        assert!(small.is_finite() && small < 1e-6);
        assert!(validity_score(VerifierLogits {
            logit_right: f64::NAN,
            logit_wrong: 0.0
        })
        .is_err());
    }

    #[test]
    fn validity_score_complement() {
        for (a, b) in [(0.3, -2.0), (5.0, 5.0), (-7.5, 2.25), (100.0, -100.0)] {
            let s1 = validity_score(VerifierLogits { logit_right: a, logit_wrong: b }).unwrap();
            let s2 = validity_score(VerifierLogits { logit_right: b, logit_wrong: a }).unwrap();
            assert!((s1 + s2 - 1.0).abs() < 1e-12);
        }
    }

    fn q3() -> Question {
        Question::new(
            "q1",
            "what are the answers",
            vec![
                AnswerCluster::single("1995"),
                AnswerCluster::single("2012"),
                AnswerCluster::single("heat"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn recall_candidates_oracle_and_dedup() {
        let q = q3();
        let gold = GoldMap::from_questions(std::slice::from_ref(&q));
        let recaller = OracleRecaller::new(gold, Matcher::default());
        let passages = vec![
            passage(0, "released in 1995"),
            passage(1, "then 2012 came"),
            passage(2, "no answer here"),
        ];
        let set = recall_candidates(
            &q,
            &passages,
            &recaller,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        let texts: Vec<&str> = set.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["1995", "2012"]);
        assert_eq!(set.candidates[0].source_passage_ids, vec![0]);
        assert!(!set.candidates.is_empty());
    }

    struct FixedRecaller(Vec<RecallerOutput>);
    impl RecallerBackend for FixedRecaller {
        fn metadata(&self) -> BackendMetadata {
            BackendMetadata::new(crate::types::BackendKind::Recaller, "fixed")
        }
        fn recall(&self, _q: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>> {
            Ok(self.0[..passages.len()].to_vec())
        }
    }

    #[test]
    fn recall_candidates_normalized_dedup_merges_provenance() {
        let q = Question::new("q1", "year", vec![]).unwrap();
        let recaller = FixedRecaller(vec![
            RecallerOutput::Answers(vec!["The 1995".into()]),
            RecallerOutput::Answers(vec!["1995".into(), "the".into()]),
        ]);
        let passages = vec![passage(7, "a"), passage(3, "b")];
        let set = recall_candidates(
            &q,
            &passages,
            &recaller,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].text, "The 1995");
        assert_eq!(set.candidates[0].normalized, "1995");
        assert_eq!(set.candidates[0].source_passage_ids, vec![3, 7]);
        assert_eq!(set.dropped_empty, 1);
    }

    #[test]
    fn recall_candidates_all_irrelevant_is_empty() {
        let q = q3();
        let recaller = FixedRecaller(vec![RecallerOutput::Irrelevant, RecallerOutput::Irrelevant]);
        let set = recall_candidates(
            &q,
            &[passage(0, "x"), passage(1, "y")],
            &recaller,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert!(set.candidates.is_empty());
    }

    fn evidence_for(texts: &[(u64, &str)], cand: &str, idx: usize) -> (Corpus, Evidence) {
        let corpus = Corpus::new(
            texts
                .iter()
                .map(|(id, t)| Passage::new(*id, "", *t).unwrap())
                .collect(),
        )
        .unwrap();
        let m = Matcher::default();
        let covers: Vec<bool> = texts.iter().map(|(_, t)| m.covers_text(t, cand)).collect();
        let ev = Evidence {
            candidate_index: idx,
            passages: texts.iter().map(|(id, _)| *id).collect(),
            scores: vec![0.0; texts.len()],
            covers_candidate: covers,
        };
        (corpus, ev)
    }

    #[test]
    fn verify_candidates_support_contrast_example() {
        let q = Question::new("q1", "year", vec![]).unwrap();
        let texts: Vec<(u64, String)> = (0..10).map(|i| (i, format!("ans77 in {i}"))).collect();
        let texts_ref: Vec<(u64, &str)> = texts.iter().map(|(i, t)| (*i, t.as_str())).collect();
        let (corpus, ev) = evidence_for(&texts_ref, "ans77", 0);
        let set = CandidateSet {
            question_id: "q1".into(),
            candidates: vec![Candidate::new("ans77", vec![0])],
            ..CandidateSet::default()
        };
        let scored = verify_candidates(
            &q,
            set,
            &[ev],
            &corpus,
            &SupportContrastVerifier::default(),
            &PipelineConfig::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        let s = scored.candidates[0].validity_score.unwrap();
        assert!((s - 0.99995).abs() < 5e-6);
    }

    #[test]
    fn verify_empty_evidence_zero_logits_is_half() {
        let q = Question::new("q1", "year", vec![]).unwrap();
        let corpus = Corpus::new(vec![]).unwrap();
        let set = CandidateSet {
            question_id: "q1".into(),
            candidates: vec![Candidate::new("x9", vec![0])],
            ..CandidateSet::default()
        };
        let ev = Evidence {
            candidate_index: 0,
            passages: vec![],
            scores: vec![],
            covers_candidate: vec![],
        };
        let scored = verify_candidates(
            &q,
            set,
            &[ev],
            &corpus,
            &ConstantVerifier {
                logit_right: 0.0,
                logit_wrong: 0.0,
            },
            &PipelineConfig::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert_eq!(scored.candidates[0].validity_score, Some(0.5));
    }

    #[test]
    fn verify_singleton_equals_batch() {
        let q = Question::new("q1", "year", vec![]).unwrap();
        let texts: Vec<(u64, String)> = (0..6)
            .map(|i| {
                let t = if i % 2 == 0 {
                    format!("has cand{} here", i % 3)
                } else {
                    format!("filler {i}")
                };
                (i, t)
            })
            .collect();
        let texts_ref: Vec<(u64, &str)> = texts.iter().map(|(i, t)| (*i, t.as_str())).collect();
        let corpus = Corpus::new(
            texts_ref
                .iter()
                .map(|(id, t)| Passage::new(*id, "", *t).unwrap())
                .collect(),
        )
        .unwrap();
        let cands = vec![
            Candidate::new("cand0", vec![0]),
            Candidate::new("cand1", vec![1]),
            Candidate::new("cand2", vec![2]),
        ];
        let evs: Vec<Evidence> = cands
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut ev = Evidence {
                    candidate_index: i,
                    passages: texts_ref.iter().map(|(id, _)| *id).collect(),
                    scores: vec![0.0; texts_ref.len()],
                    covers_candidate: vec![],
                };
                ev.recompute_covers(c, &corpus, &Matcher::default()).unwrap();
                ev
            })
            .collect();
        let batch = verify_candidates(
            &q,
            CandidateSet {
                question_id: "q1".into(),
                candidates: cands.clone(),
                ..CandidateSet::default()
            },
            &evs,
            &corpus,
            &SupportContrastVerifier::default(),
            &PipelineConfig::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        for (i, c) in cands.iter().enumerate() {
            let mut single_ev = evs[i].clone();
            single_ev.candidate_index = 0;
            let single = verify_candidates(
                &q,
                CandidateSet {
                    question_id: "q1".into(),
                    candidates: vec![c.clone()],
                    ..CandidateSet::default()
                },
                &[single_ev],
                &corpus,
                &SupportContrastVerifier::default(),
                &PipelineConfig::default(),
                FailurePolicy::FailFast,
            )
            .unwrap();
            assert_eq!(
                single.candidates[0].validity_score.unwrap().to_bits(),
                batch.candidates[i].validity_score.unwrap().to_bits()
            );
        }
    }

    fn scored_set(scores: &[f64]) -> CandidateSet {
        CandidateSet {
            question_id: "q".into(),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let mut c = Candidate::new(format!("c{i}"), vec![i as u64]);
                    c.validity_score = Some(s);
                    c
                })
                .collect(),
            ..CandidateSet::default()
        }
    }

    #[test]
    fn select_predictions_threshold_rules() {
        let set = scored_set(&[0.7, 0.5, 0.3]);
        assert_eq!(select_predictions(&set, 0.5), vec!["c0", "c1"]);
        assert_eq!(select_predictions(&set, 0.0).len(), 3);
        assert_eq!(select_predictions(&set, 1.0).len(), 0);
        let exact = scored_set(&[1.0, 0.9]);
        assert_eq!(select_predictions(&exact, 1.0), vec!["c0"]);
        // Ties keep candidate order; ordering is by descending score.
        let ties = scored_set(&[0.4, 0.8, 0.4]);
        assert_eq!(select_predictions(&ties, 0.3), vec!["c1", "c0", "c2"]);
    }

    #[test]
    fn select_predictions_monotone_in_tau() {
        let set = scored_set(&[0.91, 0.13, 0.55, 0.34, 0.77]);
        for lo in [0.1, 0.3, 0.5] {
            let hi = lo + 0.2;
            let at_hi = select_predictions(&set, hi);
            let at_lo = select_predictions(&set, lo);
            assert!(at_hi.iter().all(|p| at_lo.contains(p)));
        }
    }

    #[test]
    fn single_answer_select_rules() {
        let set = scored_set(&[0.2, 0.9]);
        assert_eq!(single_answer_select(&set).unwrap(), "c1");
        let tie = scored_set(&[0.9, 0.9]);
        assert_eq!(single_answer_select(&tie).unwrap(), "c0");
        let one = scored_set(&[0.1]);
        assert_eq!(single_answer_select(&one).unwrap(), "c0");
        let none = CandidateSet::default();
        assert!(single_answer_select(&none).is_err());
    }

    #[test]
    fn calibrate_tau_constant_objective_returns_largest() {
        let q = Question::new("q1", "t", vec![AnswerCluster::single("zz9")]).unwrap();
        let set = scored_set(&[0.99]);
        let tau = calibrate_tau(&[(q, set)], &TAU_GRID, &Matcher::default()).unwrap();
        assert_eq!(tau, 0.9);
    }

    #[test]
    fn calibrate_tau_planted_peak() {
        // One question with gold {g}; candidate "g" scored 0.55 and a wrong
        // candidate scored 0.45. tau in {0.5, 0.55} keeps only the right
        // one; lower keeps both (precision loss), higher drops everything.
        let q = Question::new("q1", "t", vec![AnswerCluster::single("gg7")]).unwrap();
        let mut set = CandidateSet {
            question_id: "q1".into(),
            candidates: vec![Candidate::new("gg7", vec![0]), Candidate::new("bad", vec![1])],
            ..CandidateSet::default()
        };
        set.candidates[0].validity_score = Some(0.55);
        set.candidates[1].validity_score = Some(0.45);
        let tau = calibrate_tau(&[(q, set)], &TAU_GRID, &Matcher::default()).unwrap();
        assert_eq!(tau, 0.5);
        assert!(calibrate_tau(&[], &TAU_GRID, &Matcher::default()).is_err());
    }

    fn rtv_fixture() -> (Question, Corpus, EmbeddingStore, PrefixEmbedder) {
        let q = Question::new(
            "q1",
            "which planted answers exist",
            vec![
                AnswerCluster::single("ansx1"),
                AnswerCluster::single("ansx2"),
                AnswerCluster::single("ansx3"),
            ],
        )
        .unwrap();
        let mut passages = Vec::new();
        let mut entries = Vec::new();
        let dim = 4;
        for a in 0..3u64 {
            for s in 0..2u64 {
                let id = a * 2 + s;
                passages.push(Passage::new(id, "", format!("support for ansx{}", a + 1)).unwrap());
                entries.push((id, vec![2.0 - s as f32 * 0.1, 0.0, 0.0, 0.0]));
            }
        }
        for d in 0..20u64 {
            let id = 100 + d;
            passages.push(Passage::new(id, "", format!("distractor {d}")).unwrap());
            entries.push((id, vec![0.3, 0.1, 0.0, 0.0]));
        }
        let corpus = Corpus::new(passages).unwrap();
        let store = EmbeddingStore::from_entries(dim, entries).unwrap();
        let embedder = PrefixEmbedder::new(
            dim,
            vec![(q.text.clone(), vec![1.0, 0.0, 0.0, 0.0])],
        )
        .unwrap();
        (q, corpus, store, embedder)
    }

    #[test]
    fn run_rtv_oracle_end_to_end() {
        let (q, corpus, store, embedder) = rtv_fixture();
        let gold = GoldMap::from_questions(std::slice::from_ref(&q));
        let recaller = OracleRecaller::new(gold, Matcher::default());
        let verifier = SupportCountVerifier::default();
        let backends = RtvBackends {
            embedder: &embedder,
            recaller: &recaller,
            verifier: &verifier,
        };
        let config = PipelineConfig {
            retrieval_size: 26,
            evidence_k: 5,
            ..PipelineConfig::default()
        };
        let report = run_recall_then_verify(
            &q,
            &corpus,
            &store,
            &backends,
            &config,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        let s = Matcher::default()
            .multi_answer_f1(&report.predictions, &q.answers)
            .unwrap();
        assert_eq!(s.f1, 1.0);
        assert!(!report.empty_candidate_set);
        assert_eq!(report.evidences.len(), 3);

        let again = run_recall_then_verify(
            &q,
            &corpus,
            &store,
            &backends,
            &config,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_vec(&report.with_zeroed_timings()).unwrap(),
            serde_json::to_vec(&again.with_zeroed_timings()).unwrap()
        );
    }

    #[test]
    fn run_rtv_empty_candidates_flagged() {
        let (q, corpus, store, embedder) = rtv_fixture();
        let recaller = FixedRecaller(vec![RecallerOutput::Irrelevant; 26]);
        let verifier = SupportCountVerifier::default();
        let backends = RtvBackends {
            embedder: &embedder,
            recaller: &recaller,
            verifier: &verifier,
        };
        let config = PipelineConfig {
            retrieval_size: 26,
            evidence_k: 5,
            ..PipelineConfig::default()
        };
        let report = run_recall_then_verify(
            &q,
            &corpus,
            &store,
            &backends,
            &config,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert!(report.empty_candidate_set);
        assert!(report.predictions.is_empty());
    }

    #[test]
    fn run_rtr_oracle_reader_covers_subset() {
        // Supports for three answers, but retrieval_size fetches only the
        // top passages: ansx3's single low-scored support is excluded, so
        // the reader sees (and emits) exactly two clusters.
        let q = Question::new(
            "q1",
            "which planted answers exist",
            vec![
                AnswerCluster::single("ansx1"),
                AnswerCluster::single("ansx2"),
                AnswerCluster::single("ansx3"),
            ],
        )
        .unwrap();
        let corpus = Corpus::new(vec![
            Passage::new(0, "", "support for ansx1").unwrap(),
            Passage::new(1, "", "support for ansx2").unwrap(),
            Passage::new(2, "", "support for ansx3").unwrap(),
            Passage::new(3, "", "distractor one").unwrap(),
            Passage::new(4, "", "distractor two").unwrap(),
        ])
        .unwrap();
        let store = EmbeddingStore::from_entries(
            2,
            vec![
                (0, vec![2.0, 0.0]),
                (1, vec![1.9, 0.0]),
                (2, vec![0.1, 0.0]),
                (3, vec![1.0, 0.0]),
                (4, vec![0.9, 0.0]),
            ],
        )
        .unwrap();
        let embedder = PrefixEmbedder::new(2, vec![(q.text.clone(), vec![1.0, 0.0])]).unwrap();
        let gold = GoldMap::from_questions(std::slice::from_ref(&q));
        let reader = OracleReader::new(gold, Matcher::default(), "[SEP]");
        let config = PipelineConfig {
            retrieval_size: 4,
            evidence_k: 2,
            ..PipelineConfig::default()
        };
        let report = run_rerank_then_read(
            &q,
            &corpus,
            &store,
            &embedder,
            &reader,
            &config,
            &Matcher::default(),
        )
        .unwrap();
        assert_eq!(report.predictions, vec!["ansx1", "ansx2"]);
        assert_eq!(report.reader_input, vec![0, 1]);
    }

    #[test]
    fn batch_matches_sequential() {
        let (q, corpus, store, embedder) = rtv_fixture();
        let gold = GoldMap::from_questions(std::slice::from_ref(&q));
        let recaller = OracleRecaller::new(gold, Matcher::default());
        let verifier = SupportCountVerifier::default();
        let backends = RtvBackends {
            embedder: &embedder,
            recaller: &recaller,
            verifier: &verifier,
        };
        let config = PipelineConfig {
            retrieval_size: 26,
            evidence_k: 5,
            ..PipelineConfig::default()
        };
        let questions = vec![q.clone(), q.clone(), q];
        let batch = run_rtv_batch(
            &questions,
            &corpus,
            &store,
            &backends,
            &config,
            &Matcher::default(),
            FailurePolicy::FailFast,
        )
        .unwrap();
        assert_eq!(batch.len(), 3);
        for r in &batch {
            let seq = run_recall_then_verify(
                &questions[0],
                &corpus,
                &store,
                &backends,
                &config,
                &Matcher::default(),
                FailurePolicy::FailFast,
            )
            .unwrap();
            assert_eq!(r.with_zeroed_timings(), seq.with_zeroed_timings());
        }
    }
}
