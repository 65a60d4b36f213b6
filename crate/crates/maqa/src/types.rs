//! Core domain types shared by every stage of the pipeline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};
use crate::metrics::{normalize, Matcher};

/// One semantic answer, given as the set of surface forms that are all
/// considered correct renderings of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerCluster {
    pub forms: Vec<String>,
}

impl AnswerCluster {
    /// Rejects empty clusters and forms that normalize to the empty string
    /// (an empty needle would trivially match every passage).
    pub fn new(forms: Vec<String>) -> Result<Self> {
        if forms.is_empty() {
            return Err(MaqaError::invalid("answer cluster must have at least one form"));
        }
        for f in &forms {
            if normalize(f).is_empty() {
                return Err(MaqaError::invalid(format!(
                    "answer form {f:?} is empty after normalization"
                )));
            }
        }
        Ok(AnswerCluster { forms })
    }

    pub fn single(form: impl Into<String>) -> Self {
        AnswerCluster {
            forms: vec![form.into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.forms.clone()).map(|_| ())
    }
}

/// A question together with its gold answer clusters. `answers` may be empty
/// for unlabeled inputs; evaluation rejects such records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub answers: Vec<AnswerCluster>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, answers: Vec<AnswerCluster>) -> Result<Self> {
        let q = Question {
            id: id.into(),
            text: text.into(),
            answers,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(MaqaError::invalid("question id must be non-empty"));
        }
        if self.text.trim().is_empty() {
            return Err(MaqaError::invalid(format!("question {} has empty text", self.id)));
        }
        for c in &self.answers {
            c.validate()?;
        }
        Ok(())
    }

    /// Questions with two or more gold clusters form the multi-answer subset.
    pub fn is_multi_answer(&self) -> bool {
        self.answers.len() >= 2
    }
}

/// A retrievable unit of text. Ids are unique within a corpus and all
/// tie-breaking across the crate is by ascending id. `retrieval_score` is
/// populated once the passage has been scored against a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u64,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_score: Option<f32>,
}

impl Passage {
    pub fn new(id: u64, title: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let p = Passage {
            id,
            title: title.into(),
            text: text.into(),
            retrieval_score: None,
        };
        if p.text.trim().is_empty() {
            return Err(MaqaError::invalid(format!("passage {id} has empty text")));
        }
        Ok(p)
    }
}

/// Passage collection with an id index for O(1) lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<u64, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (idx, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(MaqaError::invalid(format!("passage {} has empty text", p.id)));
            }
            if by_id.insert(p.id, idx).is_some() {
                return Err(MaqaError::DuplicateId {
                    id: p.id.to_string(),
                });
            }
        }
        Ok(Corpus { passages, by_id })
    }

    pub fn get(&self, id: u64) -> Option<&Passage> {
        self.by_id.get(&id).map(|&i| &self.passages[i])
    }

    pub fn require(&self, id: u64) -> Result<&Passage> {
        self.get(id).ok_or(MaqaError::UnknownPassage(id))
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }
}

/// An answer candidate surfaced from one or more passages.
///
/// `source_passage_ids` records every passage id the form was read out of,
/// ascending and deduplicated. `validity_score` is attached by the verifier
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub normalized: String,
    pub source_passage_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_score: Option<f64>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, sources: Vec<u64>) -> Self {
        Self::with_matcher(text, sources, &Matcher::default())
    }

    pub fn with_matcher(text: impl Into<String>, mut sources: Vec<u64>, matcher: &Matcher) -> Self {
        sources.sort_unstable();
        sources.dedup();
        let text = text.into();
        let normalized = matcher.normalize(&text);
        Candidate {
            text,
            normalized,
            source_passage_ids: sources,
            validity_score: None,
        }
    }
}

/// Candidates for one question, in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub question_id: String,
    pub candidates: Vec<Candidate>,
    /// Raw recalls dropped because they normalized to the empty string.
    #[serde(default)]
    pub dropped_empty: usize,
    /// Passages skipped under the skip-on-failure policy.
    #[serde(default)]
    pub skipped_passages: usize,
    /// Candidates left unscored under the skip-on-failure policy.
    #[serde(default)]
    pub skipped_candidates: usize,
}

/// The evidence set for one candidate: its top-k passages under the
/// aggregator ordering, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub candidate_index: usize,
    /// Passage ids in aggregator order.
    pub passages: Vec<u64>,
    /// Aggregator similarity score for each passage, aligned with `passages`.
    pub scores: Vec<f32>,
    /// Whether the normalized candidate occurs in each passage's normalized text.
    pub covers_candidate: Vec<bool>,
}

impl Evidence {
    /// Number of evidence passages whose text contains the candidate.
    pub fn coverage_count(&self) -> usize {
        self.covers_candidate.iter().filter(|&&c| c).count()
    }

    /// Refresh the `covers_candidate` flags from passage texts, e.g. after
    /// the passage list was edited by an ablation.
    pub fn recompute_covers(&mut self, candidate: &Candidate, corpus: &Corpus, matcher: &Matcher) -> Result<()> {
        self.covers_candidate.clear();
        for &pid in &self.passages {
            let p = corpus.require(pid)?;
            self.covers_candidate
                .push(matcher.covers_text(&p.text, &candidate.text));
        }
        Ok(())
    }
}

/// Similarity used when scoring candidate-passage pairs in the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

/// How predictions are matched against gold clusters for F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// First-fit over canonically ordered predictions and clusters. Order
    /// independent by construction.
    #[default]
    Greedy,
    /// Maximum bipartite matching. Never under-counts when clusters share
    /// surface forms.
    Optimal,
}

/// Knobs shared by both pipelines. Field defaults mirror `Default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Passages fetched per question by the retriever.
    pub retrieval_size: usize,
    /// Evidence passages kept per candidate; also the reading budget of the
    /// single-pass baseline.
    pub evidence_k: usize,
    /// Validity threshold: candidates scoring >= tau are predicted.
    pub tau: f64,
    /// Whitespace-token cap applied to passage text before any backend call.
    pub max_passage_tokens: usize,
    /// Separator between question and candidate in aggregator/verifier input.
    pub qc_separator: String,
    /// Separator the reader uses between emitted answers.
    pub reader_separator: String,
    pub similarity: Similarity,
    pub match_strategy: MatchStrategy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval_size: 100,
            evidence_k: 10,
            tau: 0.5,
            max_passage_tokens: 360,
            qc_separator: "[SEP]".to_string(),
            reader_separator: "[SEP]".to_string(),
            similarity: Similarity::Dot,
            match_strategy: MatchStrategy::Greedy,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.evidence_k == 0 {
            return Err(MaqaError::invalid("evidence_k must be positive"));
        }
        if self.evidence_k > self.retrieval_size {
            return Err(MaqaError::invalid(format!(
                "evidence_k ({}) must not exceed retrieval_size ({})",
                self.evidence_k, self.retrieval_size
            )));
        }
        if !(self.tau.is_finite() && (0.0..=1.0).contains(&self.tau)) {
            return Err(MaqaError::invalid(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.max_passage_tokens == 0 {
            return Err(MaqaError::invalid("max_passage_tokens must be positive"));
        }
        Ok(())
    }
}

/// Which family of backend produced an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Embedder,
    Recaller,
    Verifier,
    Reader,
}

/// Description a backend reports about itself; recorded in run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub backend_kind: BackendKind,
    pub model_label: String,
    /// Negatives-per-positive ratio the model was trained with, if known.
    /// Descriptive provenance only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_neg: Option<f64>,
    /// Whether the backend may be called from multiple threads at once.
    pub concurrent_safe: bool,
}

impl BackendMetadata {
    pub fn new(backend_kind: BackendKind, model_label: impl Into<String>) -> Self {
        BackendMetadata {
            backend_kind,
            model_label: model_label.into(),
            alpha_neg: None,
            concurrent_safe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha_neg {
            if !(a.is_finite() && a >= 0.0) {
                return Err(MaqaError::invalid(format!("alpha_neg must be >= 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// Truncate to the first `max_tokens` whitespace-separated tokens. Passages
/// are capped this way before being sent to any backend.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let mut tokens = text.split_whitespace();
    let mut out = String::new();
    for (i, tok) in tokens.by_ref().take(max_tokens).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_rejects_empty_and_empty_normalized() {
        assert!(AnswerCluster::new(vec![]).is_err());
        assert!(AnswerCluster::new(vec!["  ".into()]).is_err());
        assert!(AnswerCluster::new(vec!["the!".into()]).is_err());
        assert!(AnswerCluster::new(vec!["1995".into()]).is_ok());
    }

    #[test]
    fn question_validation() {
        assert!(Question::new("q1", "who?", vec![]).is_ok());
        assert!(Question::new("", "who?", vec![]).is_err());
        assert!(Question::new("q1", " ", vec![]).is_err());
    }

    #[test]
    fn passage_requires_text() {
        assert!(Passage::new(0, "t", "body").is_ok());
        assert!(Passage::new(0, "t", "  ").is_err());
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let p = |id| Passage::new(id, "", "t").unwrap();
        assert!(Corpus::new(vec![p(1), p(2), p(1)]).is_err());
        let c = Corpus::new(vec![p(1), p(2)]).unwrap();
        assert_eq!(c.require(2).unwrap().id, 2);
        assert!(c.require(3).is_err());
    }

    #[test]
    fn candidate_normalizes_and_dedups_sources() {
        let c = Candidate::new("The 1995!", vec![5, 1, 5, 3]);
        assert_eq!(c.normalized, "1995");
        assert_eq!(c.source_passage_ids, vec![1, 3, 5]);
        assert_eq!(c.validity_score, None);
    }

    #[test]
    fn config_default_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.retrieval_size, 100);
        assert_eq!(cfg.evidence_k, 10);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.max_passage_tokens, 360);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::default();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.5;
        cfg.evidence_k = 0;
        assert!(cfg.validate().is_err());
        cfg.evidence_k = 200;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backend_metadata_alpha_neg() {
        let mut m = BackendMetadata::new(BackendKind::Verifier, "test");
        m.validate().unwrap();
        m.alpha_neg = Some(16.0);
        m.validate().unwrap();
        m.alpha_neg = Some(-1.0);
        assert!(m.validate().is_err());
    }

    #[test]
    fn truncate_caps_and_collapses() {
        assert_eq!(truncate_tokens("a b  c d", 3), "a b c");
        assert_eq!(truncate_tokens("a b", 10), "a b");
        assert_eq!(truncate_tokens("", 5), "");
    }

    #[test]
    fn core_serde_round_trip() {
        let q = Question::new(
            "q1",
            "when was it released",
            vec![AnswerCluster::new(vec!["1995".into(), "the year 1995".into()]).unwrap()],
        )
        .unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(q, serde_json::from_str::<Question>(&s).unwrap());

        let p = Passage::new(7, "Title", "body text").unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(p, serde_json::from_str::<Passage>(&s).unwrap());

        let c = Candidate::new("The 1995", vec![1, 2]);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(c, serde_json::from_str::<Candidate>(&s).unwrap());

        let cfg = PipelineConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(cfg, serde_json::from_str::<PipelineConfig>(&s).unwrap());
        let partial: PipelineConfig = serde_json::from_str(r#"{"tau": 0.7}"#).unwrap();
        assert_eq!(partial.tau, 0.7);
        assert_eq!(partial.retrieval_size, 100);

        let e = Evidence {
            candidate_index: 0,
            passages: vec![3, 1],
            scores: vec![0.9, 0.1],
            covers_candidate: vec![true, false],
        };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(e, serde_json::from_str::<Evidence>(&s).unwrap());
    }
}
