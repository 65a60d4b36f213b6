//! Backend traits for the four pluggable model roles, plus deterministic
//! reference implementations used for testing and offline runs.
//!
//! The oracle backends are constructed with gold knowledge and exist to
//! exercise pipeline logic exactly; the hash/keyword backends are model-free
//! stand-ins that behave identically everywhere.

use std::collections::HashMap;

use crate::error::{MaqaError, Result};
use crate::metrics::Matcher;
use crate::pipeline::{RecallerOutput, VerifierLogits};
use crate::types::{AnswerCluster, BackendKind, BackendMetadata, Passage, Question};

/// Maps text to a dense vector. Batched: one vector per input text.
pub trait EmbedderBackend: Send + Sync {
    fn metadata(&self) -> BackendMetadata;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = self.embed(std::slice::from_ref(&text.to_string()))?;
        if v.len() != 1 {
            return Err(MaqaError::backend(
                "embedder",
                format!("expected 1 vector, got {}", v.len()),
            ));
        }
        Ok(v.pop().unwrap())
    }
}

/// Proposes answer candidates per passage, or marks a passage irrelevant.
/// The output is aligned with the input passages.
pub trait RecallerBackend: Send + Sync {
    fn metadata(&self) -> BackendMetadata;
    fn recall(&self, question: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>>;
}

/// Scores whether a candidate is a valid answer given its evidence passages.
pub trait VerifierBackend: Send + Sync {
    fn metadata(&self) -> BackendMetadata;
    fn verify(&self, question: &str, candidate: &str, passages: &[Passage]) -> Result<VerifierLogits>;
}

/// Emits an answer sequence (separator-joined) for a question given passages.
pub trait ReaderBackend: Send + Sync {
    fn metadata(&self) -> BackendMetadata;
    fn read(&self, question: &str, passages: &[Passage]) -> Result<String>;
}

/// Gold clusters keyed by question text, for oracle backends that must look
/// up gold knowledge from the question string alone.
#[derive(Debug, Clone, Default)]
pub struct GoldMap {
    by_question: HashMap<String, Vec<AnswerCluster>>,
}

impl GoldMap {
    pub fn from_questions(questions: &[Question]) -> Self {
        GoldMap {
            by_question: questions
                .iter()
                .map(|q| (q.text.clone(), q.answers.clone()))
                .collect(),
        }
    }

    pub fn get(&self, question: &str) -> Result<&[AnswerCluster]> {
        self.by_question
            .get(question)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                MaqaError::backend("oracle", format!("question not in gold map: {question:?}"))
            })
    }
}

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Deterministic pseudo-embedder: component i of a text's vector is a hash
/// of the text and i, mapped to [-1, 1). No semantics, full determinism.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }

    pub fn component(text: &str, i: usize) -> f32 {
        let h = fnv1a64(fnv1a64(FNV_OFFSET, text.as_bytes()), &(i as u64).to_le_bytes());
        (((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0) as f32
    }
}

impl EmbedderBackend for HashEmbedder {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Embedder, format!("hash-embedder-d{}", self.dim))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| (0..self.dim).map(|i| Self::component(t, i)).collect())
            .collect())
    }
}

/// Embedder returning a planted vector for every text that starts with a
/// registered prefix (first match wins). Used by synthetic fixtures where
/// question and question-candidate inputs must map to a known vector.
#[derive(Debug, Clone)]
pub struct PrefixEmbedder {
    dim: usize,
    entries: Vec<(String, Vec<f32>)>,
    default: Option<Vec<f32>>,
}

impl PrefixEmbedder {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        for (p, v) in &entries {
            if v.len() != dim {
                return Err(MaqaError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if p.is_empty() {
                return Err(MaqaError::invalid("prefix must be non-empty"));
            }
        }
        Ok(PrefixEmbedder {
            dim,
            entries,
            default: None,
        })
    }

    pub fn with_default(mut self, v: Vec<f32>) -> Result<Self> {
        if v.len() != self.dim {
            return Err(MaqaError::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        self.default = Some(v);
        Ok(self)
    }
}

impl EmbedderBackend for PrefixEmbedder {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Embedder, format!("prefix-embedder-d{}", self.dim))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.entries
                    .iter()
                    .find(|(p, _)| t.starts_with(p.as_str()))
                    .map(|(_, v)| v.clone())
                    .or_else(|| self.default.clone())
                    .ok_or_else(|| {
                        MaqaError::backend("embedder", format!("no prefix matches text {t:?}"))
                    })
            })
            .collect()
    }
}

/// Recaller that emits every gold form contained in each passage, marking
/// passages with no gold content irrelevant.
#[derive(Debug, Clone)]
pub struct OracleRecaller {
    gold: GoldMap,
    matcher: Matcher,
}

impl OracleRecaller {
    pub fn new(gold: GoldMap, matcher: Matcher) -> Self {
        OracleRecaller { gold, matcher }
    }
}

impl RecallerBackend for OracleRecaller {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Recaller, "gold-oracle-recaller")
    }

    fn recall(&self, question: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>> {
        let gold = self.gold.get(question)?;
        Ok(passages
            .iter()
            .map(|p| {
                let answers: Vec<String> = gold
                    .iter()
                    .flat_map(|c| c.forms.iter())
                    .filter(|f| self.matcher.covers_text(&p.text, f))
                    .cloned()
                    .collect();
                if answers.is_empty() {
                    RecallerOutput::Irrelevant
                } else {
                    RecallerOutput::Answers(answers)
                }
            })
            .collect())
    }
}

/// Model-free recaller: emits question tokens (length >= 3 after
/// normalization) that occur in the passage text, up to 5 per passage.
#[derive(Debug, Clone, Default)]
pub struct KeywordRecaller {
    matcher: Matcher,
}

impl KeywordRecaller {
    pub fn new(matcher: Matcher) -> Self {
        KeywordRecaller { matcher }
    }

    fn keywords(&self, question: &str) -> Vec<String> {
        let mut seen = Vec::new();
        for tok in self.matcher.normalize(question).split_whitespace() {
            if tok.len() >= 3 && !seen.iter().any(|s| s == tok) {
                seen.push(tok.to_string());
            }
        }
        seen
    }

    fn matches_in(&self, question: &str, passage: &Passage) -> Vec<String> {
        self.keywords(question)
            .into_iter()
            .filter(|t| self.matcher.covers_text(&passage.text, t))
            .take(5)
            .collect()
    }
}

impl RecallerBackend for KeywordRecaller {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Recaller, "keyword-recaller")
    }

    fn recall(&self, question: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>> {
        Ok(passages
            .iter()
            .map(|p| {
                let hits = self.matches_in(question, p);
                if hits.is_empty() {
                    RecallerOutput::Irrelevant
                } else {
                    RecallerOutput::Answers(hits)
                }
            })
            .collect())
    }
}

/// Verifier whose right-logit is the number of evidence passages containing
/// the candidate, with a zero wrong-logit. The score depends only on the
/// candidate's own support count, so edits that preserve that count cannot
/// move it.
#[derive(Debug, Clone, Default)]
pub struct SupportCountVerifier {
    matcher: Matcher,
}

impl SupportCountVerifier {
    pub fn new(matcher: Matcher) -> Self {
        SupportCountVerifier { matcher }
    }
}

impl VerifierBackend for SupportCountVerifier {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Verifier, "support-count-verifier")
    }

    fn verify(&self, _question: &str, candidate: &str, passages: &[Passage]) -> Result<VerifierLogits> {
        let covering = passages
            .iter()
            .filter(|p| self.matcher.covers_text(&p.text, candidate))
            .count();
        VerifierLogits::new(covering as f64, 0.0)
    }
}

/// Verifier contrasting covering against non-covering evidence passages:
/// logits are (covering count, non-covering count).
#[derive(Debug, Clone, Default)]
pub struct SupportContrastVerifier {
    matcher: Matcher,
}

impl SupportContrastVerifier {
    pub fn new(matcher: Matcher) -> Self {
        SupportContrastVerifier { matcher }
    }
}

impl VerifierBackend for SupportContrastVerifier {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Verifier, "support-contrast-verifier")
    }

    fn verify(&self, _question: &str, candidate: &str, passages: &[Passage]) -> Result<VerifierLogits> {
        let covering = passages
            .iter()
            .filter(|p| self.matcher.covers_text(&p.text, candidate))
            .count();
        VerifierLogits::new(covering as f64, (passages.len() - covering) as f64)
    }
}

/// Verifier returning fixed logits regardless of input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantVerifier {
    pub logit_right: f64,
    pub logit_wrong: f64,
}

impl VerifierBackend for ConstantVerifier {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Verifier, "constant-verifier")
    }

    fn verify(&self, _question: &str, _candidate: &str, _passages: &[Passage]) -> Result<VerifierLogits> {
        VerifierLogits::new(self.logit_right, self.logit_wrong)
    }
}

fn cluster_support_counts(
    gold: &[AnswerCluster],
    passages: &[Passage],
    matcher: &Matcher,
) -> Vec<(usize, usize, Option<usize>)> {
    gold.iter()
        .enumerate()
        .map(|(ci, c)| {
            let count = passages.iter().filter(|p| matcher.covers(p, c)).count();
            let first = passages.iter().position(|p| matcher.covers(p, c));
            (ci, count, first)
        })
        .collect()
}

fn first_covered_form(
    cluster: &AnswerCluster,
    passages: &[Passage],
    matcher: &Matcher,
) -> Option<String> {
    cluster
        .forms
        .iter()
        .find(|f| passages.iter().any(|p| matcher.covers_text(&p.text, f)))
        .cloned()
}

/// Oracle reader with a fixed number of answer slots. Clusters present in
/// the input compete for slots by support count (ties by first appearance,
/// then cluster order); the reader emits one covered form per winning
/// cluster.
#[derive(Debug, Clone)]
pub struct SlotReader {
    gold: GoldMap,
    matcher: Matcher,
    pub slots: usize,
    pub separator: String,
}

impl SlotReader {
    pub fn new(gold: GoldMap, matcher: Matcher, slots: usize, separator: impl Into<String>) -> Self {
        SlotReader {
            gold,
            matcher,
            slots,
            separator: separator.into(),
        }
    }
}

impl ReaderBackend for SlotReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Reader, format!("slot-reader-{}", self.slots))
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let gold = self.gold.get(question)?;
        let mut counts: Vec<(usize, usize, Option<usize>)> =
            cluster_support_counts(gold, passages, &self.matcher)
                .into_iter()
                .filter(|(_, count, _)| *count >= 1)
                .collect();
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
        let picked: Vec<String> = counts
            .into_iter()
            .take(self.slots)
            .filter_map(|(ci, _, _)| first_covered_form(&gold[ci], passages, &self.matcher))
            .collect();
        Ok(picked.join(&format!(" {} ", self.separator)))
    }
}

/// Oracle reader that emits a cluster only when at least `min_supports` of
/// its supporting passages are present in the input.
#[derive(Debug, Clone)]
pub struct ThresholdReader {
    gold: GoldMap,
    matcher: Matcher,
    pub min_supports: usize,
    pub separator: String,
}

impl ThresholdReader {
    pub fn new(
        gold: GoldMap,
        matcher: Matcher,
        min_supports: usize,
        separator: impl Into<String>,
    ) -> Self {
        ThresholdReader {
            gold,
            matcher,
            min_supports,
            separator: separator.into(),
        }
    }
}

impl ReaderBackend for ThresholdReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(
            BackendKind::Reader,
            format!("threshold-reader-{}", self.min_supports),
        )
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let gold = self.gold.get(question)?;
        let picked: Vec<String> = cluster_support_counts(gold, passages, &self.matcher)
            .into_iter()
            .filter(|(_, count, _)| *count >= self.min_supports)
            .filter_map(|(ci, _, _)| first_covered_form(&gold[ci], passages, &self.matcher))
            .collect();
        Ok(picked.join(&format!(" {} ", self.separator)))
    }
}

/// Oracle reader with a fixed attention budget: it attends to at most
/// `budget` answer-supporting passages in input order, then emits every
/// cluster with at least `min_supports` attended supports. Redundant
/// supports of an easy answer crowd the supports of later ones out of the
/// budget.
#[derive(Debug, Clone)]
pub struct BudgetReader {
    gold: GoldMap,
    matcher: Matcher,
    pub budget: usize,
    pub min_supports: usize,
    pub separator: String,
}

impl BudgetReader {
    pub fn new(
        gold: GoldMap,
        matcher: Matcher,
        budget: usize,
        min_supports: usize,
        separator: impl Into<String>,
    ) -> Self {
        BudgetReader {
            gold,
            matcher,
            budget,
            min_supports: min_supports.max(1),
            separator: separator.into(),
        }
    }
}

impl ReaderBackend for BudgetReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(
            BackendKind::Reader,
            format!("budget-reader-{}-{}", self.budget, self.min_supports),
        )
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let gold = self.gold.get(question)?;
        let mut counts = vec![0usize; gold.len()];
        let mut attended: Vec<Passage> = Vec::new();
        for p in passages {
            if attended.len() >= self.budget {
                break;
            }
            let covered: Vec<usize> = gold
                .iter()
                .enumerate()
                .filter(|(_, c)| self.matcher.covers(p, c))
                .map(|(ci, _)| ci)
                .collect();
            if !covered.is_empty() {
                for ci in covered {
                    counts[ci] += 1;
                }
                attended.push(p.clone());
            }
        }
        let picked: Vec<String> = gold
            .iter()
            .enumerate()
            .filter(|(ci, _)| counts[*ci] >= self.min_supports)
            .filter_map(|(_, c)| first_covered_form(c, &attended, &self.matcher))
            .collect();
        Ok(picked.join(&format!(" {} ", self.separator)))
    }
}

/// Oracle reader that emits every gold cluster covered by its input.
#[derive(Debug, Clone)]
pub struct OracleReader {
    gold: GoldMap,
    matcher: Matcher,
    pub separator: String,
}

impl OracleReader {
    pub fn new(gold: GoldMap, matcher: Matcher, separator: impl Into<String>) -> Self {
        OracleReader {
            gold,
            matcher,
            separator: separator.into(),
        }
    }
}

impl ReaderBackend for OracleReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Reader, "gold-oracle-reader")
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let gold = self.gold.get(question)?;
        let picked: Vec<String> = gold
            .iter()
            .filter_map(|c| first_covered_form(c, passages, &self.matcher))
            .collect();
        Ok(picked.join(&format!(" {} ", self.separator)))
    }
}

/// Reader that ignores its input and returns a fixed string.
#[derive(Debug, Clone)]
pub struct ConstantReader {
    pub output: String,
}

impl ReaderBackend for ConstantReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Reader, "constant-reader")
    }

    fn read(&self, _question: &str, _passages: &[Passage]) -> Result<String> {
        Ok(self.output.clone())
    }
}

/// Model-free reader: separator-joined union of keyword matches per passage.
#[derive(Debug, Clone)]
pub struct KeywordReader {
    recaller: KeywordRecaller,
    pub separator: String,
}

impl KeywordReader {
    pub fn new(matcher: Matcher, separator: impl Into<String>) -> Self {
        KeywordReader {
            recaller: KeywordRecaller::new(matcher),
            separator: separator.into(),
        }
    }
}

impl ReaderBackend for KeywordReader {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata::new(BackendKind::Reader, "keyword-reader")
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let mut seen: Vec<String> = Vec::new();
        for p in passages {
            for m in self.recaller.matches_in(question, p) {
                if !seen.contains(&m) {
                    seen.push(m);
                }
            }
        }
        Ok(seen.join(&format!(" {} ", self.separator)))
    }
}
