//! Answer normalization, coverage predicates, MRecall@k, multi-answer F1 and
//! dataset-level aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};
use crate::types::{AnswerCluster, MatchStrategy, Passage, Question};

/// Normalization convention applied before any string comparison. The
/// default mirrors the common reading-comprehension evaluation convention:
/// lowercase, delete ASCII punctuation, drop article tokens, collapse
/// whitespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeOptions {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_articles: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            lowercase: true,
            strip_punctuation: true,
            strip_articles: true,
        }
    }
}

/// Canonical normalization: lowercase, delete ASCII punctuation, drop
/// `a`/`an`/`the` tokens, collapse whitespace. Idempotent.
pub fn normalize(text: &str) -> String {
    normalize_with(text, &NormalizeOptions::default())
}

pub fn normalize_with(text: &str, opts: &NormalizeOptions) -> String {
    let lowered = if opts.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let depunct: String = if opts.strip_punctuation {
        lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect()
    } else {
        lowered
    };
    let keep = |tok: &&str| !(opts.strip_articles && matches!(*tok, "a" | "an" | "the"));
    depunct
        .split_whitespace()
        .filter(keep)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores produced by matching a prediction list against gold clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of (prediction, cluster) pairs in the one-to-one matching.
    pub matches: usize,
}

/// Bundles the normalization convention and matching strategy so every
/// comparison in a run uses the same rules.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Matcher {
    pub options: NormalizeOptions,
    pub strategy: MatchStrategy,
}

impl Matcher {
    pub fn new(options: NormalizeOptions, strategy: MatchStrategy) -> Self {
        Matcher { options, strategy }
    }

    pub fn normalize(&self, text: &str) -> String {
        normalize_with(text, &self.options)
    }

    /// True iff the normalized needle is a non-empty substring of the
    /// normalized haystack.
    pub fn covers_text(&self, passage_text: &str, needle: &str) -> bool {
        let n = self.normalize(needle);
        !n.is_empty() && self.normalize(passage_text).contains(&n)
    }

    /// True iff the passage text contains any form of the cluster.
    pub fn covers(&self, passage: &Passage, cluster: &AnswerCluster) -> bool {
        cluster.forms.iter().any(|f| self.covers_text(&passage.text, f))
    }

    /// Indices of clusters covered by at least one of the given passages.
    pub fn covered_clusters(&self, passages: &[Passage], gold: &[AnswerCluster]) -> BTreeSet<usize> {
        gold.iter()
            .enumerate()
            .filter(|(_, c)| passages.iter().any(|p| self.covers(p, c)))
            .map(|(i, _)| i)
            .collect()
    }

    /// True iff the first min(k, |ranked|) passages collectively cover at
    /// least min(k, |gold|) distinct clusters.
    pub fn mrecall_at_k(&self, ranked: &[Passage], gold: &[AnswerCluster], k: usize) -> Result<bool> {
        if k == 0 {
            return Err(MaqaError::invalid("mrecall k must be at least 1"));
        }
        if gold.is_empty() {
            return Err(MaqaError::EmptyGold);
        }
        let top = &ranked[..k.min(ranked.len())];
        let covered = self.covered_clusters(top, gold).len();
        Ok(covered >= k.min(gold.len()))
    }

    /// Size of the one-to-one matching between predictions and clusters. A
    /// prediction matches a cluster when its normalized form equals any
    /// normalized form of the cluster; each side is used at most once.
    pub fn match_count(&self, predictions: &[String], gold: &[AnswerCluster]) -> usize {
        let preds: Vec<String> = predictions.iter().map(|p| self.normalize(p)).collect();
        let clusters: Vec<BTreeSet<String>> = gold
            .iter()
            .map(|c| c.forms.iter().map(|f| self.normalize(f)).collect())
            .collect();
        match self.strategy {
            MatchStrategy::Greedy => greedy_match(&preds, &clusters),
            MatchStrategy::Optimal => maximum_match(&preds, &clusters),
        }
    }

    /// Precision / recall / F1 of predictions against gold clusters.
    pub fn multi_answer_f1(&self, predictions: &[String], gold: &[AnswerCluster]) -> Result<MatchScores> {
        if gold.is_empty() {
            return Err(MaqaError::EmptyGold);
        }
        let matches = self.match_count(predictions, gold);
        let precision = if predictions.is_empty() {
            0.0
        } else {
            matches as f64 / predictions.len() as f64
        };
        let recall = matches as f64 / gold.len() as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(MatchScores {
            precision,
            recall,
            f1,
            matches,
        })
    }

    /// Macro-averaged evaluation over a dataset. `predictions` must carry
    /// exactly the question ids of `questions`; `ranked` likewise when any
    /// MRecall cutoff is requested in `ks`.
    pub fn evaluate_dataset(
        &self,
        questions: &[Question],
        predictions: &[(String, Vec<String>)],
        ranked: &[(String, Vec<Passage>)],
        ks: &[usize],
    ) -> Result<EvalResult> {
        if questions.is_empty() {
            return Err(MaqaError::invalid("cannot evaluate an empty dataset"));
        }
        let mut gold_ids = HashSet::new();
        for q in questions {
            if !gold_ids.insert(q.id.as_str()) {
                return Err(MaqaError::DuplicateId { id: q.id.clone() });
            }
            if q.answers.is_empty() {
                return Err(MaqaError::invalid(format!(
                    "question {} has no gold answers; cannot evaluate",
                    q.id
                )));
            }
        }
        let pred_map = align("prediction", &gold_ids, predictions)?;
        let ranked_map = if ks.is_empty() {
            HashMap::new()
        } else {
            align("ranked-passages", &gold_ids, ranked)?
        };

        let mut per_question = Vec::with_capacity(questions.len());
        for q in questions {
            let preds: &[String] = pred_map.get(q.id.as_str()).map_or(&[], |v| v.as_slice());
            let scores = self.multi_answer_f1(preds, &q.answers)?;
            let mut mrecall = BTreeMap::new();
            if !ks.is_empty() {
                let ranked_passages = ranked_map
                    .get(q.id.as_str())
                    .map_or(&[] as &[Passage], |v| v.as_slice());
                for &k in ks {
                    mrecall.insert(k, self.mrecall_at_k(ranked_passages, &q.answers, k)?);
                }
            }
            per_question.push(QuestionEval {
                id: q.id.clone(),
                precision: scores.precision,
                recall: scores.recall,
                f1: scores.f1,
                matches: scores.matches,
                gold_clusters: q.answers.len(),
                predictions: preds.len(),
                multi_answer: q.is_multi_answer(),
                mrecall,
            });
        }
        Ok(EvalResult::from_per_question(per_question, ks))
    }
}

/// First-fit matching over canonically ordered predictions and clusters.
/// Sorting both sides by normalized content makes the result independent of
/// input order.
fn greedy_match(preds: &[String], clusters: &[BTreeSet<String>]) -> usize {
    let mut pred_order: Vec<usize> = (0..preds.len()).collect();
    pred_order.sort_by(|&a, &b| preds[a].cmp(&preds[b]).then(a.cmp(&b)));
    let mut cluster_order: Vec<usize> = (0..clusters.len()).collect();
    cluster_order.sort_by(|&a, &b| clusters[a].cmp(&clusters[b]).then(a.cmp(&b)));

    let mut used = vec![false; clusters.len()];
    let mut matches = 0;
    for &pi in &pred_order {
        let p = &preds[pi];
        if p.is_empty() {
            continue;
        }
        for &ci in &cluster_order {
            if !used[ci] && clusters[ci].contains(p) {
                used[ci] = true;
                matches += 1;
                break;
            }
        }
    }
    matches
}

/// Maximum bipartite matching via augmenting paths (Kuhn's algorithm).
fn maximum_match(preds: &[String], clusters: &[BTreeSet<String>]) -> usize {
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            if p.is_empty() {
                Vec::new()
            } else {
                clusters
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.contains(p))
                    .map(|(i, _)| i)
                    .collect()
            }
        })
        .collect();
    let mut match_of: Vec<Option<usize>> = vec![None; clusters.len()];
    let mut matches = 0;
    for p in 0..preds.len() {
        let mut visited = vec![false; clusters.len()];
        if augment(p, &adj, &mut visited, &mut match_of) {
            matches += 1;
        }
    }
    matches
}

fn augment(p: usize, adj: &[Vec<usize>], visited: &mut [bool], match_of: &mut [Option<usize>]) -> bool {
    for &c in &adj[p] {
        if visited[c] {
            continue;
        }
        visited[c] = true;
        if match_of[c].is_none() || augment(match_of[c].unwrap(), adj, visited, match_of) {
            match_of[c] = Some(p);
            return true;
        }
    }
    false
}

fn align<'a, T>(
    what: &str,
    gold_ids: &HashSet<&str>,
    entries: &'a [(String, T)],
) -> Result<HashMap<&'a str, &'a T>> {
    let mut map = HashMap::with_capacity(entries.len());
    for (id, v) in entries {
        if map.insert(id.as_str(), v).is_some() {
            return Err(MaqaError::DuplicateId {
                id: format!("{id} ({what})"),
            });
        }
    }
    let missing: Vec<String> = gold_ids
        .iter()
        .filter(|id| !map.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    let extra: Vec<String> = map
        .keys()
        .filter(|id| !gold_ids.contains(**id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut missing = missing;
        let mut extra = extra;
        missing.sort();
        extra.sort();
        return Err(MaqaError::IdMismatch { missing, extra });
    }
    Ok(map)
}

/// Per-question evaluation detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEval {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub gold_clusters: usize,
    pub predictions: usize,
    pub multi_answer: bool,
    /// MRecall@k outcome per requested cutoff.
    pub mrecall: BTreeMap<usize, bool>,
}

/// MRecall rate at one cutoff, over all questions and over the multi-answer
/// subset (absent when the subset is empty).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MRecallRate {
    pub rate_all: f64,
    pub rate_multi: Option<f64>,
}

/// Macro-averaged dataset evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub questions: usize,
    pub multi_questions: usize,
    pub f1_all: f64,
    /// Absent when the dataset has no multi-answer question.
    pub f1_multi: Option<f64>,
    pub precision_all: f64,
    pub recall_all: f64,
    pub mrecall: BTreeMap<usize, MRecallRate>,
    /// Total distinct gold clusters matched across the dataset.
    pub hits: usize,
    pub per_question: Vec<QuestionEval>,
}

impl EvalResult {
    pub fn from_per_question(per_question: Vec<QuestionEval>, ks: &[usize]) -> EvalResult {
        let n = per_question.len();
        let multi: Vec<&QuestionEval> = per_question.iter().filter(|q| q.multi_answer).collect();
        let mean = |f: &dyn Fn(&QuestionEval) -> f64, qs: &[&QuestionEval]| {
            qs.iter().map(|q| f(q)).sum::<f64>() / qs.len() as f64
        };
        let all: Vec<&QuestionEval> = per_question.iter().collect();
        let mut mrecall = BTreeMap::new();
        for &k in ks {
            let rate = |qs: &[&QuestionEval]| {
                qs.iter().filter(|q| q.mrecall.get(&k) == Some(&true)).count() as f64 / qs.len() as f64
            };
            mrecall.insert(
                k,
                MRecallRate {
                    rate_all: rate(&all),
                    rate_multi: if multi.is_empty() { None } else { Some(rate(&multi)) },
                },
            );
        }
        EvalResult {
            questions: n,
            multi_questions: multi.len(),
            f1_all: mean(&|q| q.f1, &all),
            f1_multi: if multi.is_empty() {
                None
            } else {
                Some(mean(&|q| q.f1, &multi))
            },
            precision_all: mean(&|q| q.precision, &all),
            recall_all: mean(&|q| q.recall, &all),
            mrecall,
            hits: per_question.iter().map(|q| q.matches).sum(),
            per_question,
        }
    }
}

/// Convenience wrappers using the canonical normalization and the default
/// (greedy) matching strategy.
pub fn covers(passage: &Passage, cluster: &AnswerCluster) -> bool {
    Matcher::default().covers(passage, cluster)
}

pub fn mrecall_at_k(ranked: &[Passage], gold: &[AnswerCluster], k: usize) -> Result<bool> {
    Matcher::default().mrecall_at_k(ranked, gold, k)
}

pub fn multi_answer_f1(predictions: &[String], gold: &[AnswerCluster]) -> Result<MatchScores> {
    Matcher::default().multi_answer_f1(predictions, gold)
}

pub fn evaluate_dataset(
    questions: &[Question],
    predictions: &[(String, Vec<String>)],
    ranked: &[(String, Vec<Passage>)],
    ks: &[usize],
) -> Result<EvalResult> {
    Matcher::default().evaluate_dataset(questions, predictions, ranked, ks)
}
