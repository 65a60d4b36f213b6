//! Evidence analytics and adversarial ablation harnesses.
//!
//! The two attack harnesses probe how a model's predictions react when
//! supporting passages are swapped out of its input: the reader attack
//! removes supports of a predicted answer and checks whether a previously
//! missed answer surfaces; the verifier attack removes supports of *other*
//! answers from one candidate's evidence and records how far the candidate's
//! validity score moves.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write as IoWrite;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ReaderBackend, VerifierBackend};
use crate::error::{MaqaError, Result};
use crate::metrics::Matcher;
use crate::pipeline::{validity_score, Framework, RunReport};
use crate::retrieval::RankedList;
use crate::types::{
    AnswerCluster, Candidate, Corpus, Evidence, Passage, PipelineConfig, Question, truncate_tokens,
};

/// Why a question/candidate fails the attack-target preconditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetCheck {
    /// No gold cluster is covered by the model input yet missing from the
    /// predictions.
    NoMissedCoveredAnswer,
    /// Every predicted gold cluster has selected supports that also cover
    /// some other gold cluster, so nothing can be removed safely.
    NoIsolatedPredictedAnswer,
    /// The attacked candidate does not match any gold cluster.
    CandidateNotGold,
    /// The candidate's evidence contains no removable support of another
    /// gold answer.
    NoRemovableOtherSupport,
}

impl std::fmt::Display for TargetCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = match self {
            TargetCheck::NoMissedCoveredAnswer => {
                "no gold cluster is covered by the input but missed by the model"
            }
            TargetCheck::NoIsolatedPredictedAnswer => {
                "no predicted gold cluster has supports free of other gold answers"
            }
            TargetCheck::CandidateNotGold => "candidate does not match any gold cluster",
            TargetCheck::NoRemovableOtherSupport => {
                "evidence contains no support of another gold answer that misses the candidate"
            }
        };
        f.write_str(msg)
    }
}

/// One attack variant: which passages were swapped and what happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub question_id: String,
    pub target_answer: String,
    /// Passage ids removed from the model input, in input order.
    pub removed: Vec<u64>,
    /// Passage ids substituted at the removed positions, in the same order.
    pub replacements: Vec<u64>,
    pub outcome: AttackOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOutcome {
    Reader {
        recovered_clusters: Vec<usize>,
        recovered_forms: Vec<String>,
    },
    Verifier {
        score_before: f64,
        score_after: f64,
        delta: f64,
        crossed_tau: bool,
    },
}

impl AttackRecord {
    pub fn is_success(&self) -> bool {
        match &self.outcome {
            AttackOutcome::Reader { recovered_clusters, .. } => !recovered_clusters.is_empty(),
            AttackOutcome::Verifier { crossed_tau, .. } => *crossed_tau,
        }
    }
}

/// Write one record per line as JSON.
pub fn write_records_jsonl(w: &mut impl IoWrite, records: &[AttackRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)
            .map_err(|e| MaqaError::invalid(format!("serializing attack record: {e}")))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Subset enumeration bounds for the attack harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackOptions {
    /// Enumerate every non-empty subset when the removable count is at most
    /// this; otherwise sample.
    pub exhaustive_limit: usize,
    /// Number of sampled subsets in sampling mode.
    pub sample_count: usize,
    /// Seed for the sampling generator.
    pub seed: u64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            exhaustive_limit: 12,
            sample_count: 256,
            seed: 0,
        }
    }
}

/// Non-empty subsets of {0..n-1} as index lists. Exhaustive mode walks
/// bitmasks in ascending order; sampling mode draws each element with
/// probability 1/2, rejecting the empty draw.
fn enumerate_subsets(n: usize, options: &AttackOptions) -> (Vec<Vec<usize>>, bool) {
    if n <= options.exhaustive_limit {
        let subsets = (1u64..(1u64 << n))
            .map(|mask| (0..n).filter(|j| mask & (1 << j) != 0).collect())
            .collect();
        (subsets, true)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let subsets = (0..options.sample_count)
            .map(|_| loop {
                let picks: Vec<usize> = (0..n).filter(|_| rng.gen::<bool>()).collect();
                if !picks.is_empty() {
                    break picks;
                }
            })
            .collect();
        (subsets, false)
    }
}

fn split_predictions(raw: &str, separator: &str) -> Vec<String> {
    raw.split(separator)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Cluster indices matched by any prediction under normalized equality.
fn matched_clusters(predictions: &[String], gold: &[AnswerCluster], matcher: &Matcher) -> BTreeSet<usize> {
    let norms: HashSet<String> = predictions.iter().map(|p| matcher.normalize(p)).collect();
    gold.iter()
        .enumerate()
        .filter(|(_, c)| c.forms.iter().any(|f| norms.contains(&matcher.normalize(f))))
        .map(|(i, _)| i)
        .collect()
}

fn truncated_passage(p: &Passage, max_tokens: usize) -> Passage {
    let mut p = p.clone();
    p.text = truncate_tokens(&p.text, max_tokens);
    p
}

/// Mean position (0-based rank) statistic contrasting the supports of
/// recovered answers against the removed passages, over successful variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStat {
    pub recovered_support_mean_rank: f64,
    pub removed_mean_rank: f64,
}

/// Full outcome of attacking one question's reader run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderAttack {
    pub question_id: String,
    /// Index of the attacked (predicted) cluster.
    pub target_cluster: usize,
    /// Passage ids of the model input, in rank order.
    pub input_passages: Vec<u64>,
    /// Number of distinct gold clusters covered by the input.
    pub input_covered_clusters: usize,
    /// Clusters covered by the input but absent from baseline predictions.
    pub missed_covered_clusters: Vec<usize>,
    pub baseline_predictions: Vec<String>,
    pub records: Vec<AttackRecord>,
    pub successes: usize,
    /// Removed-id set of the first successful variant in canonical order.
    pub first_success_removed: Option<Vec<u64>>,
    /// Present when at least one variant succeeded.
    pub relevance: Option<RelevanceStat>,
    pub exhaustive: bool,
}

impl ReaderAttack {
    /// Re-check the protocol invariants of every record against the corpus:
    /// equal removed/replacement counts, replacements covering no gold, and
    /// removed passages supporting only the target cluster.
    pub fn check_bookkeeping(
        &self,
        corpus: &Corpus,
        gold: &[AnswerCluster],
        matcher: &Matcher,
    ) -> Result<()> {
        for rec in &self.records {
            if rec.removed.len() != rec.replacements.len() {
                return Err(MaqaError::invalid(format!(
                    "record removes {} but replaces {}",
                    rec.removed.len(),
                    rec.replacements.len()
                )));
            }
            for &pid in &rec.replacements {
                let p = corpus.require(pid)?;
                if gold.iter().any(|c| matcher.covers(p, c)) {
                    return Err(MaqaError::invalid(format!(
                        "replacement passage {pid} covers a gold cluster"
                    )));
                }
            }
            for &pid in &rec.removed {
                let p = corpus.require(pid)?;
                for (ci, c) in gold.iter().enumerate() {
                    if ci != self.target_cluster && matcher.covers(p, c) {
                        return Err(MaqaError::invalid(format!(
                            "removed passage {pid} supports protected cluster {ci}"
                        )));
                    }
                }
                if !matcher.covers(p, &gold[self.target_cluster]) {
                    return Err(MaqaError::invalid(format!(
                        "removed passage {pid} does not support the target cluster"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Attack a single-pass reader run. The reader's input is the top-k of the
/// reranked list; subsets of the target answer's supports are swapped for
/// the highest-ranked unused passages covering no gold answer, and the
/// reader is re-run to see whether a missed answer surfaces.
///
/// The target is the first predicted gold cluster whose input supports cover
/// no other gold cluster; an error identifies the failing precondition when
/// no target exists.
#[allow(clippy::too_many_arguments)]
pub fn attack_reader(
    question: &Question,
    reranked: &RankedList,
    corpus: &Corpus,
    reader: &dyn ReaderBackend,
    config: &PipelineConfig,
    matcher: &Matcher,
    options: &AttackOptions,
) -> Result<ReaderAttack> {
    if question.answers.is_empty() {
        return Err(MaqaError::EmptyGold);
    }
    let gold = &question.answers;
    let k = config.evidence_k.min(reranked.len());
    let input_entries = &reranked.entries[..k];
    let input: Vec<Passage> = input_entries
        .iter()
        .map(|e| corpus.require(e.passage_id).map(|p| truncated_passage(p, config.max_passage_tokens)))
        .collect::<Result<_>>()?;

    let baseline_raw = reader.read(&question.text, &input)?;
    let baseline_predictions = split_predictions(&baseline_raw, &config.reader_separator);
    let predicted = matched_clusters(&baseline_predictions, gold, matcher);

    let supports_in_input: Vec<Vec<u64>> = gold
        .iter()
        .map(|c| {
            input
                .iter()
                .filter(|p| matcher.covers(p, c))
                .map(|p| p.id)
                .collect()
        })
        .collect();
    let covered: BTreeSet<usize> = (0..gold.len())
        .filter(|&ci| !supports_in_input[ci].is_empty())
        .collect();
    let missed_covered: Vec<usize> = covered
        .iter()
        .copied()
        .filter(|ci| !predicted.contains(ci))
        .collect();
    if missed_covered.is_empty() {
        return Err(MaqaError::NotAttackTarget(TargetCheck::NoMissedCoveredAnswer));
    }

    let target_cluster = (0..gold.len())
        .find(|&ci| {
            predicted.contains(&ci)
                && !supports_in_input[ci].is_empty()
                && supports_in_input[ci].iter().all(|&pid| {
                    let p = corpus.get(pid).expect("input passage in corpus");
                    gold.iter()
                        .enumerate()
                        .all(|(cj, c)| cj == ci || !matcher.covers(p, c))
                })
        })
        .ok_or(MaqaError::NotAttackTarget(TargetCheck::NoIsolatedPredictedAnswer))?;
    // Input order, so subset bitmasks have a canonical meaning.
    let removable: Vec<u64> = supports_in_input[target_cluster].clone();

    let input_ids: HashSet<u64> = input.iter().map(|p| p.id).collect();
    let pool: Vec<u64> = reranked
        .entries
        .iter()
        .map(|e| e.passage_id)
        .filter(|pid| !input_ids.contains(pid))
        .filter(|&pid| {
            let p = corpus.get(pid);
            p.is_some_and(|p| gold.iter().all(|c| !matcher.covers(p, c)))
        })
        .collect();
    if pool.len() < removable.len() {
        return Err(MaqaError::ReplacementPoolExhausted {
            needed: removable.len(),
            available: pool.len(),
        });
    }

    let (subsets, exhaustive) = enumerate_subsets(removable.len(), options);
    let target_answer = gold[target_cluster].forms[0].clone();
    let mut records = Vec::with_capacity(subsets.len());
    for subset in &subsets {
        let removed: Vec<u64> = subset.iter().map(|&j| removable[j]).collect();
        let removed_set: HashSet<u64> = removed.iter().copied().collect();
        let replacements: Vec<u64> = pool[..removed.len()].to_vec();
        let mut next_replacement = replacements.iter();
        let variant: Vec<Passage> = input
            .iter()
            .map(|p| {
                if removed_set.contains(&p.id) {
                    let pid = *next_replacement.next().expect("replacement per removal");
                    corpus
                        .require(pid)
                        .map(|p| truncated_passage(p, config.max_passage_tokens))
                } else {
                    Ok(p.clone())
                }
            })
            .collect::<Result<_>>()?;
        let raw = reader.read(&question.text, &variant)?;
        let preds = split_predictions(&raw, &config.reader_separator);
        let now_matched = matched_clusters(&preds, gold, matcher);
        let recovered_clusters: Vec<usize> = missed_covered
            .iter()
            .copied()
            .filter(|ci| now_matched.contains(ci))
            .collect();
        let recovered_forms = recovered_clusters
            .iter()
            .map(|&ci| gold[ci].forms[0].clone())
            .collect();
        records.push(AttackRecord {
            question_id: question.id.clone(),
            target_answer: target_answer.clone(),
            removed,
            replacements,
            outcome: AttackOutcome::Reader {
                recovered_clusters,
                recovered_forms,
            },
        });
    }

    let successes = records.iter().filter(|r| r.is_success()).count();
    let first_success_removed = records
        .iter()
        .find(|r| r.is_success())
        .map(|r| r.removed.clone());
    let rank_of: BTreeMap<u64, usize> = reranked
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.passage_id, i))
        .collect();
    let relevance = if successes == 0 {
        None
    } else {
        let mut removed_ranks = Vec::new();
        let mut support_ranks = Vec::new();
        for rec in records.iter().filter(|r| r.is_success()) {
            removed_ranks.extend(rec.removed.iter().map(|pid| rank_of[pid] as f64));
            if let AttackOutcome::Reader { recovered_clusters, .. } = &rec.outcome {
                for &ci in recovered_clusters {
                    support_ranks
                        .extend(supports_in_input[ci].iter().map(|pid| rank_of[pid] as f64));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some(RelevanceStat {
            recovered_support_mean_rank: mean(&support_ranks),
            removed_mean_rank: mean(&removed_ranks),
        })
    };

    Ok(ReaderAttack {
        question_id: question.id.clone(),
        target_cluster,
        input_passages: input.iter().map(|p| p.id).collect(),
        input_covered_clusters: covered.len(),
        missed_covered_clusters: missed_covered,
        baseline_predictions,
        records,
        successes,
        first_success_removed,
        relevance,
        exhaustive,
    })
}

/// Success-rate cell of the reader-attack breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub targets: usize,
    pub with_success: usize,
    pub success_rate: f64,
}

/// Reader-attack aggregate across questions, broken down by the number of
/// gold clusters covered by the model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderAttackSummary {
    pub targets: usize,
    pub targets_with_success: usize,
    pub breakdown_by_covered_clusters: BTreeMap<usize, BreakdownCell>,
}

pub fn summarize_reader_attacks(attacks: &[ReaderAttack]) -> ReaderAttackSummary {
    let mut breakdown: BTreeMap<usize, BreakdownCell> = BTreeMap::new();
    for a in attacks {
        let cell = breakdown.entry(a.input_covered_clusters).or_default();
        cell.targets += 1;
        if a.successes > 0 {
            cell.with_success += 1;
        }
    }
    for cell in breakdown.values_mut() {
        cell.success_rate = cell.with_success as f64 / cell.targets as f64;
    }
    ReaderAttackSummary {
        targets: attacks.len(),
        targets_with_success: attacks.iter().filter(|a| a.successes > 0).count(),
        breakdown_by_covered_clusters: breakdown,
    }
}

/// Full outcome of attacking one candidate's verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierAttack {
    pub question_id: String,
    pub candidate: String,
    /// Gold cluster the candidate matches.
    pub candidate_cluster: usize,
    pub baseline_score: f64,
    /// Evidence passages eligible for removal, in evidence order.
    pub removable: Vec<u64>,
    pub records: Vec<AttackRecord>,
    pub max_delta: f64,
    pub min_delta: f64,
    /// Whether any variant moved the score across the threshold.
    pub flipped: bool,
    pub exhaustive: bool,
}

impl VerifierAttack {
    /// Re-check protocol invariants: equal counts, replacements covering no
    /// gold, and no removed passage covering the attacked candidate.
    pub fn check_bookkeeping(
        &self,
        corpus: &Corpus,
        gold: &[AnswerCluster],
        candidate_text: &str,
        matcher: &Matcher,
    ) -> Result<()> {
        for rec in &self.records {
            if rec.removed.len() != rec.replacements.len() {
                return Err(MaqaError::invalid(format!(
                    "record removes {} but replaces {}",
                    rec.removed.len(),
                    rec.replacements.len()
                )));
            }
            for &pid in &rec.replacements {
                let p = corpus.require(pid)?;
                if gold.iter().any(|c| matcher.covers(p, c)) {
                    return Err(MaqaError::invalid(format!(
                        "replacement passage {pid} covers a gold cluster"
                    )));
                }
            }
            for &pid in &rec.removed {
                let p = corpus.require(pid)?;
                if matcher.covers_text(&p.text, candidate_text) {
                    return Err(MaqaError::invalid(format!(
                        "removed passage {pid} supports the attacked candidate"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Attack one candidate's evidence: remove subsets of other answers'
/// supports from it (never a passage containing the candidate), substitute
/// the highest-ranked retrieved passages covering no gold answer, re-score,
/// and record the worst score movements in both directions.
#[allow(clippy::too_many_arguments)]
pub fn attack_verifier(
    question: &Question,
    candidate: &Candidate,
    evidence: &Evidence,
    retrieved: &RankedList,
    corpus: &Corpus,
    verifier: &dyn VerifierBackend,
    config: &PipelineConfig,
    matcher: &Matcher,
    options: &AttackOptions,
) -> Result<VerifierAttack> {
    if question.answers.is_empty() {
        return Err(MaqaError::EmptyGold);
    }
    let gold = &question.answers;
    let cand_norm = matcher.normalize(&candidate.text);
    let candidate_cluster = gold
        .iter()
        .position(|c| c.forms.iter().any(|f| matcher.normalize(f) == cand_norm))
        .ok_or(MaqaError::NotAttackTarget(TargetCheck::CandidateNotGold))?;

    let ev_input: Vec<Passage> = evidence
        .passages
        .iter()
        .map(|&pid| corpus.require(pid).map(|p| truncated_passage(p, config.max_passage_tokens)))
        .collect::<Result<_>>()?;

    // Evidence order; a passage is removable when it supports some other
    // gold answer and does not contain the candidate.
    let removable: Vec<u64> = ev_input
        .iter()
        .filter(|p| {
            !matcher.covers_text(&p.text, &candidate.text)
                && gold
                    .iter()
                    .enumerate()
                    .any(|(cj, c)| cj != candidate_cluster && matcher.covers(p, c))
        })
        .map(|p| p.id)
        .collect();
    if removable.is_empty() {
        return Err(MaqaError::NotAttackTarget(TargetCheck::NoRemovableOtherSupport));
    }

    let ev_ids: HashSet<u64> = evidence.passages.iter().copied().collect();
    let pool: Vec<u64> = retrieved
        .entries
        .iter()
        .map(|e| e.passage_id)
        .filter(|pid| !ev_ids.contains(pid))
        .filter(|&pid| {
            let p = corpus.get(pid);
            p.is_some_and(|p| gold.iter().all(|c| !matcher.covers(p, c)))
        })
        .collect();
    if pool.len() < removable.len() {
        return Err(MaqaError::ReplacementPoolExhausted {
            needed: removable.len(),
            available: pool.len(),
        });
    }

    let baseline_score =
        validity_score(verifier.verify(&question.text, &candidate.text, &ev_input)?)?;
    let baseline_valid = baseline_score >= config.tau;

    let (subsets, exhaustive) = enumerate_subsets(removable.len(), options);
    let mut records = Vec::with_capacity(subsets.len());
    let mut max_delta = f64::NEG_INFINITY;
    let mut min_delta = f64::INFINITY;
    let mut flipped = false;
    for subset in &subsets {
        let removed: Vec<u64> = subset.iter().map(|&j| removable[j]).collect();
        let removed_set: HashSet<u64> = removed.iter().copied().collect();
        let replacements: Vec<u64> = pool[..removed.len()].to_vec();
        let mut next_replacement = replacements.iter();
        let variant: Vec<Passage> = ev_input
            .iter()
            .map(|p| {
                if removed_set.contains(&p.id) {
                    let pid = *next_replacement.next().expect("replacement per removal");
                    corpus
                        .require(pid)
                        .map(|p| truncated_passage(p, config.max_passage_tokens))
                } else {
                    Ok(p.clone())
                }
            })
            .collect::<Result<_>>()?;
        let score = validity_score(verifier.verify(&question.text, &candidate.text, &variant)?)?;
        let delta = score - baseline_score;
        let crossed_tau = (score >= config.tau) != baseline_valid;
        max_delta = max_delta.max(delta);
        min_delta = min_delta.min(delta);
        flipped |= crossed_tau;
        records.push(AttackRecord {
            question_id: question.id.clone(),
            target_answer: candidate.text.clone(),
            removed,
            replacements,
            outcome: AttackOutcome::Verifier {
                score_before: baseline_score,
                score_after: score,
                delta,
                crossed_tau,
            },
        });
    }

    Ok(VerifierAttack {
        question_id: question.id.clone(),
        candidate: candidate.text.clone(),
        candidate_cluster,
        baseline_score,
        removable,
        records,
        max_delta,
        min_delta,
        flipped,
        exhaustive,
    })
}

/// Verifier-attack aggregate across candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierAttackSummary {
    pub targets: usize,
    pub flipped: usize,
    pub mean_max_delta: f64,
    pub mean_min_delta: f64,
    /// Full-scale reference for orientation: in the large-scale experiments
    /// this harness mirrors, 13.0% of missed and 3.4% of predicted gold
    /// candidates crossed the threshold. Desk-scale fixtures are not
    /// expected to reproduce those rates.
    pub reference_note: String,
}

pub fn summarize_verifier_attacks(attacks: &[VerifierAttack]) -> VerifierAttackSummary {
    let n = attacks.len().max(1) as f64;
    VerifierAttackSummary {
        targets: attacks.len(),
        flipped: attacks.iter().filter(|a| a.flipped).count(),
        mean_max_delta: attacks.iter().map(|a| a.max_delta).sum::<f64>() / n,
        mean_min_delta: attacks.iter().map(|a| a.min_delta).sum::<f64>() / n,
        reference_note: "full-scale reference flip rates: 13.0% (missed) / 3.4% (predicted)"
            .to_string(),
    }
}

/// Per-question inputs for the selected-support analytics: the passages the
/// final model actually consumed, and the emitted predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSelection {
    pub question: Question,
    pub selected: Vec<Passage>,
    pub predictions: Vec<String>,
}

impl QuestionSelection {
    /// Derive the selection from a run report: the reader input for the
    /// single-pass baseline, or the union of per-candidate evidence for the
    /// recall-then-verify pipeline (first-occurrence order).
    pub fn from_report(question: &Question, report: &RunReport, corpus: &Corpus) -> Result<Self> {
        let mut ids: Vec<u64> = Vec::new();
        match report.framework {
            Framework::RerankThenRead => ids.extend(&report.reader_input),
            Framework::RecallThenVerify => {
                let mut seen = HashSet::new();
                for ev in &report.evidences {
                    for &pid in &ev.passages {
                        if seen.insert(pid) {
                            ids.push(pid);
                        }
                    }
                }
            }
        }
        let selected = ids
            .iter()
            .map(|&pid| corpus.require(pid).cloned())
            .collect::<Result<_>>()?;
        Ok(QuestionSelection {
            question: question.clone(),
            selected,
            predictions: report.predictions.clone(),
        })
    }
}

/// Histogram of selected-support counts for one answer class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramSide {
    /// Support count -> number of clusters with that count.
    pub histogram: BTreeMap<usize, usize>,
    pub clusters: usize,
    pub mean: Option<f64>,
}

impl HistogramSide {
    fn add(&mut self, count: usize) {
        *self.histogram.entry(count).or_insert(0) += 1;
        self.clusters += 1;
    }

    fn finish(&mut self) {
        if self.clusters > 0 {
            let total: usize = self.histogram.iter().map(|(c, n)| c * n).sum();
            self.mean = Some(total as f64 / self.clusters as f64);
        }
    }
}

/// Selected-support distribution over gold clusters, split by whether the
/// cluster was predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportDistribution {
    pub predicted: HistogramSide,
    pub missed: HistogramSide,
    /// Full-scale reference for orientation: predicted answers averaged
    /// 5.08 selected supports against 3.13 for missed answers in the
    /// large-scale runs this analysis mirrors.
    pub reference_note: String,
}

/// Count, per gold cluster, how many of the selected passages support it,
/// bucketed by predicted vs missed.
pub fn support_distribution(items: &[QuestionSelection], matcher: &Matcher) -> SupportDistribution {
    let mut predicted = HistogramSide::default();
    let mut missed = HistogramSide::default();
    for item in items {
        let matched = matched_clusters(&item.predictions, &item.question.answers, matcher);
        for (ci, cluster) in item.question.answers.iter().enumerate() {
            let count = item
                .selected
                .iter()
                .filter(|p| matcher.covers(p, cluster))
                .count();
            if matched.contains(&ci) {
                predicted.add(count);
            } else {
                missed.add(count);
            }
        }
    }
    predicted.finish();
    missed.finish();
    SupportDistribution {
        predicted,
        missed,
        reference_note:
            "full-scale reference means: 5.08 supports (predicted) vs 3.13 (missed)".to_string(),
    }
}

/// Support usage of one gold cluster: which retrieved supports ended up in
/// the passages the model consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterUsage {
    pub question_id: String,
    pub cluster_index: usize,
    pub predicted: bool,
    pub retrieved_supports: Vec<u64>,
    pub used_supports: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageRatio {
    pub cluster_index: usize,
    pub predicted: bool,
    pub ratio: f64,
    pub retrieved: usize,
    pub used: usize,
}

/// Usage ratios aggregated by answer class. Clusters with no retrieved
/// support are excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceUsage {
    pub ratios: Vec<UsageRatio>,
    pub predicted_mean: Option<f64>,
    pub missed_mean: Option<f64>,
    pub excluded_zero_retrieved: usize,
}

/// Ratio |used| / |retrieved| per cluster, with means over the predicted
/// and missed classes. Errors when a cluster's used set is not contained in
/// its retrieved set.
pub fn evidence_usage(items: &[ClusterUsage]) -> Result<EvidenceUsage> {
    let mut ratios = Vec::new();
    let mut excluded = 0usize;
    for item in items {
        let retrieved: HashSet<u64> = item.retrieved_supports.iter().copied().collect();
        for pid in &item.used_supports {
            if !retrieved.contains(pid) {
                return Err(MaqaError::invalid(format!(
                    "question {}: used support {pid} of cluster {} was never retrieved",
                    item.question_id, item.cluster_index
                )));
            }
        }
        if retrieved.is_empty() {
            excluded += 1;
            continue;
        }
        let used: HashSet<u64> = item.used_supports.iter().copied().collect();
        ratios.push(UsageRatio {
            cluster_index: item.cluster_index,
            predicted: item.predicted,
            ratio: used.len() as f64 / retrieved.len() as f64,
            retrieved: retrieved.len(),
            used: used.len(),
        });
    }
    let mean_of = |pred: bool| {
        let vals: Vec<f64> = ratios
            .iter()
            .filter(|r| r.predicted == pred)
            .map(|r| r.ratio)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(EvidenceUsage {
        predicted_mean: mean_of(true),
        missed_mean: mean_of(false),
        ratios,
        excluded_zero_retrieved: excluded,
    })
}

/// Build per-cluster usage entries from one run report. Retrieved supports
/// come from the retrieval list; used supports are the consumed passages
/// supporting the cluster (reader input, or the union of evidence of the
/// candidates matching the cluster).
pub fn cluster_usage_from_report(
    question: &Question,
    report: &RunReport,
    corpus: &Corpus,
    matcher: &Matcher,
) -> Result<Vec<ClusterUsage>> {
    let matched = matched_clusters(&report.predictions, &question.answers, matcher);
    let mut out = Vec::with_capacity(question.answers.len());
    for (ci, cluster) in question.answers.iter().enumerate() {
        let retrieved_supports: Vec<u64> = report
            .retrieved
            .entries
            .iter()
            .filter(|e| {
                corpus
                    .get(e.passage_id)
                    .is_some_and(|p| matcher.covers(p, cluster))
            })
            .map(|e| e.passage_id)
            .collect();
        let mut used: Vec<u64> = Vec::new();
        match report.framework {
            Framework::RerankThenRead => {
                for &pid in &report.reader_input {
                    if corpus.get(pid).is_some_and(|p| matcher.covers(p, cluster)) {
                        used.push(pid);
                    }
                }
            }
            Framework::RecallThenVerify => {
                let cluster_norms: HashSet<String> =
                    cluster.forms.iter().map(|f| matcher.normalize(f)).collect();
                if let Some(cands) = &report.candidates {
                    for (i, cand) in cands.candidates.iter().enumerate() {
                        if !cluster_norms.contains(&cand.normalized) {
                            continue;
                        }
                        if let Some(ev) = report.evidences.iter().find(|e| e.candidate_index == i) {
                            for &pid in &ev.passages {
                                if corpus.get(pid).is_some_and(|p| matcher.covers(p, cluster)) {
                                    used.push(pid);
                                }
                            }
                        }
                    }
                }
                used.sort_unstable();
                used.dedup();
            }
        }
        out.push(ClusterUsage {
            question_id: question.id.clone(),
            cluster_index: ci,
            predicted: matched.contains(&ci),
            retrieved_supports,
            used_supports: used,
        });
    }
    Ok(out)
}
