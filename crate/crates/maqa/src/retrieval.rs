//! Embedding store, exact dense top-k retrieval, gold-aware passage
//! reranking and per-candidate evidence aggregation.

use std::collections::HashMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};
use crate::metrics::Matcher;
use crate::types::{AnswerCluster, Candidate, Corpus, Evidence, Similarity};

const STORE_MAGIC: &[u8; 8] = b"MAQAEMB1";

/// Dense vectors keyed by passage id. Read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    by_id: HashMap<u64, usize>,
}

impl EmbeddingStore {
    pub fn from_entries(dim: usize, entries: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(MaqaError::invalid("embedding dim must be at least 1"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut by_id = HashMap::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(MaqaError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if by_id.insert(id, ids.len()).is_some() {
                return Err(MaqaError::DuplicateId { id: id.to_string() });
            }
            ids.push(id);
            vectors.extend_from_slice(&v);
        }
        Ok(EmbeddingStore {
            dim,
            ids,
            vectors,
            by_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.by_id
            .get(&id)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn require_vector(&self, id: u64) -> Result<&[f32]> {
        self.vector(id).ok_or(MaqaError::UnknownPassage(id))
    }

    /// Check that every passage of the corpus has a vector.
    pub fn validate_covers(&self, corpus: &Corpus) -> Result<()> {
        for p in corpus.passages() {
            if !self.by_id.contains_key(&p.id) {
                return Err(MaqaError::UnknownPassage(p.id));
            }
        }
        Ok(())
    }

    /// Serialize: magic `MAQAEMB1`, dim as u32 LE, count as u64 LE, then per
    /// record the passage id as u64 LE followed by dim f32 LE values.
    pub fn write_to(&self, w: &mut impl IoWrite) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for (i, &id) in self.ids.iter().enumerate() {
            w.write_u64::<LittleEndian>(id)?;
            for &x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl IoRead, origin: &str) -> Result<Self> {
        let corrupt = |message: String| MaqaError::Corrupt {
            path: origin.to_string(),
            message,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| corrupt(format!("missing header: {e}")))?;
        if &magic != STORE_MAGIC {
            return Err(corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(STORE_MAGIC)
            )));
        }
        let dim = r
            .read_u32::<LittleEndian>()
            .map_err(|e| corrupt(format!("missing dim: {e}")))? as usize;
        if dim == 0 {
            return Err(corrupt("dim must be at least 1".to_string()));
        }
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|e| corrupt(format!("missing count: {e}")))? as usize;
        let mut entries = Vec::with_capacity(count);
        for rec in 0..count {
            let id = r
                .read_u64::<LittleEndian>()
                .map_err(|e| corrupt(format!("record {rec}: missing id: {e}")))?;
            let mut v = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut v)
                .map_err(|e| corrupt(format!("record {rec}: truncated vector: {e}")))?;
            entries.push((id, v));
        }
        EmbeddingStore::from_entries(dim, entries).map_err(|e| match e {
            MaqaError::DuplicateId { id } => corrupt(format!("duplicate passage id {id}")),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, &path.display().to_string())
    }
}

/// One scored entry of a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: u64,
    pub score: f32,
}

/// An ordered scored passage list. Construction sites guarantee distinct ids
/// and the ordering of the comparator that produced the list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn new(entries: Vec<RankedEntry>) -> Self {
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.passage_id)
    }

    /// Clone the referenced passages in rank order, stamping each with its
    /// retrieval score.
    pub fn materialize(&self, corpus: &Corpus) -> Result<Vec<crate::types::Passage>> {
        self.entries
            .iter()
            .map(|e| {
                corpus.require(e.passage_id).map(|p| {
                    let mut p = p.clone();
                    p.retrieval_score = Some(e.score);
                    p
                })
            })
            .collect()
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn similarity_score(a: &[f32], b: &[f32], similarity: Similarity) -> f32 {
    match similarity {
        Similarity::Dot => dot(a, b),
        Similarity::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot(a, b) / (na * nb)
            }
        }
    }
}

fn by_score_then_id(a: &RankedEntry, b: &RankedEntry) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.passage_id.cmp(&b.passage_id))
}

/// Exact brute-force top-`size` dot-product retrieval, descending score,
/// ties broken by ascending passage id. `size` is clamped to the store size.
pub fn retrieve(question_vector: &[f32], store: &EmbeddingStore, size: usize) -> Result<RankedList> {
    if size == 0 {
        return Err(MaqaError::invalid("retrieval size must be at least 1"));
    }
    if question_vector.len() != store.dim() {
        return Err(MaqaError::DimensionMismatch {
            expected: store.dim(),
            actual: question_vector.len(),
        });
    }
    let mut scored: Vec<RankedEntry> = store
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| RankedEntry {
            passage_id: id,
            score: dot(&store.vectors[i * store.dim..(i + 1) * store.dim], question_vector),
        })
        .collect();
    let k = size.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_id);
    }
    scored.truncate(k);
    scored.sort_unstable_by(by_score_then_id);
    Ok(RankedList::new(scored))
}

/// Retrieve for many questions in parallel; output order matches input and
/// equals question-by-question sequential retrieval.
pub fn retrieve_batch(
    question_vectors: &[Vec<f32>],
    store: &EmbeddingStore,
    size: usize,
) -> Result<Vec<RankedList>> {
    question_vectors
        .par_iter()
        .map(|q| retrieve(q, store, size))
        .collect()
}

/// Reorder a retrieved list with gold knowledge: passages covering any gold
/// cluster first, then by retrieval score descending, then by ascending id.
pub fn opr_rank(
    retrieved: &RankedList,
    gold: &[AnswerCluster],
    corpus: &Corpus,
    matcher: &Matcher,
) -> Result<RankedList> {
    if retrieved.is_empty() {
        return Err(MaqaError::invalid("cannot rerank an empty retrieved list"));
    }
    if gold.is_empty() {
        return Err(MaqaError::EmptyGold);
    }
    let mut keyed: Vec<(bool, RankedEntry)> = Vec::with_capacity(retrieved.len());
    for e in &retrieved.entries {
        let p = corpus.require(e.passage_id)?;
        let covers_any = gold.iter().any(|c| matcher.covers(p, c));
        keyed.push((covers_any, *e));
    }
    keyed.sort_by(|(ca, ea), (cb, eb)| cb.cmp(ca).then(by_score_then_id(ea, eb)));
    Ok(RankedList::new(keyed.into_iter().map(|(_, e)| e).collect()))
}

/// Select the top-k evidence passages for one candidate: passages containing
/// the candidate first, then by similarity between the passage vector and the
/// question-candidate vector, then by ascending id.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_evidence(
    candidate: &Candidate,
    candidate_index: usize,
    qc_vector: &[f32],
    retrieved: &RankedList,
    corpus: &Corpus,
    store: &EmbeddingStore,
    k: usize,
    similarity: Similarity,
    matcher: &Matcher,
) -> Result<Evidence> {
    if k == 0 {
        return Err(MaqaError::invalid("evidence k must be at least 1"));
    }
    if qc_vector.len() != store.dim() {
        return Err(MaqaError::DimensionMismatch {
            expected: store.dim(),
            actual: qc_vector.len(),
        });
    }
    let mut keyed: Vec<(bool, RankedEntry)> = Vec::with_capacity(retrieved.len());
    for e in &retrieved.entries {
        let p = corpus.require(e.passage_id)?;
        let covers = matcher.covers_text(&p.text, &candidate.text);
        let score = similarity_score(store.require_vector(e.passage_id)?, qc_vector, similarity);
        keyed.push((
            covers,
            RankedEntry {
                passage_id: e.passage_id,
                score,
            },
        ));
    }
    keyed.sort_by(|(ca, ea), (cb, eb)| cb.cmp(ca).then(by_score_then_id(ea, eb)));
    keyed.truncate(k);
    let mut passages = Vec::with_capacity(keyed.len());
    let mut scores = Vec::with_capacity(keyed.len());
    let mut covers_candidate = Vec::with_capacity(keyed.len());
    for (covers, e) in keyed {
        passages.push(e.passage_id);
        scores.push(e.score);
        covers_candidate.push(covers);
    }
    Ok(Evidence {
        candidate_index,
        passages,
        scores,
        covers_candidate,
    })
}
