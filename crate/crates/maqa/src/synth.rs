//! Seeded synthetic corpora with planted answers and retrieval margins.
//!
//! Every question gets single-form answer clusters of the shape
//! `ans<q>x<a>`; each cluster's supporting passages contain the form
//! verbatim. Support embeddings sit on the question direction with a large
//! scale and bounded noise, distractors on random directions with a small
//! scale, so supports outscore distractors for their question by
//! construction at any noise level the validator accepts.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::PrefixEmbedder;
use crate::error::{MaqaError, Result};
use crate::retrieval::EmbeddingStore;
use crate::types::{AnswerCluster, Corpus, Passage, Question};

pub const SUPPORT_SCALE: f32 = 2.0;
pub const DISTRACTOR_SCALE: f32 = 0.3;

const FILLER_WORDS: [&str; 16] = [
    "rivers", "bridges", "meadows", "engines", "crystals", "orchards", "harbors", "lanterns",
    "valleys", "markets", "gardens", "towers", "islands", "forests", "canyons", "beacons",
];

/// Parameters of one synthetic workload. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub questions: usize,
    pub answers_per_question: (usize, usize),
    pub supports_per_answer: (usize, usize),
    pub distractors: usize,
    pub dim: usize,
    pub noise_scale: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            questions: 50,
            answers_per_question: (1, 5),
            supports_per_answer: (2, 6),
            distractors: 500,
            dim: 32,
            noise_scale: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.questions == 0 {
            return Err(MaqaError::invalid("need at least one question"));
        }
        for (name, (lo, hi)) in [
            ("answers_per_question", self.answers_per_question),
            ("supports_per_answer", self.supports_per_answer),
        ] {
            if lo == 0 || lo > hi {
                return Err(MaqaError::invalid(format!(
                    "{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
                )));
            }
        }
        // Single-digit answer indices keep every form substring-free of
        // every other form.
        if self.answers_per_question.1 > 9 {
            return Err(MaqaError::invalid("at most 9 answers per question"));
        }
        if self.dim == 0 {
            return Err(MaqaError::invalid("embedding dim must be at least 1"));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(MaqaError::invalid(format!(
                "noise scale must be finite and non-negative, got {}",
                self.noise_scale
            )));
        }
        // Keep the worst-case noise projection below the support/distractor
        // score gap so the planted margin survives.
        let worst = self.noise_scale * (self.dim as f32).sqrt();
        if worst >= SUPPORT_SCALE - DISTRACTOR_SCALE {
            return Err(MaqaError::invalid(format!(
                "noise scale {} too large for dim {}: may erase the retrieval margin",
                self.noise_scale, self.dim
            )));
        }
        Ok(())
    }
}

/// A generated workload: questions with gold clusters, the passage corpus,
/// passage embeddings, and the matching question embeddings.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub questions: Vec<Question>,
    pub corpus: Corpus,
    pub store: EmbeddingStore,
    /// Question text paired with its embedding, generation order.
    pub question_vectors: Vec<(String, Vec<f32>)>,
}

impl SyntheticData {
    /// Embedder answering for the generated question texts (and their
    /// question-candidate concatenations, which share the prefix).
    pub fn embedder(&self) -> Result<PrefixEmbedder> {
        PrefixEmbedder::new(self.store.dim(), self.question_vectors.clone())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut questions = Vec::with_capacity(spec.questions);
    let mut question_vectors = Vec::with_capacity(spec.questions);
    let mut passages = Vec::new();
    let mut entries = Vec::new();
    let mut pid = 0u64;

    for qi in 0..spec.questions {
        let v_q = random_unit(&mut rng, spec.dim);
        let (a_lo, a_hi) = spec.answers_per_question;
        let n_answers = rng.gen_range(a_lo..=a_hi);
        let mut clusters = Vec::with_capacity(n_answers);
        for ai in 0..n_answers {
            let form = format!("ans{qi}x{}", ai + 1);
            clusters.push(AnswerCluster::single(&form));
            let (s_lo, s_hi) = spec.supports_per_answer;
            let n_supports = rng.gen_range(s_lo..=s_hi);
            for si in 0..n_supports {
                let text = format!("record {si} notes that {form} matches label {qi}");
                let vector: Vec<f32> = v_q
                    .iter()
                    .map(|x| {
                        SUPPORT_SCALE * x + spec.noise_scale * rng.gen_range(-1.0f32..=1.0)
                    })
                    .collect();
                passages.push(Passage::new(pid, format!("synthetic {pid}"), text)?);
                entries.push((pid, vector));
                pid += 1;
            }
        }
        let text = format!("which items carry label {qi}?");
        questions.push(Question::new(format!("q{qi}"), &text, clusters)?);
        question_vectors.push((text, v_q));
    }

    for di in 0..spec.distractors {
        let w1 = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
        let w2 = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
        let text = format!("distractor {di} discusses {w1} near {w2}");
        let vector: Vec<f32> = random_unit(&mut rng, spec.dim)
            .into_iter()
            .map(|x| DISTRACTOR_SCALE * x)
            .collect();
        passages.push(Passage::new(pid, format!("synthetic {pid}"), text)?);
        entries.push((pid, vector));
        pid += 1;
    }

    Ok(SyntheticData {
        questions,
        corpus: Corpus::new(passages)?,
        store: EmbeddingStore::from_entries(spec.dim, entries)?,
        question_vectors,
    })
}

/// Budget-contention fixture: one question whose clusters each hold
/// `supports_per` supporting passages, retrieval-scored in cluster-major
/// descending order, above a tail of non-covering distractors. Scores are
/// planted exactly (every embedding lies on the first axis), so rankings
/// are fully deterministic.
#[derive(Debug, Clone)]
pub struct ContentionFixture {
    pub question: Question,
    pub corpus: Corpus,
    pub store: EmbeddingStore,
    pub question_vector: Vec<f32>,
}

impl ContentionFixture {
    pub fn embedder(&self) -> Result<PrefixEmbedder> {
        PrefixEmbedder::new(
            self.store.dim(),
            vec![(self.question.text.clone(), self.question_vector.clone())],
        )
    }
}

pub fn contention_fixture(
    clusters: usize,
    supports_per: usize,
    distractors: usize,
) -> Result<ContentionFixture> {
    if clusters == 0 || clusters > 9 {
        return Err(MaqaError::invalid("clusters must be between 1 and 9"));
    }
    if supports_per == 0 {
        return Err(MaqaError::invalid("need at least one support per cluster"));
    }
    let dim = 8usize;
    let axis = |score: f32| {
        let mut v = vec![0.0f32; dim];
        v[0] = score;
        v
    };
    let mut gold = Vec::with_capacity(clusters);
    let mut passages = Vec::new();
    let mut entries = Vec::new();
    let mut pid = 0u64;
    let total_supports = clusters * supports_per;
    for ci in 0..clusters {
        let form = format!("ans0x{}", ci + 1);
        gold.push(AnswerCluster::single(&form));
        for si in 0..supports_per {
            let text = format!("support {si} confirms {form} for the contention question");
            let score = (total_supports - passages.len()) as f32;
            passages.push(Passage::new(pid, format!("fixture {pid}"), text)?);
            entries.push((pid, axis(score)));
            pid += 1;
        }
    }
    for di in 0..distractors {
        let text = format!("distractor {di} about an unrelated matter");
        passages.push(Passage::new(pid, format!("fixture {pid}"), text)?);
        entries.push((pid, axis(0.5 - 0.001 * di as f32)));
        pid += 1;
    }
    let question = Question::new("contention", "name every planted answer?", gold)?;
    Ok(ContentionFixture {
        question,
        corpus: Corpus::new(passages)?,
        store: EmbeddingStore::from_entries(dim, entries)?,
        question_vector: axis(1.0),
    })
}
