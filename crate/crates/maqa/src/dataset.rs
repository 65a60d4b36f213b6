//! Dataset and corpus files.
//!
//! Datasets are JSON-lines, one record per line:
//! `{"id": "...", "question": "...", "answers": [["form", ...], ...]}`.
//! Corpora are JSON-lines of passages. An import converter accepts the
//! flat semicolon-separated answer convention, and a splitter chunks plain
//! text into fixed-word passages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};
use crate::pipeline::RunReport;
use crate::types::{AnswerCluster, Corpus, Passage, Question};

/// One dataset line. `answers` is a list of clusters, each cluster a list
/// of interchangeable surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<Vec<String>>,
}

impl DatasetRecord {
    pub fn from_question(q: &Question) -> Self {
        DatasetRecord {
            id: q.id.clone(),
            question: q.text.clone(),
            answers: q.answers.iter().map(|c| c.forms.clone()).collect(),
        }
    }

    pub fn into_question(self) -> Result<Question> {
        let clusters = self
            .answers
            .into_iter()
            .map(AnswerCluster::new)
            .collect::<Result<Vec<_>>>()?;
        Question::new(self.id, self.question, clusters)
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> MaqaError {
    MaqaError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parse one JSON value per line, reporting the 1-based line number on
/// failure. Blank lines are not allowed: a loader must never silently drop
/// a record.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl Read, origin: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let item = serde_json::from_str(&line).map_err(|e| parse_error(origin, i + 1, e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)
            .map_err(|e| MaqaError::invalid(format!("serializing record: {e}")))?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Load a dataset file into validated questions. Duplicate ids are
/// rejected.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let records: Vec<DatasetRecord> = read_jsonl(File::open(path)?, path)?;
    records_to_questions(records, path)
}

fn records_to_questions(records: Vec<DatasetRecord>, path: &Path) -> Result<Vec<Question>> {
    let mut seen = std::collections::HashSet::new();
    let mut questions = Vec::with_capacity(records.len());
    for (i, record) in records.into_iter().enumerate() {
        if !seen.insert(record.id.clone()) {
            return Err(MaqaError::DuplicateId { id: record.id });
        }
        let q = record
            .into_question()
            .map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        questions.push(q);
    }
    Ok(questions)
}

pub fn save_dataset(path: impl AsRef<Path>, questions: &[Question]) -> Result<()> {
    let records: Vec<DatasetRecord> = questions.iter().map(DatasetRecord::from_question).collect();
    write_jsonl(BufWriter::new(File::create(path)?), &records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let passages: Vec<Passage> = read_jsonl(File::open(path)?, path)?;
    Corpus::new(passages)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), corpus.passages())
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<RunReport>> {
    let path = path.as_ref();
    read_jsonl(File::open(path)?, path)
}

pub fn save_reports(path: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), reports)
}

/// Flat-style import record: answers as one string, clusters separated by
/// `;`, alternative forms inside a cluster by `|`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatRecord {
    pub id: String,
    pub question: String,
    pub answers: String,
}

/// Split a flat answer string into the canonical list-of-lists form.
/// `"NYC|New York City; LA"` becomes `[["NYC", "New York City"], ["LA"]]`.
pub fn parse_flat_answers(raw: &str) -> Result<Vec<Vec<String>>> {
    let mut clusters = Vec::new();
    for chunk in raw.split(';') {
        let forms: Vec<String> = chunk
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if forms.is_empty() {
            if chunk.trim().is_empty() && raw.trim().is_empty() {
                break;
            }
            return Err(MaqaError::invalid(format!(
                "empty answer cluster in {raw:?}"
            )));
        }
        clusters.push(forms);
    }
    Ok(clusters)
}

/// Convert a flat-format JSONL file into canonical dataset records.
pub fn import_flat_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let flats: Vec<FlatRecord> = read_jsonl(File::open(path)?, path)?;
    let records = flats
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(DatasetRecord {
                id: f.id,
                question: f.question,
                answers: parse_flat_answers(&f.answers)
                    .map_err(|e| parse_error(path, i + 1, e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records_to_questions(records, path)
}

/// Chunk plain text into consecutive passages of `words` whitespace tokens
/// each; the final passage may be shorter.
pub fn split_into_passages(text: &str, words: usize) -> Result<Vec<String>> {
    if words == 0 {
        return Err(MaqaError::invalid("passage length must be at least 1 word"));
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    Ok(tokens.chunks(words).map(|c| c.join(" ")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn single_line_roundtrip() {
        let dir = tmp();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"what?\",\"answers\":[[\"xx\",\"yy\"],[\"zz\"]]}\n",
        )
        .unwrap();
        let qs = load_dataset(&path).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].id, "q1");
        assert_eq!(qs[0].answers.len(), 2);
        assert_eq!(qs[0].answers[0].forms, vec!["xx", "yy"]);
    }

    #[test]
    fn missing_field_names_line() {
        let dir = tmp();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"ok?\",\"answers\":[[\"a\"]]}\n{\"id\":\"q2\",\"question\":\"bad?\"}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(MaqaError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("answers"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tmp();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"a?\",\"answers\":[[\"x\"]]}\n{\"id\":\"q1\",\"question\":\"b?\",\"answers\":[[\"y\"]]}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(MaqaError::DuplicateId { id }) => assert_eq!(id, "q1"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn random_records_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let questions: Vec<Question> = (0..100)
            .map(|i| {
                let n = rng.gen_range(1..=4);
                let clusters = (0..n)
                    .map(|c| {
                        let forms = (0..rng.gen_range(1..=3))
                            .map(|f| format!("form {i} {c} {f}"))
                            .collect();
                        AnswerCluster::new(forms).unwrap()
                    })
                    .collect();
                Question::new(format!("q{i}"), format!("question {i}?"), clusters).unwrap()
            })
            .collect();
        let dir = tmp();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &questions).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, questions);
    }

    #[test]
    fn corpus_roundtrip_and_jsonl_errors() {
        let dir = tmp();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(vec![
            Passage::new(3, "T", "first passage").unwrap(),
            Passage::new(7, "", "second passage").unwrap(),
        ])
        .unwrap();
        save_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.passages(), corpus.passages());

        let bad: Result<Vec<Passage>> =
            read_jsonl(Cursor::new("{\"id\":1,\"text\":\"x\"}\nnot json\n"), Path::new("m"));
        match bad {
            Err(MaqaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn flat_answers_convert() {
        assert_eq!(
            parse_flat_answers("Toronto; Montreal").unwrap(),
            vec![vec!["Toronto".to_string()], vec!["Montreal".to_string()]]
        );
        assert_eq!(
            parse_flat_answers("NYC|New York City; LA").unwrap(),
            vec![
                vec!["NYC".to_string(), "New York City".to_string()],
                vec!["LA".to_string()]
            ]
        );
        assert!(parse_flat_answers("a;;b").is_err());
        assert_eq!(parse_flat_answers("").unwrap(), Vec::<Vec<String>>::new());
    }

    #[test]
    fn flat_file_imports() {
        let dir = tmp();
        let path = dir.path().join("flat.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"where?\",\"answers\":\"Oslo; Bergen|City of Bergen\"}\n",
        )
        .unwrap();
        let qs = import_flat_dataset(&path).unwrap();
        assert_eq!(qs[0].answers.len(), 2);
        assert_eq!(qs[0].answers[1].forms, vec!["Bergen", "City of Bergen"]);
    }

    #[test]
    fn splitter_chunks_words() {
        let text = (0..250).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let chunks = split_into_passages(&text, 100).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].split_whitespace().count(), 100);
        assert_eq!(chunks[2].split_whitespace().count(), 50);
        assert!(chunks[0].starts_with("w0 "));
        assert!(chunks[2].ends_with(" w249"));
        assert_eq!(split_into_passages("", 100).unwrap(), Vec::<String>::new());
        assert!(split_into_passages("a b", 0).is_err());
    }
}
