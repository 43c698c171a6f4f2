//! Corpus loading and validation.
//!
//! A corpus is two kinds of line-delimited JSON records:
//!
//! ```text
//! {"id": "d1", "title": "Gotham (season 4)", "tokens": [17, 4, 99], "text": "..."}
//! {"question_id": "q1", "question": "...", "doc_ids": ["d1", "d2"], "relevant_ids": ["d1"], "answer": "DC Comics"}
//! ```
//!
//! Either record kind may appear in either input file; records are told apart
//! by the presence of `question_id`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Offset added to byte values by [`tokenize_fallback`]. IDs below it are
/// left free for SEP and PAD.
pub const BYTE_TOKEN_OFFSET: u32 = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("duplicate question id {0:?}")]
    DuplicateQuestion(String),
    #[error("document {0:?} has no tokens")]
    EmptyDocument(String),
    #[error("document {id:?} contains reserved token {token} at position {position}")]
    ReservedToken {
        id: String,
        token: u32,
        position: usize,
    },
    #[error("group {0:?} has no documents")]
    EmptyGroup(String),
    #[error("group {question_id:?} references missing document {doc_id:?}")]
    DanglingReference { question_id: String, doc_id: String },
    #[error("group {question_id:?} marks {doc_id:?} relevant but does not list it in doc_ids")]
    RelevantNotInGroup { question_id: String, doc_id: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Reserved token IDs and the context window packed sequences must fit in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub sep_id: u32,
    pub pad_id: u32,
    pub context_window: usize,
}

impl VocabConfig {
    pub fn new(sep_id: u32, pad_id: u32, context_window: usize) -> Result<Self, CorpusError> {
        let vocab = Self {
            sep_id,
            pad_id,
            context_window,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sep_id == self.pad_id {
            return Err(CorpusError::InvalidVocab(format!(
                "sep_id and pad_id are both {}",
                self.sep_id
            )));
        }
        if self.context_window < 2 {
            return Err(CorpusError::InvalidVocab(format!(
                "context_window must be at least 2, got {}",
                self.context_window
            )));
        }
        Ok(())
    }

    pub fn is_reserved(&self, token: u32) -> bool {
        token == self.sep_id || token == self.pad_id
    }
}

impl Default for VocabConfig {
    /// PAD = 0 and SEP = 1, which leaves the fallback byte tokens unreserved.
    fn default() -> Self {
        Self {
            sep_id: 1,
            pad_id: 0,
            context_window: 2048,
        }
    }
}

/// One corpus article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub tokens: Vec<u32>,
    /// Original text, needed only for building SFT targets and scoring recall.
    #[serde(rename = "text", default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

/// The documents associated with one question, relevant ones and distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentGroup {
    pub question_id: String,
    /// Question text. Required for SFT examples and judging, not for packing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub doc_ids: Vec<String>,
    pub relevant_ids: Vec<String>,
    pub answer: String,
}

/// Validated, immutable corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: BTreeMap<String, Document>,
    groups: Vec<DocumentGroup>,
}

impl Corpus {
    /// Builds a corpus from in-memory records, applying the same checks as
    /// [`load_corpus`].
    pub fn new(
        documents: Vec<Document>,
        groups: Vec<DocumentGroup>,
        vocab: &VocabConfig,
    ) -> Result<Self, CorpusError> {
        vocab.validate()?;
        let mut map = BTreeMap::new();
        for doc in documents {
            if map.contains_key(&doc.id) {
                return Err(CorpusError::DuplicateDocument(doc.id));
            }
            map.insert(doc.id.clone(), doc);
        }
        let corpus = Self {
            documents: map,
            groups,
        };
        corpus.validate(vocab)?;
        Ok(corpus)
    }

    /// Checks every document and group invariant.
    pub fn validate(&self, vocab: &VocabConfig) -> Result<(), CorpusError> {
        for doc in self.documents.values() {
            if doc.tokens.is_empty() {
                return Err(CorpusError::EmptyDocument(doc.id.clone()));
            }
            if let Some((position, &token)) = doc
                .tokens
                .iter()
                .enumerate()
                .find(|(_, t)| vocab.is_reserved(**t))
            {
                return Err(CorpusError::ReservedToken {
                    id: doc.id.clone(),
                    token,
                    position,
                });
            }
        }

        let mut questions = HashSet::new();
        for group in &self.groups {
            if !questions.insert(group.question_id.as_str()) {
                return Err(CorpusError::DuplicateQuestion(group.question_id.clone()));
            }
            if group.doc_ids.is_empty() {
                return Err(CorpusError::EmptyGroup(group.question_id.clone()));
            }
            for doc_id in &group.doc_ids {
                if !self.documents.contains_key(doc_id) {
                    return Err(CorpusError::DanglingReference {
                        question_id: group.question_id.clone(),
                        doc_id: doc_id.clone(),
                    });
                }
            }
            let listed: HashSet<&str> = group.doc_ids.iter().map(String::as_str).collect();
            for doc_id in &group.relevant_ids {
                if !listed.contains(doc_id.as_str()) {
                    return Err(CorpusError::RelevantNotInGroup {
                        question_id: group.question_id.clone(),
                        doc_id: doc_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn groups(&self) -> &[DocumentGroup] {
        &self.groups
    }

    pub fn group(&self, question_id: &str) -> Option<&DocumentGroup> {
        self.groups.iter().find(|g| g.question_id == question_id)
    }

    /// All document titles, as given in the corpus.
    pub fn titles(&self) -> BTreeSet<&str> {
        self.documents.values().map(|d| d.title.as_str()).collect()
    }
}

enum Record {
    Document(Document),
    Group(DocumentGroup),
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<Record, CorpusError> {
    let malformed = |message: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let object = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".to_string()))?;
    if object.contains_key("question_id") {
        serde_json::from_value(value)
            .map(Record::Group)
            .map_err(|e| malformed(e.to_string()))
    } else if object.contains_key("id") {
        serde_json::from_value(value)
            .map(Record::Document)
            .map_err(|e| malformed(e.to_string()))
    } else {
        Err(malformed(
            "record has neither an \"id\" nor a \"question_id\" field".to_string(),
        ))
    }
}

/// Loads and validates a corpus from a documents file and a groups file.
///
/// Blank lines are skipped. Any unparseable line fails the whole load with its
/// 1-based line number.
pub fn load_corpus(
    docs_path: &Path,
    groups_path: &Path,
    vocab: &VocabConfig,
) -> Result<Corpus, CorpusError> {
    load_corpus_files(&[docs_path, groups_path], vocab)
}

/// Like [`load_corpus`] but over any number of record files.
pub fn load_corpus_files(paths: &[&Path], vocab: &VocabConfig) -> Result<Corpus, CorpusError> {
    let mut documents = Vec::new();
    let mut groups = Vec::new();
    for path in paths {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_record(path, idx + 1, &line)? {
                Record::Document(doc) => documents.push(doc),
                Record::Group(group) => groups.push(group),
            }
        }
    }
    Corpus::new(documents, groups, vocab)
}

/// Byte-level fallback tokenizer: each byte becomes `byte + BYTE_TOKEN_OFFSET`.
pub fn tokenize_fallback(text: &str) -> Vec<u32> {
    text.bytes()
        .map(|b| u32::from(b) + BYTE_TOKEN_OFFSET)
        .collect()
}

/// Inverse of [`tokenize_fallback`] at the byte level. Returns `None` if a
/// token lies outside the byte range.
pub fn detokenize_fallback_bytes(tokens: &[u32]) -> Option<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            t.checked_sub(BYTE_TOKEN_OFFSET)
                .and_then(|b| u8::try_from(b).ok())
        })
        .collect()
}

/// Inverse of [`tokenize_fallback`]. Returns `None` for out-of-range tokens or
/// byte sequences that are not UTF-8.
pub fn detokenize_fallback(tokens: &[u32]) -> Option<String> {
    detokenize_fallback_bytes(tokens).and_then(|bytes| String::from_utf8(bytes).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab() -> VocabConfig {
        VocabConfig::new(1, 0, 16).unwrap()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn load(docs: &[&str], groups: &[&str]) -> Result<Corpus, CorpusError> {
        let d = write_lines(docs);
        let g = write_lines(groups);
        load_corpus(d.path(), g.path(), &vocab())
    }

    const DOC_A: &str = r#"{"id":"a","title":"A","tokens":[5,6,7],"text":"alpha"}"#;
    const DOC_B: &str = r#"{"id":"b","title":"B","tokens":[8,9]}"#;

    #[test]
    fn smallest_valid_corpus() {
        let corpus = load(
            &[DOC_A, DOC_B],
            &[r#"{"question_id":"q","doc_ids":["a","b"],"relevant_ids":["a"],"answer":"x"}"#],
        )
        .unwrap();
        assert_eq!(corpus.num_documents(), 2);
        assert_eq!(corpus.groups().len(), 1);
        assert_eq!(
            corpus.document("a").unwrap().raw_text.as_deref(),
            Some("alpha")
        );
        assert_eq!(corpus.document("b").unwrap().raw_text, None);
    }

    #[test]
    fn file_order_does_not_matter() {
        let group = r#"{"question_id":"q","doc_ids":["a","b"],"relevant_ids":[],"answer":"x"}"#;
        let forward = load(&[DOC_A, DOC_B], &[group]).unwrap();
        let swapped = load(&[group], &[DOC_B, DOC_A]).unwrap();
        assert_eq!(forward, swapped);
    }

    #[test]
    fn dangling_reference_names_missing_id() {
        let err = load(
            &[DOC_A],
            &[r#"{"question_id":"q","doc_ids":["a","X"],"relevant_ids":[],"answer":"x"}"#],
        )
        .unwrap_err();
        assert!(matches!(&err, CorpusError::DanglingReference { doc_id, .. } if doc_id == "X"));
        assert!(err.to_string().contains("\"X\""));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load(&[DOC_A, "", "{not json"], &[]).unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = load(&[r#"{"id":"a","title":"A","tokens":[-1]}"#], &[]).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
        let err = load(&[r#"{"title":"A"}"#], &[]).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = load(&[DOC_A, DOC_A], &[]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDocument(id) if id == "a"));
    }

    #[test]
    fn reserved_tokens_rejected() {
        let err = load(&[r#"{"id":"s","title":"S","tokens":[5,1]}"#], &[]).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::ReservedToken {
                token: 1,
                position: 1,
                ..
            }
        ));
        let err = load(&[r#"{"id":"p","title":"P","tokens":[0]}"#], &[]).unwrap_err();
        assert!(matches!(err, CorpusError::ReservedToken { token: 0, .. }));
    }

    #[test]
    fn broken_groups_rejected() {
        let err = load(
            &[DOC_A],
            &[r#"{"question_id":"q","doc_ids":[],"relevant_ids":[],"answer":"x"}"#],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::EmptyGroup(_)));

        let err = load(
            &[DOC_A, DOC_B],
            &[r#"{"question_id":"q","doc_ids":["a"],"relevant_ids":["b"],"answer":"x"}"#],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::RelevantNotInGroup { .. }));

        let g = r#"{"question_id":"q","doc_ids":["a"],"relevant_ids":[],"answer":"x"}"#;
        let err = load(&[DOC_A], &[g, g]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateQuestion(_)));

        let err = load(&[r#"{"id":"e","title":"E","tokens":[]}"#], &[]).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocument(_)));
    }

    #[test]
    fn shared_documents_and_titles_allowed() {
        let corpus = load(
            &[DOC_A, r#"{"id":"b","title":"A","tokens":[8]}"#],
            &[
                r#"{"question_id":"q1","doc_ids":["a","b"],"relevant_ids":[],"answer":"x"}"#,
                r#"{"question_id":"q2","doc_ids":["b","a"],"relevant_ids":[],"answer":"y"}"#,
            ],
        )
        .unwrap();
        assert_eq!(corpus.titles().len(), 1);
        assert_eq!(corpus.group("q2").unwrap().doc_ids, ["b", "a"]);
    }

    #[test]
    fn vocab_invariants() {
        assert!(VocabConfig::new(3, 3, 16).is_err());
        assert!(VocabConfig::new(1, 0, 1).is_err());
        assert!(VocabConfig::new(1, 0, 2).is_ok());
        VocabConfig::default().validate().unwrap();
    }

    #[test]
    fn fallback_tokenizer() {
        assert!(tokenize_fallback("").is_empty());
        let ab = tokenize_fallback("ab");
        assert_eq!(ab.len(), 2);
        assert_ne!(ab[0], ab[1]);
        let aa = tokenize_fallback("aa");
        assert_eq!(aa[0], aa[1]);
        assert!(tokenize_fallback("xyz")
            .iter()
            .all(|&t| !VocabConfig::default().is_reserved(t)));
        assert_eq!(detokenize_fallback(&[0]), None);
        assert_eq!(detokenize_fallback(&[BYTE_TOKEN_OFFSET + 256]), None);
    }

    proptest::proptest! {
        #[test]
        fn fallback_round_trips(s in ".*") {
            proptest::prop_assert_eq!(detokenize_fallback(&tokenize_fallback(&s)), Some(s));
        }

        #[test]
        fn fallback_round_trips_bytes(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..64)) {
            let tokens: Vec<u32> = bytes.iter().map(|&b| u32::from(b) + BYTE_TOKEN_OFFSET).collect();
            proptest::prop_assert_eq!(detokenize_fallback_bytes(&tokens), Some(bytes));
        }
    }
}
