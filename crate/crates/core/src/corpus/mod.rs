//! Tokenizer, inverted index, BM25 scoring and top-k retrieval.

mod bm25;
mod index;
mod tokenizer;

use std::path::{Path, PathBuf};

pub use bm25::{
    bm25_score, idf, retrieve_topk, Bm25Params, ContextEntry, RetrievalContext, ScoredDoc,
    Searcher, WeightedTerms, DEFAULT_B, DEFAULT_K1, DEFAULT_SNIPPET_TOKENS,
};
pub use index::{Document, InvertedIndex, Posting};
pub use tokenizer::{snippet, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("empty doc_id")]
    EmptyDocId,
    #[error("corpus has {0} documents, more than an index can address")]
    TooManyDocuments(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate query_id `{0}`")]
    DuplicateQueryId(String),
    #[error("reading {}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid index file: {0}")]
    Format(serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Splits `id<TAB>text` lines. Blank lines are skipped; the text may be empty
/// and may itself contain tabs.
fn parse_id_text_tsv(path: &Path, content: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(CorpusError::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: "expected `id<TAB>text`".into(),
            });
        };
        if id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: "empty id".into(),
            });
        }
        rows.push((id.to_owned(), text.to_owned()));
    }
    Ok(rows)
}

/// Reads a `doc_id<TAB>text` corpus file.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    Ok(parse_id_text_tsv(path, &content)?
        .into_iter()
        .map(|(doc_id, text)| Document { doc_id, text })
        .collect())
}

/// Reads a `query_id<TAB>text` file, preserving file order.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, CorpusError> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let rows = parse_id_text_tsv(path, &content)?;
    let mut seen = std::collections::HashSet::new();
    let mut queries = Vec::with_capacity(rows.len());
    for (query_id, text) in rows {
        if !seen.insert(query_id.clone()) {
            return Err(CorpusError::DuplicateQueryId(query_id));
        }
        queries.push(Query { query_id, text });
    }
    Ok(queries)
}

/// Loads either a serialized index (`.json`) or a TSV corpus.
pub fn load_index(path: impl AsRef<Path>) -> Result<InvertedIndex, CorpusError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        InvertedIndex::from_json(&read_to_string(path)?)
    } else {
        InvertedIndex::build(read_documents(path)?)
    }
}
