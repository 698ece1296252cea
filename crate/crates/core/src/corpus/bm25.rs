//! BM25 scoring and top-k retrieval.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::index::InvertedIndex;
use super::tokenizer::{snippet, tokenize};
use super::CorpusError;
use crate::num::{lit, Real};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;
pub const DEFAULT_SNIPPET_TOKENS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<T> {
    pub k1: T,
    pub b: T,
}

impl<T: Real> Default for Bm25Params<T> {
    fn default() -> Self {
        Self {
            k1: lit(DEFAULT_K1),
            b: lit(DEFAULT_B),
        }
    }
}

/// A bag of query terms with positive weights, kept in term order so that
/// score accumulation is reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerms<T>(BTreeMap<String, T>);

impl<T: Real> WeightedTerms<T> {
    /// Unweighted query: each term weighted by its count in `text`.
    pub fn from_text(text: &str) -> Self {
        let mut terms = BTreeMap::new();
        for token in tokenize(text) {
            *terms.entry(token).or_insert_with(T::zero) += T::one();
        }
        Self(terms)
    }

    /// Drops non-positive and non-finite weights; repeated terms accumulate.
    pub fn from_weights<I, S>(weights: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
    {
        let mut terms = BTreeMap::new();
        for (term, w) in weights {
            if w > T::zero() && w.is_finite() {
                *terms.entry(term.into()).or_insert_with(T::zero) += w;
            }
        }
        Self(terms)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, T)> + '_ {
        self.0.iter().map(|(t, &w)| (t.as_str(), w))
    }

    pub fn get(&self, term: &str) -> Option<T> {
        self.0.get(term).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self(self.0.iter().map(|(t, &w)| (t.clone(), w * factor)).collect())
    }

    pub fn as_map(&self) -> &BTreeMap<String, T> {
        &self.0
    }
}

/// Smoothed, non-negative inverse document frequency.
pub fn idf<T: Real>(num_docs: usize, df: usize) -> T {
    let n = T::from_usize_lossy(num_docs);
    let df = T::from_usize_lossy(df);
    let half: T = lit(0.5);
    (T::one() + (n - df + half) / (df + half)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc<T> {
    pub doc_id: String,
    pub score: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry<T> {
    pub doc_id: String,
    pub score: T,
    pub snippet: String,
}

/// Ranked top-k documents for one query, with truncated snippets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalContext<T = f64> {
    pub query_id: String,
    pub k: usize,
    pub entries: Vec<ContextEntry<T>>,
}

impl<T> RetrievalContext<T> {
    /// A context with no retrieved documents (k = 0).
    pub fn empty(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            k: 0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }
}

/// BM25 scorer bound to one index.
#[derive(Clone, Debug)]
pub struct Searcher<'a, T = f64> {
    index: &'a InvertedIndex,
    params: Bm25Params<T>,
    snippet_tokens: usize,
    avgdl: T,
    num_docs: usize,
}

impl<'a, T: Real> Searcher<'a, T> {
    pub fn new(index: &'a InvertedIndex) -> Self {
        Self::with_params(index, Bm25Params::default())
    }

    pub fn with_params(index: &'a InvertedIndex, params: Bm25Params<T>) -> Self {
        Self {
            index,
            params,
            snippet_tokens: DEFAULT_SNIPPET_TOKENS,
            avgdl: T::from_f64_lossy(index.avg_doc_length()),
            num_docs: index.num_docs(),
        }
    }

    pub fn snippet_tokens(mut self, tokens: usize) -> Self {
        self.snippet_tokens = tokens;
        self
    }

    pub fn index(&self) -> &'a InvertedIndex {
        self.index
    }

    pub fn params(&self) -> Bm25Params<T> {
        self.params
    }

    #[inline]
    fn term_contribution(&self, weight: T, idf: T, tf: u32, doc_len: u32) -> T {
        let tf = T::from_u32(tf).unwrap_or_else(T::nan);
        let len = T::from_u32(doc_len).unwrap_or_else(T::nan);
        let k1 = self.params.k1;
        let b = self.params.b;
        let norm = tf + k1 * (T::one() - b + b * len / self.avgdl);
        weight * idf * (tf * (k1 + T::one()) / norm)
    }

    /// Score of one document. Unknown terms contribute 0.
    pub fn score(&self, query: &WeightedTerms<T>, ordinal: usize) -> T {
        let doc_len = self.index.doc_length(ordinal);
        let mut total = T::zero();
        for (term, weight) in query.iter() {
            let Some(term_id) = self.index.term_id(term) else {
                continue;
            };
            let tf = self.index.tf(term_id, ordinal);
            if tf == 0 {
                continue;
            }
            let idf = idf::<T>(self.num_docs, self.index.postings(term_id).len());
            total += self.term_contribution(weight, idf, tf, doc_len);
        }
        total
    }

    /// Scores every document that shares at least one term with the query.
    /// Returns `(ordinal, score)` pairs in ordinal order.
    pub fn score_matching(&self, query: &WeightedTerms<T>) -> Vec<(usize, T)> {
        let mut acc: Vec<T> = vec![T::zero(); self.num_docs];
        let mut touched = vec![false; self.num_docs];
        for (term, weight) in query.iter() {
            let Some(term_id) = self.index.term_id(term) else {
                continue;
            };
            let postings = self.index.postings(term_id);
            let idf = idf::<T>(self.num_docs, postings.len());
            for p in postings {
                let ord = p.doc as usize;
                acc[ord] += self.term_contribution(weight, idf, p.tf, self.index.doc_length(ord));
                touched[ord] = true;
            }
        }
        touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(ord, _)| (ord, acc[ord]))
            .collect()
    }

    /// Top `k` documents with a positive score, sorted by score descending
    /// and then by `doc_id` ascending.
    pub fn top_k(&self, query: &WeightedTerms<T>, k: usize) -> Result<Vec<ScoredDoc<T>>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::ZeroK);
        }
        let mut hits: Vec<(usize, T)> = self
            .score_matching(query)
            .into_iter()
            .filter(|&(_, s)| s > T::zero())
            .collect();
        // ordinals follow doc_id order, so comparing ordinals breaks ties by doc_id
        let cmp = |a: &(usize, T), b: &(usize, T)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        Ok(hits
            .into_iter()
            .map(|(ord, score)| ScoredDoc {
                doc_id: self.index.doc_id(ord).to_owned(),
                score,
            })
            .collect())
    }

    pub fn retrieve(
        &self,
        query_id: &str,
        query: &WeightedTerms<T>,
        k: usize,
    ) -> Result<RetrievalContext<T>, CorpusError> {
        let hits = self.top_k(query, k)?;
        let entries = hits
            .into_iter()
            .map(|hit| {
                let ord = self.index.ordinal_of(&hit.doc_id).expect("hit comes from index");
                ContextEntry {
                    snippet: snippet(self.index.doc_text(ord), self.snippet_tokens),
                    doc_id: hit.doc_id,
                    score: hit.score,
                }
            })
            .collect();
        Ok(RetrievalContext {
            query_id: query_id.to_owned(),
            k,
            entries,
        })
    }

    pub fn retrieve_text(
        &self,
        query_id: &str,
        text: &str,
        k: usize,
    ) -> Result<RetrievalContext<T>, CorpusError> {
        self.retrieve(query_id, &WeightedTerms::from_text(text), k)
    }
}

/// BM25 score of one document with default parameters.
pub fn bm25_score<T: Real>(index: &InvertedIndex, query: &WeightedTerms<T>, ordinal: usize) -> T {
    Searcher::new(index).score(query, ordinal)
}

/// Top-k retrieval with default BM25 parameters and snippet length.
pub fn retrieve_topk<T: Real>(
    index: &InvertedIndex,
    query_id: &str,
    query: &WeightedTerms<T>,
    k: usize,
) -> Result<RetrievalContext<T>, CorpusError> {
    Searcher::new(index).retrieve(query_id, query, k)
}
