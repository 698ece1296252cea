use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenizer::tokenize;
use super::CorpusError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

/// One entry of a postings list: a document ordinal and the number of times
/// the term occurs in it (always at least 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Immutable inverted index over a document collection.
///
/// Documents are assigned ordinals in ascending `doc_id` order and terms are
/// assigned ids in lexicographic order, so the layout depends only on the set
/// of documents and never on the order they were supplied in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvertedIndex {
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_texts: Vec<String>,
    doc_lengths: Vec<u32>,
    /// Forward index: per document, `(term id, tf)` sorted by term id.
    doc_terms: Vec<Vec<(u32, u32)>>,
    total_length: u64,
    #[serde(skip)]
    term_lookup: HashMap<String, u32>,
}

impl InvertedIndex {
    /// Builds the index. Fails on the first duplicate `doc_id` (in sorted
    /// order) or on an empty `doc_id`.
    pub fn build<I>(docs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut docs: Vec<Document> = docs.into_iter().collect();
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        for pair in docs.windows(2) {
            if pair[0].doc_id == pair[1].doc_id {
                return Err(CorpusError::DuplicateDocId(pair[0].doc_id.clone()));
            }
        }
        if docs.iter().any(|d| d.doc_id.is_empty()) {
            return Err(CorpusError::EmptyDocId);
        }
        if docs.len() > u32::MAX as usize {
            return Err(CorpusError::TooManyDocuments(docs.len()));
        }

        // term -> per-document counts, in document order
        let mut term_docs: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (ordinal, doc) in docs.iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for token in tokens {
                *counts.entry(token).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                term_docs.entry(term).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf,
                });
            }
        }

        let mut terms = Vec::with_capacity(term_docs.len());
        let mut postings = Vec::with_capacity(term_docs.len());
        let mut doc_terms: Vec<Vec<(u32, u32)>> = vec![Vec::new(); docs.len()];
        for (term_id, (term, list)) in term_docs.into_iter().enumerate() {
            for p in &list {
                doc_terms[p.doc as usize].push((term_id as u32, p.tf));
            }
            terms.push(term);
            postings.push(list);
        }

        let total_length = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let (doc_ids, doc_texts) = docs.into_iter().map(|d| (d.doc_id, d.text)).unzip();
        let mut index = Self {
            terms,
            postings,
            doc_ids,
            doc_texts,
            doc_lengths,
            doc_terms,
            total_length,
            term_lookup: HashMap::new(),
        };
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        self.term_lookup = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let mut index: Self = serde_json::from_str(json).map_err(CorpusError::Format)?;
        index.rebuild_lookup();
        Ok(index)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Mean document length in tokens; 0 for an empty collection.
    pub fn avg_doc_length(&self) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.doc_ids.len() as f64
        }
    }

    pub fn total_length(&self) -> u64 {
        self.total_length
    }

    pub fn term_id(&self, term: &str) -> Option<u32> {
        self.term_lookup.get(term).copied()
    }

    pub fn term(&self, term_id: u32) -> &str {
        &self.terms[term_id as usize]
    }

    pub fn postings(&self, term_id: u32) -> &[Posting] {
        &self.postings[term_id as usize]
    }

    pub fn postings_for(&self, term: &str) -> &[Posting] {
        self.term_id(term).map_or(&[], |id| self.postings(id))
    }

    /// Document frequency of `term`; 0 if unknown.
    pub fn df(&self, term: &str) -> usize {
        self.postings_for(term).len()
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.doc_ids[ordinal]
    }

    pub fn doc_text(&self, ordinal: usize) -> &str {
        &self.doc_texts[ordinal]
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    /// `(term id, tf)` pairs of one document, sorted by term id.
    pub fn doc_terms(&self, ordinal: usize) -> &[(u32, u32)] {
        &self.doc_terms[ordinal]
    }

    /// Term frequency of `term_id` in document `ordinal`.
    pub fn tf(&self, term_id: u32, ordinal: usize) -> u32 {
        let terms = &self.doc_terms[ordinal];
        terms
            .binary_search_by_key(&term_id, |&(t, _)| t)
            .map_or(0, |i| terms[i].1)
    }

    pub fn ordinal_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_docs() -> Vec<Document> {
        vec![Document::new("d1", "cat sat"), Document::new("d2", "dog sat sat")]
    }

    #[test]
    fn counts_on_small_corpus() {
        let index = InvertedIndex::build(two_docs()).unwrap();
        assert_eq!(index.num_docs(), 2);
        assert_eq!(index.avg_doc_length(), 2.5);
        assert_eq!(index.df("sat"), 2);
        assert_eq!(index.df("cat"), 1);
        assert_eq!(index.df("zebra"), 0);
        let sat = index.term_id("sat").unwrap();
        assert_eq!(index.tf(sat, index.ordinal_of("d2").unwrap()), 2);
    }

    #[test]
    fn empty_corpus() {
        let index = InvertedIndex::build(Vec::new()).unwrap();
        assert_eq!(index.num_docs(), 0);
        assert_eq!(index.avg_doc_length(), 0.0);
        assert_eq!(index.num_terms(), 0);
    }

    #[test]
    fn empty_document() {
        let index = InvertedIndex::build(vec![Document::new("d1", "")]).unwrap();
        assert_eq!(index.num_docs(), 1);
        assert_eq!(index.doc_length(0), 0);
        assert_eq!(index.num_terms(), 0);
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = InvertedIndex::build(vec![
            Document::new("a", "x"),
            Document::new("dup", "y"),
            Document::new("dup", "z"),
        ])
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDocId(ref id) if id == "dup"));
        assert!(err.to_string().contains("dup"));
    }

    #[test]
    fn posting_sums_match_lengths() {
        let docs = vec![
            Document::new("x", "a b a c a"),
            Document::new("y", "b b"),
            Document::new("z", ""),
        ];
        let index = InvertedIndex::build(docs).unwrap();
        for ord in 0..index.num_docs() {
            let sum: u32 = index.doc_terms(ord).iter().map(|&(_, tf)| tf).sum();
            assert_eq!(sum, index.doc_length(ord));
        }
        for id in 0..index.num_terms() as u32 {
            assert!(index.postings(id).iter().all(|p| p.tf >= 1));
        }
    }

    #[test]
    fn json_round_trip_restores_lookup() {
        let index = InvertedIndex::build(two_docs()).unwrap();
        let back = InvertedIndex::from_json(&index.to_json()).unwrap();
        assert_eq!(back.df("sat"), 2);
        assert_eq!(back.doc_ids(), index.doc_ids());
    }
}
