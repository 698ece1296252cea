//! Pseudo-relevance feedback expanders: RM3 and positive-only Rocchio.
//!
//! Both take the first-pass BM25 ranking of the original query as the
//! feedback set and return a weighted query that the same BM25 scorer can
//! consume.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{idf, CorpusError, Searcher, WeightedTerms};
use crate::num::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionOrigin {
    Rm3,
    Rocchio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedQuery<T = f64> {
    pub terms: BTreeMap<String, T>,
    pub origin: ExpansionOrigin,
}

impl<T: Real> WeightedQuery<T> {
    pub fn total_weight(&self) -> T {
        self.terms.values().copied().sum()
    }

    pub fn to_weighted_terms(&self) -> WeightedTerms<T> {
        WeightedTerms::from_weights(self.terms.iter().map(|(t, &w)| (t.clone(), w)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("invalid feedback parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rm3Params<T = f64> {
    pub fb_docs: usize,
    pub fb_terms: usize,
    pub orig_weight: T,
}

impl<T: Real> Default for Rm3Params<T> {
    fn default() -> Self {
        Self {
            fb_docs: 10,
            fb_terms: 10,
            orig_weight: lit(0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocchioParams<T = f64> {
    pub fb_docs: usize,
    pub fb_terms: usize,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Default for RocchioParams<T> {
    fn default() -> Self {
        Self {
            fb_docs: 10,
            fb_terms: 10,
            alpha: T::one(),
            beta: lit(0.75),
        }
    }
}

fn check_counts(fb_docs: usize, fb_terms: usize) -> Result<(), FeedbackError> {
    if fb_docs == 0 {
        return Err(FeedbackError::InvalidParameter("fb_docs must be at least 1"));
    }
    if fb_terms == 0 {
        return Err(FeedbackError::InvalidParameter("fb_terms must be at least 1"));
    }
    Ok(())
}

/// Highest-weight entries first, ties broken lexicographically by term.
fn by_weight_then_term<T: Real>(a: &(String, T), b: &(String, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn normalize<T: Real>(map: &mut BTreeMap<String, T>) {
    let total: T = map.values().copied().sum();
    if total > T::zero() {
        for w in map.values_mut() {
            *w /= total;
        }
    }
}

/// Maximum-likelihood term distribution of the query text.
fn query_distribution<T: Real>(query: &WeightedTerms<T>) -> BTreeMap<String, T> {
    let mut dist: BTreeMap<String, T> = query.iter().map(|(t, w)| (t.to_owned(), w)).collect();
    normalize(&mut dist);
    dist
}

/// RM3 expansion. Document weights are first-pass BM25 scores normalized
/// to sum to one.
pub fn rm3_expand<T: Real>(
    searcher: &Searcher<'_, T>,
    query: &str,
    params: &Rm3Params<T>,
) -> Result<WeightedQuery<T>, FeedbackError> {
    check_counts(params.fb_docs, params.fb_terms)?;
    if !(params.orig_weight >= T::zero() && params.orig_weight <= T::one()) {
        return Err(FeedbackError::InvalidParameter("orig_weight must lie in [0, 1]"));
    }
    let original = WeightedTerms::<T>::from_text(query);
    let p_query = query_distribution(&original);
    if original.is_empty() {
        return Ok(WeightedQuery {
            terms: p_query,
            origin: ExpansionOrigin::Rm3,
        });
    }
    let feedback = searcher.top_k(&original, params.fb_docs)?;
    if feedback.is_empty() {
        return Ok(WeightedQuery {
            terms: p_query,
            origin: ExpansionOrigin::Rm3,
        });
    }

    let index = searcher.index();
    let score_sum: T = feedback.iter().map(|d| d.score).sum();
    let mut relevance: BTreeMap<u32, T> = BTreeMap::new();
    for hit in &feedback {
        let ord = index.ordinal_of(&hit.doc_id).expect("feedback doc is indexed");
        let doc_weight = hit.score / score_sum;
        let len = T::from_u32(index.doc_length(ord)).unwrap_or_else(T::nan);
        for &(term_id, tf) in index.doc_terms(ord) {
            let tf = T::from_u32(tf).unwrap_or_else(T::nan);
            *relevance.entry(term_id).or_insert_with(T::zero) += tf / len * doc_weight;
        }
    }

    let mut ranked: Vec<(String, T)> = relevance
        .into_iter()
        .map(|(id, w)| (index.term(id).to_owned(), w))
        .collect();
    ranked.sort_by(by_weight_then_term);
    ranked.truncate(params.fb_terms);
    let mut p_feedback: BTreeMap<String, T> = ranked.into_iter().collect();
    normalize(&mut p_feedback);

    let lambda = params.orig_weight;
    let mut terms: BTreeMap<String, T> = BTreeMap::new();
    for (t, &p) in &p_query {
        *terms.entry(t.clone()).or_insert_with(T::zero) += lambda * p;
    }
    for (t, &p) in &p_feedback {
        *terms.entry(t.clone()).or_insert_with(T::zero) += (T::one() - lambda) * p;
    }
    terms.retain(|_, w| *w > T::zero());
    normalize(&mut terms);
    Ok(WeightedQuery {
        terms,
        origin: ExpansionOrigin::Rm3,
    })
}

/// Feedback centroid: mean tf·idf vector over the feedback documents.
fn centroid<T: Real>(searcher: &Searcher<'_, T>, doc_ids: &[String]) -> BTreeMap<u32, T> {
    let index = searcher.index();
    let n = T::from_usize_lossy(doc_ids.len());
    let mut centroid: BTreeMap<u32, T> = BTreeMap::new();
    for doc_id in doc_ids {
        let ord = index.ordinal_of(doc_id).expect("feedback doc is indexed");
        for &(term_id, tf) in index.doc_terms(ord) {
            let tf = T::from_u32(tf).unwrap_or_else(T::nan);
            let w = tf * idf::<T>(index.num_docs(), index.postings(term_id).len());
            *centroid.entry(term_id).or_insert_with(T::zero) += w;
        }
    }
    for w in centroid.values_mut() {
        *w /= n;
    }
    centroid
}

/// Rocchio expansion without the negative-feedback component.
pub fn rocchio_expand<T: Real>(
    searcher: &Searcher<'_, T>,
    query: &str,
    params: &RocchioParams<T>,
) -> Result<WeightedQuery<T>, FeedbackError> {
    check_counts(params.fb_docs, params.fb_terms)?;
    if params.alpha < T::zero() || params.beta < T::zero() {
        return Err(FeedbackError::InvalidParameter("alpha and beta must be non-negative"));
    }
    let original = WeightedTerms::<T>::from_text(query);
    let feedback = if original.is_empty() {
        Vec::new()
    } else {
        searcher.top_k(&original, params.fb_docs)?
    };
    if feedback.is_empty() {
        return Ok(WeightedQuery {
            terms: query_distribution(&original),
            origin: ExpansionOrigin::Rocchio,
        });
    }

    let index = searcher.index();
    let doc_ids: Vec<String> = feedback.into_iter().map(|d| d.doc_id).collect();
    let centroid: BTreeMap<String, T> = centroid(searcher, &doc_ids)
        .into_iter()
        .map(|(id, w)| (index.term(id).to_owned(), w))
        .collect();

    let mut terms: BTreeMap<String, T> = BTreeMap::new();
    for (t, count) in original.iter() {
        let fb = centroid.get(t).copied().unwrap_or_else(T::zero);
        terms.insert(t.to_owned(), params.alpha * count + params.beta * fb);
    }
    let mut expansion: Vec<(String, T)> = centroid
        .into_iter()
        .filter(|(t, _)| original.get(t).is_none())
        .collect();
    expansion.sort_by(by_weight_then_term);
    expansion.truncate(params.fb_terms);
    for (t, w) in expansion {
        terms.insert(t, params.beta * w);
    }
    terms.retain(|_, w| *w > T::zero());
    Ok(WeightedQuery {
        terms,
        origin: ExpansionOrigin::Rocchio,
    })
}
