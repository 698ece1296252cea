//! Hashed n-gram features over a query and its retrieval context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::corpus::{tokenize, RetrievalContext};
use crate::num::Real;

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub ngram_orders: Vec<usize>,
    /// Tokens of each snippet that are featurized.
    pub snippet_tokens: usize,
    pub hash_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_FEATURE_DIM,
            ngram_orders: vec![1, 2],
            snippet_tokens: 64,
            hash_seed: 0,
        }
    }
}

/// Sparse vector with strictly increasing indices and positive values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<T = f64> {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Real> FeatureVector<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a vector from unordered `(index, value)` pairs, summing
    /// duplicates and dropping non-positive totals.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, T)>) -> Self {
        let mut merged: BTreeMap<u32, T> = BTreeMap::new();
        for (i, v) in pairs {
            assert!((i as usize) < dim, "feature index {i} outside dimension {dim}");
            *merged.entry(i).or_insert_with(T::zero) += v;
        }
        merged.retain(|_, v| *v > T::zero());
        let (indices, values) = merged.into_iter().unzip();
        Self { dim, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices.iter().zip(&self.values).map(|(&i, &v)| (i as usize, v))
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            dim: self.dim,
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| v * factor).collect(),
        }
    }
}

fn bucket(namespace: &str, gram: &str, config: &FeatureConfig) -> u32 {
    let mut key = String::with_capacity(namespace.len() + gram.len());
    key.push_str(namespace);
    key.push_str(gram);
    (XxHash64::oneshot(config.hash_seed, key.as_bytes()) % config.dim as u64) as u32
}

fn push_ngrams(tokens: &[String], namespace: &str, config: &FeatureConfig, out: &mut BTreeMap<u32, u32>) {
    for &n in &config.ngram_orders {
        if n == 0 || tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            *out.entry(bucket(namespace, &window.join(" "), config)).or_insert(0) += 1;
        }
    }
}

/// Query n-grams under the `q:` namespace and snippet n-grams under `d:`;
/// each value is the occurrence count of its bucket.
pub fn featurize<T: Real, S>(query: &str, context: &RetrievalContext<S>, config: &FeatureConfig) -> FeatureVector<T> {
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    push_ngrams(&tokenize(query), "q:", config, &mut counts);
    for entry in &context.entries {
        let mut tokens = tokenize(&entry.snippet);
        tokens.truncate(config.snippet_tokens);
        push_ngrams(&tokens, "d:", config, &mut counts);
    }
    let (indices, values) = counts
        .into_iter()
        .map(|(i, c)| (i, T::from_u32(c).unwrap_or_else(T::nan)))
        .unzip();
    FeatureVector {
        dim: config.dim,
        indices,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ContextEntry;

    fn ctx(snippets: &[&str]) -> RetrievalContext<f64> {
        RetrievalContext {
            query_id: "q".into(),
            k: snippets.len(),
            entries: snippets
                .iter()
                .enumerate()
                .map(|(i, s)| ContextEntry {
                    doc_id: format!("d{i}"),
                    score: 1.0,
                    snippet: (*s).into(),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_input_empty_vector() {
        let v: FeatureVector = featurize("", &RetrievalContext::<f64>::empty("q"), &FeatureConfig::default());
        assert!(v.is_empty());
    }

    #[test]
    fn deterministic() {
        let c = ctx(&["bank interest rates", "river bank"]);
        let cfg = FeatureConfig::default();
        let a: FeatureVector = featurize("bank rates", &c, &cfg);
        let b: FeatureVector = featurize("bank rates", &c, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn query_only_features_without_context() {
        let cfg = FeatureConfig::default();
        let v: FeatureVector = featurize("bank rates", &RetrievalContext::<f64>::empty("q"), &cfg);
        let expected: Vec<u32> = {
            let mut e: Vec<u32> = ["bank", "rates", "bank rates"]
                .iter()
                .map(|g| bucket("q:", g, &cfg))
                .collect();
            e.sort_unstable();
            e.dedup();
            e
        };
        assert_eq!(v.indices, expected);
        assert!(v.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn indices_sorted_values_positive() {
        let cfg = FeatureConfig {
            dim: 64,
            ..Default::default()
        };
        let v: FeatureVector = featurize("a b c a b c d e f", &ctx(&["x y z a b", "q r s"]), &cfg);
        assert!(v.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(v.values.iter().all(|&x| x > 0.0));
        assert!(v.indices.iter().all(|&i| (i as usize) < 64));
        // counts: 9 query unigrams + 8 bigrams + 8 snippet unigrams + 6 bigrams
        assert_eq!(v.values.iter().sum::<f64>(), 31.0);
    }

    #[test]
    fn snippet_cap_applies() {
        let cfg = FeatureConfig {
            snippet_tokens: 2,
            ngram_orders: vec![1],
            ..Default::default()
        };
        let v: FeatureVector = featurize("", &ctx(&["one two three four"]), &cfg);
        assert_eq!(v.values.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn from_pairs_merges() {
        let v = FeatureVector::<f64>::from_pairs(10, [(3, 1.0), (1, 2.0), (3, 0.5), (5, 0.0)]);
        assert_eq!(v.indices, [1, 3]);
        assert_eq!(v.values, [2.0, 1.5]);
    }
}
