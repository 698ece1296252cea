//! TREC run/qrels files and the effectiveness measures computed over them.

mod trec;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use trec::{Qrels, Run, RunEntry};

use crate::num::Real;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: query {query_id} has rank {found} where {expected} was expected")]
    RankGap {
        path: PathBuf,
        query_id: String,
        expected: usize,
        found: usize,
    },
    #[error("no query appears in both the run and the qrels")]
    NoJudgedQueries,
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const DEFAULT_BINARIZE_AT: u32 = 2;

fn grade(judgments: &BTreeMap<String, u32>, doc_id: &str) -> u32 {
    judgments.get(doc_id).copied().unwrap_or(0)
}

fn gain<T: Real>(grade: u32) -> T {
    T::from_f64_lossy(2f64.powi(grade as i32) - 1.0)
}

fn discount<T: Real>(rank: usize) -> T {
    T::from_usize_lossy(rank + 1).log2()
}

/// nDCG with gain `2^g − 1`; unjudged documents count as grade 0 and the
/// ideal ordering uses every judged grade of the query.
pub fn ndcg_at_k<T: Real>(ranked: &[&str], judgments: &BTreeMap<String, u32>, k: usize) -> T {
    let dcg: T = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain::<T>(grade(judgments, d)) / discount::<T>(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: T = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain::<T>(g) / discount::<T>(i + 1))
        .sum();
    if idcg > T::zero() {
        dcg / idcg
    } else {
        T::zero()
    }
}

fn num_relevant(judgments: &BTreeMap<String, u32>, binarize_at: u32) -> usize {
    judgments.values().filter(|&&g| g >= binarize_at).count()
}

/// Documents with grade `>= binarize_at` are relevant; the sum of precision
/// at each relevant rank in the top `k` is divided by all relevant documents.
pub fn average_precision_at_k<T: Real>(
    ranked: &[&str],
    judgments: &BTreeMap<String, u32>,
    k: usize,
    binarize_at: u32,
) -> T {
    let r = num_relevant(judgments, binarize_at);
    if r == 0 {
        return T::zero();
    }
    let mut hits = 0usize;
    let mut sum = T::zero();
    for (i, d) in ranked.iter().take(k).enumerate() {
        if grade(judgments, d) >= binarize_at {
            hits += 1;
            sum += T::from_usize_lossy(hits) / T::from_usize_lossy(i + 1);
        }
    }
    sum / T::from_usize_lossy(r)
}

pub fn recall_at_k<T: Real>(ranked: &[&str], judgments: &BTreeMap<String, u32>, k: usize, binarize_at: u32) -> T {
    let r = num_relevant(judgments, binarize_at);
    if r == 0 {
        return T::zero();
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| grade(judgments, d) >= binarize_at)
        .count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(r)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ndcg_k: usize,
    pub map_k: usize,
    pub recall_k: usize,
    pub binarize_at: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ndcg_k: 10,
            map_k: 1000,
            recall_k: 1000,
            binarize_at: DEFAULT_BINARIZE_AT,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics<T = f64> {
    pub map: T,
    pub ndcg: T,
    pub recall: T,
}

impl<T: Real> QueryMetrics<T> {
    pub fn compute(ranked: &[&str], judgments: &BTreeMap<String, u32>, options: &EvalOptions) -> Self {
        Self {
            map: average_precision_at_k(ranked, judgments, options.map_k, options.binarize_at),
            ndcg: ndcg_at_k(ranked, judgments, options.ndcg_k),
            recall: recall_at_k(ranked, judgments, options.recall_k, options.binarize_at),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T = f64> {
    pub run_tag: String,
    pub options: EvalOptions,
    pub per_query: BTreeMap<String, QueryMetrics<T>>,
    pub mean: QueryMetrics<T>,
    /// Queries in both run and qrels.
    pub judged: usize,
    /// Run queries without judgments; excluded from the means.
    pub unjudged: usize,
    /// Judged queries the run does not answer; also excluded.
    pub missing: usize,
}

/// Scores every query present in both `run` and `qrels`.
pub fn evaluate_run<T: Real>(run: &Run<T>, qrels: &Qrels, options: &EvalOptions) -> Result<MetricsReport<T>, EvalError> {
    let mut per_query = BTreeMap::new();
    let mut unjudged = 0;
    for (query_id, entries) in &run.rankings {
        let Some(judgments) = qrels.for_query(query_id) else {
            unjudged += 1;
            continue;
        };
        let ranked: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        per_query.insert(query_id.clone(), QueryMetrics::compute(&ranked, judgments, options));
    }
    if per_query.is_empty() {
        return Err(EvalError::NoJudgedQueries);
    }
    let n = T::from_usize_lossy(per_query.len());
    let mean = QueryMetrics {
        map: per_query.values().map(|m| m.map).sum::<T>() / n,
        ndcg: per_query.values().map(|m| m.ndcg).sum::<T>() / n,
        recall: per_query.values().map(|m| m.recall).sum::<T>() / n,
    };
    let missing = qrels.judgments.keys().filter(|q| !run.rankings.contains_key(*q)).count();
    Ok(MetricsReport {
        run_tag: run.tag.clone(),
        options: options.clone(),
        judged: per_query.len(),
        per_query,
        mean,
        unjudged,
        missing,
    })
}

impl<T: Real> MetricsReport<T> {
    fn headers(&self) -> [String; 3] {
        [
            format!("map@{}", self.options.map_k),
            format!("ndcg@{}", self.options.ndcg_k),
            format!("recall@{}", self.options.recall_k),
        ]
    }

    /// Aligned text table with a trailing `all` row of means.
    pub fn to_table(&self) -> String {
        let [map, ndcg, recall] = self.headers();
        let width = self.per_query.keys().map(String::len).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "run: {}", self.run_tag);
        let _ = writeln!(
            s,
            "judged: {}  unjudged: {}  missing: {}",
            self.judged, self.unjudged, self.missing
        );
        let _ = writeln!(s, "{:<width$}  {map:>10}  {ndcg:>10}  {recall:>12}", "query");
        let row = |s: &mut String, q: &str, m: &QueryMetrics<T>| {
            let _ = writeln!(
                s,
                "{q:<width$}  {:>10.4}  {:>10.4}  {:>12.4}",
                m.map.to_f64_lossless(),
                m.ndcg.to_f64_lossless(),
                m.recall.to_f64_lossless()
            );
        };
        for (q, m) in &self.per_query {
            row(&mut s, q, m);
        }
        row(&mut s, "all", &self.mean);
        s
    }

    /// `run_tag,query_id,<metrics>` with a final `all` row.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let [map, ndcg, recall] = self.headers();
        writeln!(out, "run_tag,query_id,{map},{ndcg},{recall}")?;
        let rows = self.per_query.iter().map(|(q, m)| (q.as_str(), m));
        for (q, m) in rows.chain([("all", &self.mean)]) {
            writeln!(
                out,
                "{},{q},{:.6},{:.6},{:.6}",
                self.run_tag,
                m.map.to_f64_lossless(),
                m.ndcg.to_f64_lossless(),
                m.recall.to_f64_lossless()
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        trec::write_file(path.as_ref(), |out| self.write_csv(out))
    }

    pub fn save_table(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        trec::write_file(path.as_ref(), |out| out.write_all(self.to_table().as_bytes()))
    }
}
