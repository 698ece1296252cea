//! Full-corpus smoke check, not part of the default test run.
//!
//! Point `QREFORM_FULL_CORPUS_DIR` at a directory holding `collection.tsv`
//! (passage id, text), `queries.tsv` and `qrels.txt` for the 2019 deep
//! learning passage queries, then run
//!
//!     cargo test --release -p qreform --test full_corpus -- --ignored --nocapture
//!
//! Indexing the 8.8M-passage collection needs tens of GB of memory.

use std::path::PathBuf;

use qreform::corpus::{read_documents, read_queries, InvertedIndex, Searcher, WeightedTerms};
use qreform::eval::{evaluate_run, EvalOptions, Qrels, Run};
use rayon::prelude::*;

const EXPECTED_BM25_NDCG10: f64 = 0.497;
const TOLERANCE: f64 = 0.01;

#[test]
#[ignore]
fn full_corpus_bm25() {
    let Some(dir) = std::env::var_os("QREFORM_FULL_CORPUS_DIR").map(PathBuf::from) else {
        eprintln!("QREFORM_FULL_CORPUS_DIR is not set; skipping");
        return;
    };
    let index = InvertedIndex::build(read_documents(dir.join("collection.tsv")).unwrap()).unwrap();
    let queries = read_queries(dir.join("queries.tsv")).unwrap();
    let qrels = Qrels::load(dir.join("qrels.txt")).unwrap();
    let searcher = Searcher::<f64>::new(&index);

    let rankings: Vec<_> = queries
        .par_iter()
        .filter(|q| qrels.for_query(&q.query_id).is_some())
        .map(|q| {
            let hits = searcher.top_k(&WeightedTerms::from_text(&q.text), 1000).unwrap();
            (q.query_id.clone(), hits.into_iter().map(|h| (h.doc_id, h.score)).collect::<Vec<_>>())
        })
        .collect();
    let mut run = Run::<f64>::new("bm25");
    for (query_id, ranked) in rankings {
        run.insert_ranking(query_id, ranked);
    }
    let report = evaluate_run(&run, &qrels, &EvalOptions::default()).unwrap();
    println!("{}", report.to_table());
    let ndcg = report.mean.ndcg;
    assert!(
        (ndcg - EXPECTED_BM25_NDCG10).abs() <= TOLERANCE,
        "BM25 nDCG@10 {ndcg:.4} is outside {EXPECTED_BM25_NDCG10} +/- {TOLERANCE}"
    );
}
