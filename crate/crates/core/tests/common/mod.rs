//! Reference implementations shared by the integration tests.

use std::collections::BTreeMap;

pub struct OracleDoc {
    pub id: String,
    pub tokens: Vec<String>,
}

/// Scores every document directly from its token list.
pub fn oracle_topk(docs: &[OracleDoc], query: &[String], k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (0.9, 0.4);
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.tokens.len()).sum::<usize>() as f64 / n;
    let mut weights: BTreeMap<&str, f64> = BTreeMap::new();
    for t in query {
        *weights.entry(t.as_str()).or_default() += 1.0;
    }
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|d| {
            let dl = d.tokens.len() as f64;
            let mut s = 0.0;
            for (term, w) in &weights {
                let tf = d.tokens.iter().filter(|t| t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|o| o.tokens.iter().any(|t| t == term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                s += w * idf * (tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl)));
            }
            (d.id.clone(), s)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| {
        let close = (a.1 - b.1).abs() <= 1e-12 * a.1.abs().max(b.1.abs());
        if close {
            a.0.cmp(&b.0)
        } else {
            b.1.partial_cmp(&a.1).unwrap()
        }
    });
    scored.truncate(k);
    scored
}
