use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::num::Real;

/// Graded judgments: query id → doc id → grade.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn parse(text: &str, source: &Path) -> Result<Self, EvalError> {
        let mut judgments: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Malformed {
                path: source.to_owned(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [query_id, _, doc_id, grade] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            // negative grades (-1, "unjudgeable") read as non-relevant
            let grade: i64 = grade.parse().map_err(|_| err(format!("grade `{grade}` is not an integer")))?;
            let grade = grade.max(0) as u32;
            let previous = judgments
                .entry(query_id.to_owned())
                .or_default()
                .insert(doc_id.to_owned(), grade);
            if previous.is_some_and(|p| p != grade) {
                return Err(err(format!("conflicting grades for {query_id} {doc_id}")));
            }
        }
        Ok(Self { judgments })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        Self::parse(&read(path)?, path)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn num_judgments(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(out, "{q} 0 {d} {g}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry<T = f64> {
    pub doc_id: String,
    pub rank: usize,
    pub score: T,
}

/// A ranked list per query, ranks dense from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run<T = f64> {
    pub tag: String,
    pub rankings: BTreeMap<String, Vec<RunEntry<T>>>,
}

fn read(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })
}

impl<T: Real> Run<T> {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Adds a ranking from `(doc_id, score)` pairs already in rank order.
    pub fn insert_ranking(&mut self, query_id: impl Into<String>, ranked: impl IntoIterator<Item = (String, T)>) {
        let entries = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id,
                rank: i + 1,
                score,
            })
            .collect();
        self.rankings.insert(query_id.into(), entries);
    }

    pub fn ranked_doc_ids(&self, query_id: &str) -> Option<Vec<&str>> {
        self.rankings
            .get(query_id)
            .map(|es| es.iter().map(|e| e.doc_id.as_str()).collect())
    }

    /// Lines may come in any order; each query's ranks must form `1..=n`
    /// with no document listed twice.
    pub fn parse(text: &str, source: &Path) -> Result<Self, EvalError> {
        let mut tag: Option<String> = None;
        let mut rankings: BTreeMap<String, Vec<RunEntry<T>>> = BTreeMap::new();
        let mut lines_of: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Malformed {
                path: source.to_owned(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [query_id, _, doc_id, rank, score, line_tag] = fields[..] else {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            };
            let rank: usize = rank.parse().map_err(|_| err(format!("rank `{rank}` is not a positive integer")))?;
            if rank == 0 {
                return Err(err("ranks start at 1".into()));
            }
            let score: f64 = score.parse().map_err(|_| err(format!("score `{score}` is not a number")))?;
            if !score.is_finite() {
                return Err(err("score is not finite".into()));
            }
            match &tag {
                None => tag = Some(line_tag.to_owned()),
                Some(t) if t != line_tag => return Err(err(format!("tag `{line_tag}` differs from `{t}`"))),
                _ => {}
            }
            rankings.entry(query_id.to_owned()).or_default().push(RunEntry {
                doc_id: doc_id.to_owned(),
                rank,
                score: T::from_f64_lossy(score),
            });
            lines_of.entry(query_id.to_owned()).or_default().push(i + 1);
        }
        for (query_id, entries) in rankings.iter_mut() {
            let lines = &lines_of[query_id];
            let mut seen = HashSet::new();
            for (e, &line) in entries.iter().zip(lines) {
                if !seen.insert(e.doc_id.clone()) {
                    return Err(EvalError::Malformed {
                        path: source.to_owned(),
                        line,
                        message: format!("document {} listed twice for query {query_id}", e.doc_id),
                    });
                }
            }
            entries.sort_by_key(|e| e.rank);
            if let Some(pos) = entries.iter().enumerate().position(|(i, e)| e.rank != i + 1) {
                return Err(EvalError::RankGap {
                    path: source.to_owned(),
                    query_id: query_id.clone(),
                    expected: pos + 1,
                    found: entries[pos].rank,
                });
            }
        }
        Ok(Self {
            tag: tag.unwrap_or_default(),
            rankings,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        Self::parse(&read(path)?, path)
    }

    /// Queries ascending, ranks ascending, scores at 6 decimals.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for (query_id, entries) in &self.rankings {
            for e in entries {
                writeln!(
                    out,
                    "{query_id} Q0 {} {} {:.6} {}",
                    e.doc_id,
                    e.rank,
                    e.score.to_f64_lossless(),
                    self.tag
                )?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        write_file(path.as_ref(), |out| self.write_to(out))
    }
}

pub(crate) fn write_file(
    path: &Path,
    body: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: PathBuf::from(path),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    body(&mut out).and_then(|_| out.flush()).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn two_line_qrels() {
        let q = Qrels::parse("q1 0 d1 2\nq1 0 d2 0\n", src()).unwrap();
        assert_eq!(q.num_judgments(), 2);
        assert_eq!(q.for_query("q1").unwrap()["d1"], 2);
    }

    #[test]
    fn qrels_errors_carry_line() {
        match Qrels::parse("q1 0 d1 2\nq1 0 d2\n", src()) {
            Err(EvalError::Malformed { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(Qrels::parse("q1 0 d1 x\n", src()).is_err());
        assert!(Qrels::parse("q1 0 d1 1\nq1 0 d1 2\n", src()).is_err());
    }

    #[test]
    fn duplicate_doc_rejected() {
        let text = "q1 Q0 d1 1 2.0 t\nq1 Q0 d1 2 1.0 t\n";
        match Run::<f64>::parse(text, src()) {
            Err(EvalError::Malformed { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rank_gap_rejected() {
        let text = "q1 Q0 d1 1 2.0 t\nq1 Q0 d2 3 1.0 t\n";
        assert!(matches!(
            Run::<f64>::parse(text, src()),
            Err(EvalError::RankGap { expected: 2, found: 3, .. })
        ));
    }

    #[test]
    fn write_parse_round_trip() {
        let mut run = Run::<f64>::new("bm25-abc");
        run.insert_ranking("q2", vec![("d9".to_owned(), 3.25), ("d1".to_owned(), 1.5)]);
        run.insert_ranking("q1", vec![("d3".to_owned(), 0.125)]);
        let mut out = Vec::new();
        run.write_to(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "q1 Q0 d3 1 0.125000 bm25-abc\nq2 Q0 d9 1 3.250000 bm25-abc\nq2 Q0 d1 2 1.500000 bm25-abc\n"
        );
        assert_eq!(Run::<f64>::parse(&text, src()).unwrap(), run);
    }

    #[test]
    fn unordered_lines_accepted() {
        let run = Run::<f64>::parse("q1 Q0 b 2 1 t\nq1 Q0 a 1 2 t\n", src()).unwrap();
        assert_eq!(run.ranked_doc_ids("q1").unwrap(), ["a", "b"]);
    }
}
